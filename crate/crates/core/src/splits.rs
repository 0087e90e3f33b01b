//! Held-out concept pairs, the pair-occurrence matcher, and train/val/test
//! partitions with paradigmatic gaps.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Animacy, CorpusRecord, DepArc, Lexicon, Reference, Transitivity, WordClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    AdjectiveNoun,
    VerbNoun,
}

/// Cell of the category breakdown table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairCategory {
    ColorAnimate,
    ColorInanimate,
    SizeAnimate,
    SizeInanimate,
    Transitive,
    Intransitive,
}

impl PairCategory {
    pub const ALL: [PairCategory; 6] = [
        PairCategory::ColorAnimate,
        PairCategory::ColorInanimate,
        PairCategory::SizeAnimate,
        PairCategory::SizeInanimate,
        PairCategory::Transitive,
        PairCategory::Intransitive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PairCategory::ColorAnimate => "color/animate",
            PairCategory::ColorInanimate => "color/inanimate",
            PairCategory::SizeAnimate => "size/animate",
            PairCategory::SizeInanimate => "size/inanimate",
            PairCategory::Transitive => "verb/transitive",
            PairCategory::Intransitive => "verb/intransitive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptPair {
    pub dependent: String,
    pub noun: String,
    pub kind: PairKind,
    pub category: PairCategory,
}

impl fmt::Display for ConceptPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.dependent, self.noun)
    }
}

impl ConceptPair {
    pub fn new(dependent: &str, noun: &str, lex: &Lexicon) -> Result<Self> {
        let animacy = lex
            .animacy(noun)
            .ok_or_else(|| Error::Config(format!("{noun:?} is not a noun")))?;
        let (kind, category) = match (lex.class_of(dependent), animacy) {
            (WordClass::Color, Animacy::Animate) => (PairKind::AdjectiveNoun, PairCategory::ColorAnimate),
            (WordClass::Color, Animacy::Inanimate) => {
                (PairKind::AdjectiveNoun, PairCategory::ColorInanimate)
            }
            (WordClass::Size, Animacy::Animate) => (PairKind::AdjectiveNoun, PairCategory::SizeAnimate),
            (WordClass::Size, Animacy::Inanimate) => {
                (PairKind::AdjectiveNoun, PairCategory::SizeInanimate)
            }
            (WordClass::Verb, _) => {
                let t = lex.verb(dependent).expect("verb").transitivity;
                let c = match t {
                    Transitivity::Transitive => PairCategory::Transitive,
                    Transitivity::Intransitive => PairCategory::Intransitive,
                };
                (PairKind::VerbNoun, c)
            }
            _ => {
                return Err(Error::Config(format!(
                    "{dependent:?} is neither an adjective nor a verb"
                )))
            }
        };
        Ok(ConceptPair {
            dependent: dependent.into(),
            noun: noun.into(),
            kind,
            category,
        })
    }

    /// Parse `"black cat"` / `"eat man"`.
    pub fn parse(s: &str, lex: &Lexicon) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        match parts.as_slice() {
            [d, n] => Self::new(d, n, lex),
            _ => Err(Error::Config(format!("bad concept pair {s:?}"))),
        }
    }
}

/// True iff the tokens realise `pair` in the required dependency relation.
pub fn pair_occurs_in(tokens: &[String], arcs: &[DepArc], pair: &ConceptPair, lex: &Lexicon) -> bool {
    let lemma = |i: usize| tokens.get(i).map(|t| lex.lemma(t));
    arcs.iter().any(|a| {
        let Some(h) = a.head else { return false };
        match (pair.kind, a.rel.as_str()) {
            (PairKind::AdjectiveNoun, "amod") | (PairKind::VerbNoun, "acl") => {
                lemma(a.dep) == Some(pair.dependent.as_str()) && lemma(h) == Some(pair.noun.as_str())
            }
            (PairKind::VerbNoun, "nsubj") => {
                lemma(h) == Some(pair.dependent.as_str()) && lemma(a.dep) == Some(pair.noun.as_str())
            }
            _ => false,
        }
    })
}

pub fn pair_occurs(reference: &Reference, pair: &ConceptPair, lex: &Lexicon) -> bool {
    pair_occurs_in(&reference.tokens, &reference.dep_arcs, pair, lex)
}

/// The four default held-out sets.
pub const DEFAULT_HELDOUT: [[&str; 6]; 4] = [
    ["black cat", "big bird", "red bus", "small plane", "eat man", "lie woman"],
    ["brown dog", "small cat", "white truck", "big plane", "ride woman", "fly bird"],
    ["white horse", "big cat", "blue bus", "small table", "hold child", "stand bird"],
    ["black bird", "small dog", "white boat", "big truck", "eat horse", "stand child"],
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub heldout_sets: Vec<Vec<ConceptPair>>,
    pub active_set: usize,
}

impl SplitSpec {
    pub fn default_sets(lex: &Lexicon, active_set: usize) -> Result<Self> {
        let heldout_sets = DEFAULT_HELDOUT
            .iter()
            .map(|set| set.iter().map(|p| ConceptPair::parse(p, lex)).collect())
            .collect::<Result<_>>()?;
        let spec = SplitSpec {
            heldout_sets,
            active_set,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.heldout_sets.is_empty() && self.active_set >= self.heldout_sets.len() {
            return Err(Error::Config(format!(
                "active set {} but only {} held-out sets",
                self.active_set,
                self.heldout_sets.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for p in self.heldout_sets.iter().flatten() {
            if !seen.insert((&p.dependent, &p.noun)) {
                return Err(Error::Config(format!("pair {p} appears in two held-out sets")));
            }
        }
        Ok(())
    }

    pub fn active(&self) -> &[ConceptPair] {
        self.heldout_sets
            .get(self.active_set)
            .map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub spec: SplitSpec,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn partition_of(&self, id: u64) -> Option<Partition> {
        if self.train.binary_search(&id).is_ok() {
            Some(Partition::Train)
        } else if self.val.binary_search(&id).is_ok() {
            Some(Partition::Val)
        } else if self.test.binary_search(&id).is_ok() {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, p: Partition) -> &[u64] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Partition the corpus so that no training reference contains an active
/// held-out pair.
pub fn build_splits(
    corpus: &[CorpusRecord],
    spec: &SplitSpec,
    ratios: (f64, f64, f64),
    seed: u64,
    lex: &Lexicon,
) -> Result<DatasetSplit> {
    spec.validate()?;
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let active = spec.active();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut pool = Vec::new();
    let mut warnings = Vec::new();
    if active.is_empty() {
        // no gap to protect: plain random split
        let mut ids: Vec<u64> = corpus.iter().map(|r| r.scene.id).collect();
        ids.shuffle(&mut rng);
        let n_train = (tr * ids.len() as f64).round() as usize;
        train.extend_from_slice(&ids[..n_train]);
        pool.extend_from_slice(&ids[n_train..]);
    } else {
        let mut counts = vec![0usize; active.len()];
        for rec in corpus {
            let mut gap = false;
            for (k, p) in active.iter().enumerate() {
                if rec.references.iter().any(|r| pair_occurs(r, p, lex)) {
                    counts[k] += 1;
                    gap = true;
                }
            }
            if gap {
                pool.push(rec.scene.id);
            } else {
                train.push(rec.scene.id);
            }
        }
        for (p, c) in active.iter().zip(&counts) {
            if *c == 0 {
                warnings.push(format!("held-out pair '{p}' never occurs in the corpus"));
            }
        }
        pool.shuffle(&mut rng);
    }
    let n_val = (va / (va + te) * pool.len() as f64).round() as usize;
    let mut val = pool[..n_val].to_vec();
    let mut test = pool[n_val..].to_vec();

    let train_set: BTreeSet<u64> = train.iter().copied().collect();
    let mut train_lemmas = BTreeSet::new();
    for rec in corpus.iter().filter(|r| train_set.contains(&r.scene.id)) {
        for r in &rec.references {
            train_lemmas.extend(r.tokens.iter().map(|t| lex.lemma(t).to_string()));
        }
    }
    let mut missing = BTreeSet::new();
    for p in active {
        for w in [&p.dependent, &p.noun] {
            if !train_lemmas.contains(w.as_str()) {
                missing.insert(w.clone());
            }
        }
    }
    for w in missing {
        warnings.push(format!("held-out lemma '{w}' does not occur in any training reference"));
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train,
        val,
        test,
        spec: spec.clone(),
        ratios,
        seed,
        warnings,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    spec: SplitSpec,
    ratios: (f64, f64, f64),
    seed: u64,
    warnings: Vec<String>,
    counts: (usize, usize, usize),
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    scene: u64,
    partition: Partition,
}

pub fn write_split_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = ManifestHeader {
        spec: split.spec.clone(),
        ratios: split.ratios,
        seed: split.seed,
        warnings: split.warnings.clone(),
        counts: (split.train.len(), split.val.len(), split.test.len()),
    };
    serde_json::to_writer(&mut w, &serde_json::json!({ "header": header }))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<ManifestLine> = Vec::new();
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        lines.extend(split.ids(p).iter().map(|&scene| ManifestLine { scene, partition: p }));
    }
    lines.sort_by_key(|l| l.scene);
    for l in lines {
        serde_json::to_writer(&mut w, &l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<DatasetSplit> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    struct H {
        header: ManifestHeader,
    }
    let h: H = serde_json::from_str(&first)?;
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        spec: h.header.spec,
        ratios: h.header.ratios,
        seed: h.header.seed,
        warnings: h.header.warnings,
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: ManifestLine = serde_json::from_str(&line)?;
        match l.partition {
            Partition::Train => split.train.push(l.scene),
            Partition::Val => split.val.push(l.scene),
            Partition::Test => split.test.push(l.scene),
        }
    }
    Ok(split)
}
