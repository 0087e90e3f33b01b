//! Metrics: compositional recall, category tables, minimum-importance
//! curves, tag accuracy, corpus BLEU, and the diversity block.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::captioner::DecodeRecord;
use crate::error::{Error, Result};
use crate::planner::{Approach, TagSet};
use crate::ranker::RecallRecord;
use crate::splits::{pair_occurs, pair_occurs_in, ConceptPair, PairCategory};
use crate::world::{oracle_tags, rule_arcs, DepArc, Lexicon, Reference};

/// Tokens per segment for type/token ratios.
pub const TTR_SEGMENT: usize = 100;

/// One generated caption after tag stripping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Rule-derived arcs over `tokens`.
    pub arcs: Vec<DepArc>,
    pub wellformed: bool,
}

impl Generation {
    pub fn new(tokens: Vec<String>, tags: Vec<String>, wellformed: bool, lex: &Lexicon) -> Self {
        let arcs = rule_arcs(&tokens, lex);
        Generation {
            tokens,
            tags,
            arcs,
            wellformed,
        }
    }
}

/// The ranked captions of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenerations {
    pub scene: u64,
    pub captions: Vec<Generation>,
}

/// Group decode records by scene (ascending id), ordered by rank.
pub fn generation_set(records: &[DecodeRecord], lex: &Lexicon) -> Vec<SceneGenerations> {
    let mut by_scene: BTreeMap<u64, Vec<&DecodeRecord>> = BTreeMap::new();
    for r in records {
        by_scene.entry(r.scene).or_default().push(r);
    }
    by_scene
        .into_iter()
        .map(|(scene, mut rs)| {
            rs.sort_by_key(|r| r.rank);
            SceneGenerations {
                scene,
                captions: rs
                    .into_iter()
                    .map(|r| Generation::new(r.tokens.clone(), r.tags.clone(), r.wellformed, lex))
                    .collect(),
            }
        })
        .collect()
}

fn caption_has(g: &Generation, pair: &ConceptPair, lex: &Lexicon) -> bool {
    pair_occurs_in(&g.tokens, &g.arcs, pair, lex)
}

/// Rank (0-based) of the first caption containing the pair.
fn first_hit(s: &SceneGenerations, pair: &ConceptPair, lex: &Lexicon) -> Option<usize> {
    s.captions.iter().position(|g| caption_has(g, pair, lex))
}

/// Fraction of scenes with the pair among their top-`k` captions. Every
/// scene is assumed to belong to the pair's evaluation subset.
pub fn recall_at_k(gens: &[SceneGenerations], pair: &ConceptPair, k: usize, lex: &Lexicon) -> Result<f64> {
    if gens.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    let hits = gens
        .iter()
        .filter(|s| first_hit(s, pair, lex).is_some_and(|r| r < k))
        .count();
    Ok(hits as f64 / gens.len() as f64)
}

/// Scenes with at least one reference containing the pair.
pub fn in_evaluation_subset(references: &[Reference], pair: &ConceptPair, lex: &Lexicon) -> bool {
    references.iter().any(|r| pair_occurs(r, pair, lex))
}

/// Unweighted mean recall per category; cells without pairs are `None`.
pub fn category_breakdown(recalls: &[(ConceptPair, f64)]) -> Vec<(PairCategory, Option<f64>)> {
    PairCategory::ALL
        .iter()
        .map(|&cat| {
            let vals: Vec<f64> = recalls
                .iter()
                .filter(|(p, _)| p.category == cat)
                .map(|(_, r)| *r)
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (cat, mean)
        })
        .collect()
}

/// Recall restricted to scenes where at least `j` references contain the
/// pair, for `j = 1..=n_refs`; levels without scenes are omitted.
/// `references[m]` belongs to `gens[m]`.
pub fn min_importance_curve(
    gens: &[SceneGenerations],
    references: &[&[Reference]],
    pair: &ConceptPair,
    k: usize,
    n_refs: usize,
    lex: &Lexicon,
) -> Result<Vec<(usize, f64)>> {
    if gens.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} generation sets vs {} reference sets",
            gens.len(),
            references.len()
        )));
    }
    let counts: Vec<usize> = references
        .iter()
        .map(|rs| rs.iter().filter(|r| pair_occurs(r, pair, lex)).count())
        .collect();
    let hit: Vec<bool> = gens
        .iter()
        .map(|s| first_hit(s, pair, lex).is_some_and(|r| r < k))
        .collect();
    let mut out = Vec::new();
    for j in 1..=n_refs {
        let members: Vec<usize> = (0..gens.len()).filter(|&m| counts[m] >= j).collect();
        if !members.is_empty() {
            let h = members.iter().filter(|&&m| hit[m]).count();
            out.push((j, h as f64 / members.len() as f64));
        }
    }
    Ok(out)
}

/// Fraction of captions whose generated tags equal the oracle tags of
/// their own tokens.
pub fn tag_accuracy(captions: &[&Generation], approach: Approach, tagset: TagSet, lex: &Lexicon) -> Result<f64> {
    if !approach.caption_kind().has_tags() {
        return Err(Error::NotApplicable(format!("tag accuracy for approach {approach}")));
    }
    if captions.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    let correct = captions
        .iter()
        .filter(|g| {
            let want: Vec<String> = match tagset.kind() {
                Some(k) => oracle_tags(&g.tokens, lex).get(k).to_vec(),
                None => vec!["<idle>".to_string(); g.tokens.len()],
            };
            g.tags == want
        })
        .count();
    Ok(correct as f64 / captions.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in [0, 100] with brevity penalty against the closest
/// reference length (shorter on ties). Precisions for n > 1 use add-one
/// smoothing; an empty generation scores 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let c = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, cnt) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in c {
                totals[n - 1] += cnt;
                matches[n - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let (m, t) = if i == 0 {
                (matches[0] as f64, totals[0] as f64)
            } else {
                (matches[i] as f64 + 1.0, totals[i] as f64 + 1.0)
            };
            (m / t).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityBlock {
    /// Mean caption length in tokens.
    pub asl: f64,
    pub types: usize,
    pub ttr1: f64,
    pub ttr2: f64,
    /// Percentage of captions not found verbatim among training captions.
    pub novel: f64,
    /// Percentage of training word types generated at least once.
    pub coverage: f64,
    /// Mean percentage of a scene's reference content words generated.
    pub local5: f64,
}

/// Mean n-gram type/token ratio over consecutive `TTR_SEGMENT`-token
/// segments of the concatenated captions (a short tail segment counts only
/// when it is the sole segment).
pub fn segmented_ttr(captions: &[Vec<String>], n: usize) -> f64 {
    let stream: Vec<String> = captions.iter().flatten().cloned().collect();
    let mut segs: Vec<&[String]> = stream.chunks(TTR_SEGMENT).collect();
    if segs.len() > 1 && segs.last().is_some_and(|s| s.len() < TTR_SEGMENT) {
        segs.pop();
    }
    let ratios: Vec<f64> = segs
        .iter()
        .filter(|s| s.len() >= n)
        .map(|s| {
            let grams: Vec<&[String]> = s.windows(n).collect();
            let types: HashSet<&[String]> = grams.iter().copied().collect();
            types.len() as f64 / grams.len() as f64
        })
        .collect();
    if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

fn is_content_pos(tag: &str) -> bool {
    matches!(tag, "NOUN" | "VERB" | "ADJ")
}

/// Content words of a token list according to the oracle tagger.
pub fn content_words(tokens: &[String], lex: &Lexicon) -> BTreeSet<String> {
    let tags = oracle_tags(tokens, lex);
    tokens
        .iter()
        .zip(&tags.pos)
        .filter(|(_, t)| is_content_pos(t))
        .map(|(w, _)| w.clone())
        .collect()
}

/// `captions[m]` is the generated caption for scene `m`, whose references
/// are `references[m]`.
pub fn diversity_metrics(
    captions: &[Vec<String>],
    train_captions: &[Vec<String>],
    references: &[&[Reference]],
    lex: &Lexicon,
) -> Result<DiversityBlock> {
    if captions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} captions vs {} reference sets",
            captions.len(),
            references.len()
        )));
    }
    let n = captions.len().max(1) as f64;
    let asl = captions.iter().map(|c| c.len()).sum::<usize>() as f64 / n;
    let gen_types: BTreeSet<&String> = captions.iter().flatten().collect();
    let train_strings: HashSet<String> = train_captions.iter().map(|c| c.join(" ")).collect();
    let novel = captions
        .iter()
        .filter(|c| !train_strings.contains(&c.join(" ")))
        .count() as f64
        / n
        * 100.0;
    let train_types: BTreeSet<&String> = train_captions.iter().flatten().collect();
    let coverage = if train_types.is_empty() {
        0.0
    } else {
        gen_types.intersection(&train_types).count() as f64 / train_types.len() as f64 * 100.0
    };
    let mut local = Vec::new();
    for (cap, refs) in captions.iter().zip(references) {
        let ref_content: BTreeSet<&String> = refs
            .iter()
            .flat_map(|r| r.tokens.iter().zip(&r.tags.pos))
            .filter(|(_, t)| is_content_pos(t))
            .map(|(w, _)| w)
            .collect();
        if ref_content.is_empty() {
            continue;
        }
        let gen = content_words(cap, lex);
        let hit = ref_content.iter().filter(|w| gen.contains(**w)).count();
        local.push(hit as f64 / ref_content.len() as f64 * 100.0);
    }
    Ok(DiversityBlock {
        asl,
        types: gen_types.len(),
        ttr1: segmented_ttr(captions, 1),
        ttr2: segmented_ttr(captions, 2),
        novel,
        coverage,
        local5: if local.is_empty() {
            0.0
        } else {
            local.iter().sum::<f64>() / local.len() as f64
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecall {
    pub pair: String,
    pub category: PairCategory,
    /// Scenes in the pair's evaluation subset.
    pub scenes: usize,
    /// Recall at K = 1..=k_max.
    pub recall: Vec<f64>,
    pub curve: Vec<(usize, f64)>,
}

/// All metrics of one (model, approach, tag set, split, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub backend: String,
    pub approach: Approach,
    pub tagset: TagSet,
    pub heldout_set: usize,
    pub split: String,
    pub seed: u64,
    pub k: usize,
    pub pairs: Vec<PairRecall>,
    /// Mean over pairs of recall at K = 1..=k.
    pub mean_recall: Vec<f64>,
    pub categories: Vec<(PairCategory, Option<f64>)>,
    /// Mean over pairs of the minimum-importance curve at K.
    pub curve: Vec<(usize, f64)>,
    pub bleu: f64,
    pub tag_accuracy: Option<f64>,
    pub wellformed: f64,
    pub diversity: DiversityBlock,
    pub retrieval: Option<Vec<RecallRecord>>,
}

pub struct EvalInputs<'a> {
    pub gens: &'a [SceneGenerations],
    /// References of each scene in `gens`, aligned.
    pub references: Vec<&'a [Reference]>,
    pub train_captions: &'a [Vec<String>],
    pub pairs: &'a [ConceptPair],
    pub k: usize,
    pub n_refs: usize,
}

/// Compute every caption metric of a cell (retrieval is attached by the
/// caller).
pub fn evaluate(inp: &EvalInputs, approach: Approach, tagset: TagSet, lex: &Lexicon) -> Result<MetricsReport> {
    if inp.gens.len() != inp.references.len() {
        return Err(Error::Shape("generations and references are not aligned".into()));
    }
    if inp.gens.iter().any(|s| s.captions.is_empty()) {
        return Err(Error::Data("a scene has no generated caption".into()));
    }
    let mut pairs = Vec::new();
    for p in inp.pairs {
        let members: Vec<usize> = (0..inp.gens.len())
            .filter(|&m| in_evaluation_subset(inp.references[m], p, lex))
            .collect();
        if members.is_empty() {
            continue;
        }
        let sub: Vec<SceneGenerations> = members.iter().map(|&m| inp.gens[m].clone()).collect();
        let refs: Vec<&[Reference]> = members.iter().map(|&m| inp.references[m]).collect();
        let recall = (1..=inp.k)
            .map(|k| recall_at_k(&sub, p, k, lex))
            .collect::<Result<Vec<_>>>()?;
        pairs.push(PairRecall {
            pair: p.to_string(),
            category: p.category,
            scenes: members.len(),
            recall,
            curve: min_importance_curve(&sub, &refs, p, inp.k, inp.n_refs, lex)?,
        });
    }
    let mean_recall = (0..inp.k)
        .map(|i| mean(pairs.iter().map(|p| p.recall[i])))
        .collect();
    let at_k: Vec<(ConceptPair, f64)> = inp
        .pairs
        .iter()
        .filter_map(|p| {
            let name = p.to_string();
            pairs.iter().find(|r| r.pair == name).map(|r| (p.clone(), r.recall[inp.k - 1]))
        })
        .collect();
    let mut curve = Vec::new();
    for j in 1..=inp.n_refs {
        let pts: Vec<f64> = pairs
            .iter()
            .filter_map(|p| p.curve.iter().find(|(l, _)| *l == j).map(|(_, r)| *r))
            .collect();
        if !pts.is_empty() {
            curve.push((j, mean(pts.into_iter())));
        }
    }
    let top: Vec<&Generation> = inp.gens.iter().map(|s| &s.captions[0]).collect();
    let top_tokens: Vec<Vec<String>> = top.iter().map(|g| g.tokens.clone()).collect();
    let ref_tokens: Vec<Vec<Vec<String>>> = inp
        .references
        .iter()
        .map(|rs| rs.iter().map(|r| r.tokens.clone()).collect())
        .collect();
    let tag_acc = match tag_accuracy(&top, approach, tagset, lex) {
        Ok(a) => Some(a),
        Err(Error::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        backend: String::new(),
        approach,
        tagset,
        heldout_set: 0,
        split: String::new(),
        seed: 0,
        k: inp.k,
        mean_recall,
        categories: category_breakdown(&at_k),
        curve,
        pairs,
        bleu: bleu(&top_tokens, &ref_tokens, 4)?,
        tag_accuracy: tag_acc,
        wellformed: top.iter().filter(|g| g.wellformed).count() as f64 / top.len().max(1) as f64,
        diversity: diversity_metrics(&top_tokens, inp.train_captions, &inp.references, lex)?,
        retrieval: None,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let recalls = self
            .pairs
            .iter()
            .flat_map(|p| p.recall.iter().chain(p.curve.iter().map(|(_, r)| r)))
            .chain(&self.mean_recall);
        for &r in recalls {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::NonFinite(format!("recall {r} outside [0, 1]")));
            }
        }
        let d = &self.diversity;
        let scalars = [self.bleu, self.wellformed, d.asl, d.ttr1, d.ttr2, d.novel, d.coverage, d.local5];
        if scalars.iter().chain(&self.tag_accuracy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metrics report".into()));
        }
        Ok(())
    }

    /// Aligned-column rendering: pair recalls, the category table, and the
    /// caption-quality block.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} / {} / {} / set {} / {} / seed {}",
            self.backend, self.approach, self.tagset, self.heldout_set, self.split, self.seed
        );
        let _ = writeln!(s, "{:<22} {:>7} {:>7} {:>7}", "pair", "scenes", "R@1", format!("R@{}", self.k));
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{:<22} {:>7} {:>7.2} {:>7.2}",
                p.pair,
                p.scenes,
                100.0 * p.recall[0],
                100.0 * p.recall[self.k - 1]
            );
        }
        let _ = writeln!(
            s,
            "{:<22} {:>7} {:>7.2} {:>7.2}",
            "average",
            "",
            100.0 * self.mean_recall.first().copied().unwrap_or(0.0),
            100.0 * self.mean_recall.last().copied().unwrap_or(0.0)
        );
        let _ = writeln!(s);
        for (cat, v) in &self.categories {
            let cell = v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(s, "{:<22} {:>7}", cat.label(), cell);
        }
        let _ = writeln!(s);
        let d = &self.diversity;
        let tag = self.tag_accuracy.map_or("-".to_string(), |a| format!("{:.3}", a));
        let _ = writeln!(
            s,
            "BLEU {:.2}  tags {}  wellformed {:.3}  ASL {:.2}  types {}  TTR1 {:.3}  TTR2 {:.3}  novel {:.1}  cov {:.1}  local5 {:.1}",
            self.bleu, tag, self.wellformed, d.asl, d.types, d.ttr1, d.ttr2, d.novel, d.coverage, d.local5
        );
        s
    }
}
