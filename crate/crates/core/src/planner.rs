//! Symbol streams for the planning approaches: a joint word/tag vocabulary,
//! encoding of (tokens, tags) pairs, tag stripping, and validation of
//! generated streams.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Reference, TagKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Word,
    Tag,
    Control,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Word => "WORD",
            Role::Tag => "TAG",
            Role::Control => "CONTROL",
        }
    }
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const START_WORDS: usize = 4;
pub const START_TAGS: usize = 5;
pub const IDLE: usize = 6;

const CONTROLS: [(&str, Role); 7] = [
    ("<s>", Role::Control),
    ("</s>", Role::Control),
    ("<pad>", Role::Control),
    ("<unk>", Role::Control),
    ("<S>", Role::Control),
    ("<T>", Role::Control),
    ("<idle>", Role::Tag),
];

/// How captions are planned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Standard,
    Sequential,
    Interleave,
    Multitask,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::Standard,
        Approach::Sequential,
        Approach::Interleave,
        Approach::Multitask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Standard => "standard",
            Approach::Sequential => "sequential",
            Approach::Interleave => "interleave",
            Approach::Multitask => "multitask",
        }
    }

    /// The stream decoded to produce a caption.
    pub fn caption_kind(self) -> SeqKind {
        match self {
            Approach::Standard => SeqKind::Standard,
            Approach::Sequential => SeqKind::Sequential,
            Approach::Interleave => SeqKind::Interleave,
            Approach::Multitask => SeqKind::MultitaskWords,
        }
    }

    pub fn uses_tags(self) -> bool {
        self != Approach::Standard
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown approach {s:?}")))
    }
}

/// Kind of a single planned stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqKind {
    Standard,
    Sequential,
    Interleave,
    MultitaskWords,
    MultitaskTags,
}

impl SeqKind {
    pub const ALL: [SeqKind; 5] = [
        SeqKind::Standard,
        SeqKind::Sequential,
        SeqKind::Interleave,
        SeqKind::MultitaskWords,
        SeqKind::MultitaskTags,
    ];

    pub fn start(self) -> usize {
        match self {
            SeqKind::MultitaskWords => START_WORDS,
            SeqKind::MultitaskTags => START_TAGS,
            _ => BOS,
        }
    }

    pub fn has_tags(self) -> bool {
        !matches!(self, SeqKind::Standard | SeqKind::MultitaskWords)
    }

    pub fn has_words(self) -> bool {
        self != SeqKind::MultitaskTags
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSet {
    Pos,
    Dep,
    Chunk,
    Ccg,
    Idle,
    None,
}

impl TagSet {
    pub const ALL: [TagSet; 6] = [
        TagSet::Pos,
        TagSet::Dep,
        TagSet::Chunk,
        TagSet::Ccg,
        TagSet::Idle,
        TagSet::None,
    ];

    pub fn kind(self) -> Option<TagKind> {
        match self {
            TagSet::Pos => Some(TagKind::Pos),
            TagSet::Dep => Some(TagKind::Dep),
            TagSet::Chunk => Some(TagKind::Chunk),
            TagSet::Ccg => Some(TagKind::Ccg),
            TagSet::Idle | TagSet::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TagSet::Pos => "pos",
            TagSet::Dep => "dep",
            TagSet::Chunk => "chunk",
            TagSet::Ccg => "ccg",
            TagSet::Idle => "idle",
            TagSet::None => "none",
        }
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TagSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TagSet::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tag set {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<(String, Role)>,
    index: HashMap<(Role, String), usize>,
}

impl Vocabulary {
    fn from_symbols(symbols: Vec<(String, Role)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (s, r)) in symbols.iter().enumerate() {
            if index.insert((*r, s.clone()), i).is_some() {
                return Err(Error::Data(format!("duplicate symbol {s:?} ({})", r.name())));
            }
        }
        for (i, (s, r)) in CONTROLS.iter().enumerate() {
            if symbols.get(i) != Some(&(s.to_string(), *r)) {
                return Err(Error::Data(format!("control {s} must have id {i}")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn surface(&self, id: usize) -> &str {
        self.symbols.get(id).map_or("<unk>", |(s, _)| s.as_str())
    }

    pub fn role(&self, id: usize) -> Role {
        self.symbols.get(id).map_or(Role::Control, |(_, r)| *r)
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.index
            .get(&(Role::Word, w.to_string()))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn tag_id(&self, t: &str) -> usize {
        self.index
            .get(&(Role::Tag, t.to_string()))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.role(i) == role).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (s, r)) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{i}\t{s}\t{}\n", r.name()));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("vocabulary line {}: malformed", n + 1));
            if cols.len() != 3 || cols[0].parse::<usize>().ok() != Some(n) {
                return Err(bad());
            }
            let role = match cols[2] {
                "WORD" => Role::Word,
                "TAG" => Role::Tag,
                "CONTROL" => Role::Control,
                _ => return Err(bad()),
            };
            symbols.push((cols[1].to_string(), role));
        }
        Self::from_symbols(symbols)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Controls, then sorted words, then sorted tags of the enabled tag sets.
pub fn build_vocabulary<'a>(
    references: impl IntoIterator<Item = &'a Reference>,
    tagsets: &[TagSet],
) -> Result<Vocabulary> {
    let mut words = BTreeSet::new();
    let mut tags = BTreeSet::new();
    let mut any = false;
    for r in references {
        any = true;
        words.extend(r.tokens.iter().cloned());
        for ts in tagsets {
            if let Some(k) = ts.kind() {
                tags.extend(r.tags.get(k).iter().cloned());
            }
        }
    }
    if !any {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut symbols: Vec<(String, Role)> =
        CONTROLS.iter().map(|(s, r)| (s.to_string(), *r)).collect();
    symbols.extend(words.into_iter().map(|w| (w, Role::Word)));
    symbols.extend(
        tags.into_iter()
            .filter(|t| t != "<idle>")
            .map(|t| (t, Role::Tag)),
    );
    Vocabulary::from_symbols(symbols)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSequence {
    pub ids: Vec<usize>,
    pub kind: SeqKind,
    pub tagset: TagSet,
}

/// Tags of a reference under a tag set (`<idle>` for the control set).
pub fn reference_tags(r: &Reference, tagset: TagSet) -> Option<Vec<String>> {
    match tagset {
        TagSet::Idle => Some(vec!["<idle>".to_string(); r.tokens.len()]),
        TagSet::None => None,
        t => Some(r.tags.get(t.kind().expect("gold tag set")).to_vec()),
    }
}

/// Encode tokens and aligned tags into the stream(s) of an approach.
pub fn encode(
    tokens: &[String],
    tags: Option<&[String]>,
    approach: Approach,
    tagset: TagSet,
    vocab: &Vocabulary,
) -> Result<Vec<PlannedSequence>> {
    let words: Vec<usize> = tokens.iter().map(|w| vocab.word_id(w)).collect();
    let tag_ids = || -> Result<Vec<usize>> {
        if tagset == TagSet::Idle {
            return Ok(vec![IDLE; tokens.len()]);
        }
        let tags = tags.ok_or_else(|| {
            Error::Config(format!("approach {approach} needs tags but tag set is {tagset}"))
        })?;
        if tags.len() != tokens.len() {
            return Err(Error::Alignment {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        Ok(tags.iter().map(|t| vocab.tag_id(t)).collect())
    };
    let seq = |kind: SeqKind, body: Vec<usize>| {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(kind.start());
        ids.extend(body);
        ids.push(EOS);
        PlannedSequence { ids, kind, tagset }
    };
    Ok(match approach {
        Approach::Standard => {
            if let Some(t) = tags {
                if t.len() != tokens.len() {
                    return Err(Error::Alignment {
                        tokens: tokens.len(),
                        tags: t.len(),
                    });
                }
            }
            vec![seq(SeqKind::Standard, words)]
        }
        Approach::Sequential => {
            let mut body = tag_ids()?;
            body.extend(words);
            vec![seq(SeqKind::Sequential, body)]
        }
        Approach::Interleave => {
            let t = tag_ids()?;
            let body = t.into_iter().zip(words).flat_map(|(t, w)| [t, w]).collect();
            vec![seq(SeqKind::Interleave, body)]
        }
        Approach::Multitask => {
            let t = tag_ids()?;
            vec![seq(SeqKind::MultitaskTags, t), seq(SeqKind::MultitaskWords, words)]
        }
    })
}

/// Word surfaces of a stream, in order.
pub fn strip(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&i| vocab.role(i) == Role::Word)
        .map(|&i| vocab.surface(i).to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedStream {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub wellformed: bool,
}

/// Split a generated stream by role and check it against the kind's grammar.
/// A leading start control is optional; the stream must end with `</s>`.
pub fn parse_generated(ids: &[usize], kind: SeqKind, vocab: &Vocabulary) -> ParsedStream {
    let tokens = strip(ids, vocab);
    let tags: Vec<String> = ids
        .iter()
        .filter(|&&i| vocab.role(i) == Role::Tag)
        .map(|&i| vocab.surface(i).to_string())
        .collect();
    let body = match ids.first() {
        Some(&s) if s == kind.start() => &ids[1..],
        _ => ids,
    };
    let wellformed = match body.split_last() {
        Some((&EOS, inner)) => {
            let roles: Vec<Role> = inner.iter().map(|&i| vocab.role(i)).collect();
            let n_w = roles.iter().filter(|&&r| r == Role::Word).count();
            let n_t = roles.iter().filter(|&&r| r == Role::Tag).count();
            let no_controls = n_w + n_t == roles.len();
            no_controls
                && match kind {
                    SeqKind::Standard | SeqKind::MultitaskWords => n_w >= 1 && n_t == 0,
                    SeqKind::MultitaskTags => n_t >= 1 && n_w == 0,
                    SeqKind::Sequential => {
                        n_w >= 1
                            && n_w == n_t
                            && roles[..n_t].iter().all(|&r| r == Role::Tag)
                    }
                    SeqKind::Interleave => {
                        n_w >= 1
                            && n_w == n_t
                            && roles
                                .chunks(2)
                                .all(|c| c == [Role::Tag, Role::Word])
                    }
                }
        }
        _ => false,
    };
    ParsedStream {
        tokens,
        tags,
        wellformed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{DepArc, Tags};

    fn reference(words: &[&str], pos: &[&str]) -> Reference {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Reference {
            tokens: s(words),
            tags: Tags {
                pos: s(pos),
                dep: vec!["x".into(); words.len()],
                chunk: vec!["O".into(); words.len()],
                ccg: vec!["N".into(); words.len()],
            },
            dep_arcs: vec![DepArc {
                head: None,
                dep: 0,
                rel: "root".into(),
            }],
            source_template: "test".into(),
        }
    }

    fn names(ids: &[usize], v: &Vocabulary) -> Vec<String> {
        ids.iter().map(|&i| v.surface(i).to_string()).collect()
    }

    #[test]
    fn vocabulary_layout() {
        let r = reference(&["a", "cat"], &["DET", "NOUN"]);
        let v = build_vocabulary([&r], &[TagSet::Pos]).unwrap();
        assert_eq!(v.len(), 7 + 2 + 2);
        assert_eq!(v.surface(IDLE), "<idle>");
        assert_eq!(v.role(IDLE), Role::Tag);
        assert_eq!(v.surface(7), "a");
        assert_eq!(v.role(v.tag_id("DET")), Role::Tag);
        assert_eq!(build_vocabulary([&r], &[TagSet::Pos]).unwrap(), v);
    }

    #[test]
    fn interleave_and_sequential_examples() {
        let r = reference(&["a", "black", "cat"], &["DET", "ADJ", "NOUN"]);
        let v = build_vocabulary([&r], &[TagSet::Pos]).unwrap();
        let enc = |a| encode(&r.tokens, Some(&r.tags.pos), a, TagSet::Pos, &v).unwrap();
        assert_eq!(
            names(&enc(Approach::Interleave)[0].ids, &v),
            ["<s>", "DET", "a", "ADJ", "black", "NOUN", "cat", "</s>"]
        );
        assert_eq!(
            names(&enc(Approach::Sequential)[0].ids, &v),
            ["<s>", "DET", "ADJ", "NOUN", "a", "black", "cat", "</s>"]
        );
        let mt = enc(Approach::Multitask);
        assert_eq!(names(&mt[0].ids, &v), ["<T>", "DET", "ADJ", "NOUN", "</s>"]);
        assert_eq!(names(&mt[1].ids, &v), ["<S>", "a", "black", "cat", "</s>"]);
        assert!(strip(&mt[0].ids, &v).is_empty());
        let idle = encode(&r.tokens, None, Approach::Interleave, TagSet::Idle, &v).unwrap();
        assert_eq!(
            names(&idle[0].ids, &v),
            ["<s>", "<idle>", "a", "<idle>", "black", "<idle>", "cat", "</s>"]
        );
    }

    #[test]
    fn misaligned_tags_rejected() {
        let r = reference(&["a", "cat"], &["DET", "NOUN"]);
        let v = build_vocabulary([&r], &[TagSet::Pos]).unwrap();
        let bad = vec!["DET".to_string()];
        assert!(matches!(
            encode(&r.tokens, Some(&bad), Approach::Interleave, TagSet::Pos, &v),
            Err(Error::Alignment { tokens: 2, tags: 1 })
        ));
    }

    #[test]
    fn malformed_interleave_detected() {
        let r = reference(&["a", "black", "cat"], &["DET", "ADJ", "NOUN"]);
        let v = build_vocabulary([&r], &[TagSet::Pos]).unwrap();
        let ids = vec![BOS, v.tag_id("DET"), v.tag_id("ADJ"), v.word_id("cat"), EOS];
        let p = parse_generated(&ids, SeqKind::Interleave, &v);
        assert!(!p.wellformed);
        assert_eq!(p.tokens, ["cat"]);
        // truncated stream
        let ids = vec![BOS, v.tag_id("DET"), v.word_id("a")];
        assert!(!parse_generated(&ids, SeqKind::Interleave, &v).wellformed);
        let ids = vec![v.tag_id("DET"), v.word_id("a"), EOS];
        assert!(parse_generated(&ids, SeqKind::Interleave, &v).wellformed);
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let r = reference(&["a", "cat"], &["DET", "NOUN"]);
        let v = build_vocabulary([&r], &[TagSet::Pos, TagSet::Ccg]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.write_tsv(&p).unwrap();
        assert_eq!(Vocabulary::read_tsv(&p).unwrap(), v);
    }
}
