//! Caption grammar: a small phrase structure, its linearisation with gold
//! tags and dependency arcs, and the inverse parser used as the oracle tagger.

use serde::{Deserialize, Serialize};

use super::lexicon::{Lexicon, Transitivity};

/// The four gold tag inventories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    Pos,
    Dep,
    Chunk,
    Ccg,
}

impl TagKind {
    pub const ALL: [TagKind; 4] = [TagKind::Pos, TagKind::Dep, TagKind::Chunk, TagKind::Ccg];

    pub fn name(self) -> &'static str {
        match self {
            TagKind::Pos => "pos",
            TagKind::Dep => "dep",
            TagKind::Chunk => "chunk",
            TagKind::Ccg => "ccg",
        }
    }

    /// Every tag the grammar can emit for this inventory, sorted.
    pub fn inventory(self) -> Vec<&'static str> {
        let mut v: Vec<&'static str> = match self {
            TagKind::Pos => vec!["DET", "ADJ", "NOUN", "VERB", "AUX", "PRON", "ADP", "CCONJ"],
            TagKind::Dep => vec![
                "det", "amod", "root", "acl", "nsubj", "obj", "aux", "cop", "case", "nmod", "obl",
                "cc", "conj",
            ],
            TagKind::Chunk => vec!["B-NP", "I-NP", "B-VP", "I-VP", "B-PP", "B-ADJP", "O"],
            TagKind::Ccg => vec![
                CCG_DET, CCG_ADJ, CCG_NOUN, CCG_TV, CCG_IV, CCG_AUX, CCG_COP, CCG_PRED, CCG_REL,
                CCG_PREP_N, CCG_PREP_V, CCG_CONJ,
            ],
        };
        v.sort_unstable();
        v
    }
}

const CCG_DET: &str = "NP/N";
const CCG_ADJ: &str = "N/N";
const CCG_NOUN: &str = "N";
const CCG_TV: &str = "(S[ng]\\NP)/NP";
const CCG_IV: &str = "S[ng]\\NP";
const CCG_AUX: &str = "(S[dcl]\\NP)/(S[ng]\\NP)";
const CCG_COP: &str = "(S[dcl]\\NP)/(S[adj]\\NP)";
const CCG_PRED: &str = "S[adj]\\NP";
const CCG_REL: &str = "(NP\\NP)/(S[dcl]\\NP)";
const CCG_PREP_N: &str = "(NP\\NP)/NP";
const CCG_PREP_V: &str = "((S\\NP)\\(S\\NP))/NP";
const CCG_CONJ: &str = "conj";

/// Token-aligned gold tags for all four inventories.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tags {
    pub pos: Vec<String>,
    pub dep: Vec<String>,
    pub chunk: Vec<String>,
    pub ccg: Vec<String>,
}

impl Tags {
    pub fn get(&self, kind: TagKind) -> &[String] {
        match kind {
            TagKind::Pos => &self.pos,
            TagKind::Dep => &self.dep,
            TagKind::Chunk => &self.chunk,
            TagKind::Ccg => &self.ccg,
        }
    }

    fn push(&mut self, pos: &str, dep: &str, chunk: &str, ccg: &str) {
        self.pos.push(pos.into());
        self.dep.push(dep.into());
        self.chunk.push(chunk.into());
        self.ccg.push(ccg.into());
    }
}

/// A labelled dependency; `head == None` marks the root.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(Option<usize>, usize, String)", into = "(Option<usize>, usize, String)")]
pub struct DepArc {
    pub head: Option<usize>,
    pub dep: usize,
    pub rel: String,
}

impl From<(Option<usize>, usize, String)> for DepArc {
    fn from((head, dep, rel): (Option<usize>, usize, String)) -> Self {
        DepArc { head, dep, rel }
    }
}

impl From<DepArc> for (Option<usize>, usize, String) {
    fn from(a: DepArc) -> Self {
        (a.head, a.dep, a.rel)
    }
}

/// True when `arcs` form a single-rooted tree covering tokens `0..n`.
pub fn is_tree(arcs: &[DepArc], n: usize) -> bool {
    if arcs.len() != n || n == 0 {
        return false;
    }
    let mut head = vec![None; n];
    let mut seen = vec![false; n];
    let mut roots = 0;
    for a in arcs {
        if a.dep >= n || seen[a.dep] {
            return false;
        }
        seen[a.dep] = true;
        match a.head {
            None => roots += 1,
            Some(h) if h >= n || h == a.dep => return false,
            Some(h) => head[a.dep] = Some(h),
        }
    }
    if roots != 1 {
        return false;
    }
    // every token must reach the root within n steps
    (0..n).all(|start| {
        let mut cur = start;
        for _ in 0..=n {
            match head[cur] {
                None => return true,
                Some(h) => cur = h,
            }
        }
        false
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhrase {
    pub size: Option<String>,
    pub color: Option<String>,
    pub noun: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbPhrase {
    pub verb: String,
    pub object: Option<NounPhrase>,
}

/// How the subject's clause is realised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clause {
    /// `a N`
    Bare,
    /// `a N V-ing [a N]`
    Participial(VerbPhrase),
    /// `a N that is V-ing [a N]`
    Relative(VerbPhrase),
    /// `a N is V-ing [a N]`
    Finite(VerbPhrase),
    /// `a N [adjuncts] is COLOR`
    Copular(String),
}

impl Clause {
    pub fn name(&self) -> &'static str {
        match self {
            Clause::Bare => "bare",
            Clause::Participial(_) => "participial",
            Clause::Relative(_) => "relative",
            Clause::Finite(_) => "finite",
            Clause::Copular(_) => "copular",
        }
    }

    pub fn verb_phrase(&self) -> Option<&VerbPhrase> {
        match self {
            Clause::Participial(v) | Clause::Relative(v) | Clause::Finite(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Prep(String),
    And,
}

/// A further entity hung off the subject clause.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjunct {
    pub link: Link,
    pub np: NounPhrase,
    pub participle: Option<VerbPhrase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub subject: NounPhrase,
    pub clause: Clause,
    pub adjuncts: Vec<Adjunct>,
}

impl Sentence {
    pub fn template_id(&self) -> String {
        let mut id = self.clause.name().to_string();
        for a in &self.adjuncts {
            id.push_str(match (&a.link, &a.participle) {
                (Link::Prep(_), None) => "+pp",
                (Link::Prep(_), Some(_)) => "+pp-acl",
                (Link::And, None) => "+and",
                (Link::And, Some(_)) => "+and-acl",
            });
        }
        id
    }
}

/// Linearised sentence with gold annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotated {
    pub tokens: Vec<String>,
    pub tags: Tags,
    pub arcs: Vec<DepArc>,
}

struct Builder<'l> {
    lex: &'l Lexicon,
    tokens: Vec<String>,
    tags: Tags,
    heads: Vec<Option<usize>>,
}

impl<'l> Builder<'l> {
    fn push(&mut self, tok: &str, tags: [&str; 4], head: Option<usize>) -> usize {
        self.tokens.push(tok.to_string());
        self.tags.push(tags[0], tags[1], tags[2], tags[3]);
        self.heads.push(head);
        self.tokens.len() - 1
    }

    fn np(&mut self, np: &NounPhrase, role: &str, head: Option<usize>) -> usize {
        let det = self.push(&self.lex.determiners[0].clone(), ["DET", "det", "B-NP", CCG_DET], None);
        let mut mods = vec![det];
        for adj in [&np.size, &np.color].into_iter().flatten() {
            mods.push(self.push(adj, ["ADJ", "amod", "I-NP", CCG_ADJ], None));
        }
        let n = self.push(&np.noun, ["NOUN", role, "I-NP", CCG_NOUN], head);
        for m in mods {
            self.heads[m] = Some(n);
        }
        n
    }

    fn verb_ccg(vp: &VerbPhrase) -> &'static str {
        if vp.object.is_some() {
            CCG_TV
        } else {
            CCG_IV
        }
    }

    fn ing(&self, verb: &str) -> String {
        self.lex
            .verb(verb)
            .map_or_else(|| verb.to_string(), |v| v.ing.clone())
    }

    fn verb(&mut self, vp: &VerbPhrase, dep: &str, chunk: &str, head: Option<usize>) -> usize {
        let form = self.ing(&vp.verb);
        let v = self.push(&form, ["VERB", dep, chunk, Self::verb_ccg(vp)], head);
        if let Some(obj) = &vp.object {
            self.np(obj, "obj", Some(v));
        }
        v
    }

    fn adjunct(&mut self, a: &Adjunct, subj: usize, verb: Option<usize>) {
        match &a.link {
            Link::Prep(p) => {
                let (ccg, role, head) = match verb {
                    Some(v) => (CCG_PREP_V, "obl", v),
                    None => (CCG_PREP_N, "nmod", subj),
                };
                let case = self.push(p, ["ADP", "case", "B-PP", ccg], None);
                let n = self.np(&a.np, role, Some(head));
                self.heads[case] = Some(n);
                if let Some(vp) = &a.participle {
                    self.verb(vp, "acl", "B-VP", Some(n));
                }
            }
            Link::And => {
                let conj = self.lex.conjunction.clone();
                let cc = self.push(&conj, ["CCONJ", "cc", "O", CCG_CONJ], None);
                let n = self.np(&a.np, "conj", Some(subj));
                self.heads[cc] = Some(n);
                if let Some(vp) = &a.participle {
                    self.verb(vp, "acl", "B-VP", Some(n));
                }
            }
        }
    }
}

/// Linearise a sentence, producing tokens, all tag lists and the arc set.
pub fn annotate(s: &Sentence, lex: &Lexicon) -> Annotated {
    let mut b = Builder {
        lex,
        tokens: Vec::new(),
        tags: Tags::default(),
        heads: Vec::new(),
    };
    let subj_role = match s.clause {
        Clause::Finite(_) | Clause::Copular(_) => "nsubj",
        _ => "root",
    };
    let subj = b.np(&s.subject, subj_role, None);
    let copula = lex.copulas[0].clone();
    let verb = match &s.clause {
        Clause::Bare => None,
        Clause::Participial(vp) => Some(b.verb(vp, "acl", "B-VP", Some(subj))),
        Clause::Relative(vp) => {
            let rel = lex.relativizer.clone();
            let that = b.push(&rel, ["PRON", "nsubj", "B-NP", CCG_REL], None);
            let aux = b.push(&copula, ["AUX", "aux", "B-VP", CCG_AUX], None);
            let v = b.verb(vp, "acl", "I-VP", Some(subj));
            b.heads[that] = Some(v);
            b.heads[aux] = Some(v);
            Some(v)
        }
        Clause::Finite(vp) => {
            let aux = b.push(&copula, ["AUX", "aux", "B-VP", CCG_AUX], None);
            let v = b.verb(vp, "root", "I-VP", None);
            b.heads[aux] = Some(v);
            b.heads[subj] = Some(v);
            Some(v)
        }
        Clause::Copular(_) => None,
    };
    for a in &s.adjuncts {
        b.adjunct(a, subj, verb);
    }
    if let Clause::Copular(color) = &s.clause {
        let cop = b.push(&copula, ["AUX", "cop", "B-VP", CCG_COP], None);
        let pred = b.push(color, ["ADJ", "root", "B-ADJP", CCG_PRED], None);
        b.heads[cop] = Some(pred);
        b.heads[subj] = Some(pred);
    }
    let arcs = b
        .heads
        .iter()
        .enumerate()
        .map(|(i, &h)| DepArc {
            head: h,
            dep: i,
            rel: b.tags.dep[i].clone(),
        })
        .collect();
    Annotated {
        tokens: b.tokens,
        tags: b.tags,
        arcs,
    }
}

struct Parser<'a> {
    lex: &'a Lexicon,
    toks: &'a [String],
    i: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.i).map(String::as_str)
    }

    fn peek_at(&self, k: usize) -> Option<&'a str> {
        self.toks.get(self.i + k).map(String::as_str)
    }

    fn np(&mut self) -> Option<NounPhrase> {
        if !self.lex.is_determiner(self.peek()?) {
            return None;
        }
        self.i += 1;
        let mut size = None;
        let mut color = None;
        if let Some(t) = self.peek().filter(|t| self.lex.is_size(t)) {
            size = Some(t.to_string());
            self.i += 1;
        }
        if let Some(t) = self.peek().filter(|t| self.lex.is_color(t)) {
            color = Some(t.to_string());
            self.i += 1;
        }
        let noun = self.peek().filter(|t| self.lex.is_noun(t))?;
        self.i += 1;
        Some(NounPhrase {
            size,
            color,
            noun: noun.to_string(),
        })
    }

    fn vp(&mut self) -> Option<VerbPhrase> {
        let verb = self.lex.verb_by_ing(self.peek()?)?;
        self.i += 1;
        let object = if verb.transitivity == Transitivity::Transitive
            || self.peek().is_some_and(|t| self.lex.is_determiner(t))
        {
            Some(self.np()?)
        } else {
            None
        };
        Some(VerbPhrase {
            verb: verb.lemma.clone(),
            object,
        })
    }

    fn adjunct(&mut self) -> Option<Adjunct> {
        let t = self.peek()?;
        let link = if self.lex.is_preposition(t) {
            Link::Prep(t.to_string())
        } else if t == self.lex.conjunction {
            Link::And
        } else {
            return None;
        };
        self.i += 1;
        let np = self.np()?;
        let participle = match self.peek() {
            Some(t) if self.lex.verb_by_ing(t).is_some() => Some(self.vp()?),
            _ => None,
        };
        Some(Adjunct {
            link,
            np,
            participle,
        })
    }

    fn sentence(&mut self) -> Option<Sentence> {
        let subject = self.np()?;
        let mut clause = match self.peek() {
            Some(t) if t == self.lex.relativizer => {
                self.i += 1;
                if !self.lex.is_copula(self.peek()?) {
                    return None;
                }
                self.i += 1;
                Clause::Relative(self.vp()?)
            }
            Some(t)
                if self.lex.is_copula(t)
                    && self.peek_at(1).is_some_and(|n| self.lex.verb_by_ing(n).is_some()) =>
            {
                self.i += 1;
                Clause::Finite(self.vp()?)
            }
            Some(t) if self.lex.verb_by_ing(t).is_some() => Clause::Participial(self.vp()?),
            _ => Clause::Bare,
        };
        let mut adjuncts = Vec::new();
        while let Some(t) = self.peek() {
            if clause == Clause::Bare && self.lex.is_copula(t) {
                let color = self.peek_at(1).filter(|c| self.lex.is_color(c))?;
                if subject.color.is_some() {
                    return None;
                }
                self.i += 2;
                clause = Clause::Copular(color.to_string());
                break;
            }
            adjuncts.push(self.adjunct()?);
        }
        if self.i != self.toks.len() {
            return None;
        }
        Some(Sentence {
            subject,
            clause,
            adjuncts,
        })
    }
}

/// Recover the phrase structure of a token sequence, if it is grammatical.
pub fn parse(tokens: &[String], lex: &Lexicon) -> Option<Sentence> {
    let mut p = Parser {
        lex,
        toks: tokens,
        i: 0,
    };
    let s = p.sentence()?;
    // only accept what `annotate` reproduces exactly
    (annotate(&s, lex).tokens == tokens).then_some(s)
}

/// Deterministic tagger: the exact parse when the tokens are grammatical,
/// otherwise local lexical rules.
pub fn oracle_tags(tokens: &[String], lex: &Lexicon) -> Tags {
    if let Some(s) = parse(tokens, lex) {
        return annotate(&s, lex).tags;
    }
    heuristic_tags(tokens, lex)
}

fn heuristic_tags(tokens: &[String], lex: &Lexicon) -> Tags {
    let mut tags = Tags::default();
    let n = tokens.len();
    let at = |i: usize| tokens.get(i).map(String::as_str);
    let mut seen_verb = false;
    for i in 0..n {
        let t = tokens[i].as_str();
        let prev = if i > 0 { at(i - 1) } else { None };
        let next = at(i + 1);
        let row: [&str; 4] = if lex.is_determiner(t) {
            ["DET", "det", "B-NP", CCG_DET]
        } else if lex.is_adjective(t) {
            if next.is_some_and(|x| lex.is_noun(x) || lex.is_adjective(x)) {
                ["ADJ", "amod", "I-NP", CCG_ADJ]
            } else {
                ["ADJ", "root", "B-ADJP", CCG_PRED]
            }
        } else if lex.is_noun(t) {
            let role = if i + 1 < n && at(i + 1).is_some_and(|x| lex.is_copula(x)) {
                "nsubj"
            } else if prev.is_some_and(|p| lex.verb_by_ing(p).is_some())
                || (i >= 2 && at(i - 2).is_some_and(|p| lex.verb_by_ing(p).is_some()))
            {
                "obj"
            } else if tokens[..i].iter().any(|x| x == &lex.conjunction) {
                "conj"
            } else if tokens[..i].iter().any(|x| lex.is_preposition(x)) {
                if seen_verb {
                    "obl"
                } else {
                    "nmod"
                }
            } else {
                "root"
            };
            ["NOUN", role, "I-NP", CCG_NOUN]
        } else if let Some(v) = lex.verb_by_ing(t) {
            seen_verb = true;
            let ccg = if next.is_some_and(|x| lex.is_determiner(x))
                || v.transitivity == Transitivity::Transitive && next.is_none()
            {
                CCG_TV
            } else {
                CCG_IV
            };
            if prev.is_some_and(|p| lex.is_copula(p)) {
                let relative = i >= 2 && at(i - 2) == Some(lex.relativizer.as_str());
                ["VERB", if relative { "acl" } else { "root" }, "I-VP", ccg]
            } else {
                ["VERB", "acl", "B-VP", ccg]
            }
        } else if lex.is_copula(t) {
            if next.is_some_and(|x| lex.is_adjective(x)) {
                ["AUX", "cop", "B-VP", CCG_COP]
            } else {
                ["AUX", "aux", "B-VP", CCG_AUX]
            }
        } else if lex.is_preposition(t) {
            if seen_verb {
                ["ADP", "case", "B-PP", CCG_PREP_V]
            } else {
                ["ADP", "case", "B-PP", CCG_PREP_N]
            }
        } else if t == lex.relativizer {
            ["PRON", "nsubj", "B-NP", CCG_REL]
        } else if t == lex.conjunction {
            ["CCONJ", "cc", "O", CCG_CONJ]
        } else {
            ["X", "dep", "O", "X"]
        };
        tags.push(row[0], row[1], row[2], row[3]);
    }
    tags
}

/// Rule-based arcs for arbitrary (possibly generated) token sequences. Only
/// the relations the pair matcher needs are produced:
///
/// - `amod`: an adjective run directly followed by a noun;
/// - `acl`: `N V-ing` and `N that is V-ing`;
/// - `nsubj`: `N is V-ing`.
pub fn rule_arcs(tokens: &[String], lex: &Lexicon) -> Vec<DepArc> {
    let mut arcs = Vec::new();
    let n = tokens.len();
    let is_noun = |i: usize| lex.is_noun(&tokens[i]);
    for i in 0..n {
        let t = tokens[i].as_str();
        if lex.is_adjective(t) {
            let mut j = i + 1;
            while j < n && lex.is_adjective(&tokens[j]) {
                j += 1;
            }
            if j < n && is_noun(j) {
                arcs.push(DepArc {
                    head: Some(j),
                    dep: i,
                    rel: "amod".into(),
                });
            }
        } else if lex.verb_by_ing(t).is_some() {
            if i >= 1 && is_noun(i - 1) {
                arcs.push(DepArc {
                    head: Some(i - 1),
                    dep: i,
                    rel: "acl".into(),
                });
            } else if i >= 2 && lex.is_copula(&tokens[i - 1]) {
                if is_noun(i - 2) {
                    arcs.push(DepArc {
                        head: Some(i),
                        dep: i - 2,
                        rel: "nsubj".into(),
                    });
                } else if i >= 3 && tokens[i - 2] == lex.relativizer && is_noun(i - 3) {
                    arcs.push(DepArc {
                        head: Some(i - 3),
                        dep: i,
                        rel: "acl".into(),
                    });
                }
            }
        }
    }
    arcs
}
