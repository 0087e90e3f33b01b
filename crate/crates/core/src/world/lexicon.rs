use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Animacy {
    Animate,
    Inanimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transitivity {
    Transitive,
    Intransitive,
}

/// Word class of a lemma, as far as the grammar cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordClass {
    Noun,
    Color,
    Size,
    Verb,
    Function,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verb {
    pub lemma: String,
    pub transitivity: Transitivity,
    /// Progressive form, e.g. `lie -> lying`.
    pub ing: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub nouns: Vec<(String, Animacy)>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub verbs: Vec<Verb>,
    pub determiners: Vec<String>,
    pub prepositions: Vec<String>,
    pub copulas: Vec<String>,
    pub relativizer: String,
    pub conjunction: String,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        use Animacy::*;
        use Transitivity::*;
        let nouns = [
            ("cat", Animate),
            ("dog", Animate),
            ("bird", Animate),
            ("horse", Animate),
            ("man", Animate),
            ("woman", Animate),
            ("child", Animate),
            ("bus", Inanimate),
            ("truck", Inanimate),
            ("plane", Inanimate),
            ("boat", Inanimate),
            ("table", Inanimate),
        ];
        let verbs = [
            ("eat", Transitive, "eating"),
            ("hold", Transitive, "holding"),
            ("ride", Transitive, "riding"),
            ("stand", Intransitive, "standing"),
            ("lie", Intransitive, "lying"),
            ("fly", Intransitive, "flying"),
        ];
        Lexicon {
            nouns: nouns.iter().map(|&(n, a)| (n.to_string(), a)).collect(),
            colors: strings(&["black", "white", "brown", "red", "blue"]),
            sizes: strings(&["big", "small"]),
            verbs: verbs
                .iter()
                .map(|&(l, t, ing)| Verb {
                    lemma: l.into(),
                    transitivity: t,
                    ing: ing.into(),
                })
                .collect(),
            determiners: strings(&["a"]),
            prepositions: strings(&["on", "near", "beside", "behind"]),
            copulas: strings(&["is"]),
            relativizer: "that".into(),
            conjunction: "and".into(),
        }
    }
}

impl Lexicon {
    /// Lower-case, non-empty classes, no lemma in two classes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut all: Vec<&str> = Vec::new();
        all.extend(self.nouns.iter().map(|(n, _)| n.as_str()));
        all.extend(self.colors.iter().map(String::as_str));
        all.extend(self.sizes.iter().map(String::as_str));
        all.extend(self.verbs.iter().map(|v| v.lemma.as_str()));
        all.extend(self.verbs.iter().map(|v| v.ing.as_str()));
        all.extend(self.determiners.iter().map(String::as_str));
        all.extend(self.prepositions.iter().map(String::as_str));
        all.extend(self.copulas.iter().map(String::as_str));
        all.push(&self.relativizer);
        all.push(&self.conjunction);
        for w in all {
            if w.is_empty() || w.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::Config(format!("bad lexicon entry {w:?}")));
            }
            if !seen.insert(w) {
                return Err(Error::Config(format!("lemma {w:?} appears twice")));
            }
        }
        let empty = [
            ("nouns", self.nouns.is_empty()),
            ("colors", self.colors.is_empty()),
            ("sizes", self.sizes.is_empty()),
            ("verbs", self.verbs.is_empty()),
            ("determiners", self.determiners.is_empty()),
            ("prepositions", self.prepositions.is_empty()),
            ("copulas", self.copulas.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("lexicon class {name} is empty")));
        }
        Ok(())
    }

    pub fn animacy(&self, noun: &str) -> Option<Animacy> {
        self.nouns.iter().find(|(n, _)| n == noun).map(|(_, a)| *a)
    }

    pub fn verb(&self, lemma: &str) -> Option<&Verb> {
        self.verbs.iter().find(|v| v.lemma == lemma)
    }

    pub fn verb_by_ing(&self, form: &str) -> Option<&Verb> {
        self.verbs.iter().find(|v| v.ing == form)
    }

    pub fn is_noun(&self, w: &str) -> bool {
        self.nouns.iter().any(|(n, _)| n == w)
    }

    pub fn is_color(&self, w: &str) -> bool {
        self.colors.iter().any(|c| c == w)
    }

    pub fn is_size(&self, w: &str) -> bool {
        self.sizes.iter().any(|c| c == w)
    }

    pub fn is_adjective(&self, w: &str) -> bool {
        self.is_color(w) || self.is_size(w)
    }

    pub fn is_determiner(&self, w: &str) -> bool {
        self.determiners.iter().any(|c| c == w)
    }

    pub fn is_preposition(&self, w: &str) -> bool {
        self.prepositions.iter().any(|c| c == w)
    }

    pub fn is_copula(&self, w: &str) -> bool {
        self.copulas.iter().any(|c| c == w)
    }

    /// Lemma of a surface token via the fixed inflection table.
    pub fn lemma<'a>(&'a self, token: &'a str) -> &'a str {
        self.verb_by_ing(token).map_or(token, |v| v.lemma.as_str())
    }

    pub fn class_of(&self, lemma: &str) -> WordClass {
        if self.is_noun(lemma) {
            WordClass::Noun
        } else if self.is_color(lemma) {
            WordClass::Color
        } else if self.is_size(lemma) {
            WordClass::Size
        } else if self.verb(lemma).is_some() {
            WordClass::Verb
        } else {
            WordClass::Function
        }
    }

    pub fn noun_index(&self, noun: &str) -> Option<usize> {
        self.nouns.iter().position(|(n, _)| n == noun)
    }

    pub fn color_index(&self, c: &str) -> Option<usize> {
        self.colors.iter().position(|x| x == c)
    }

    pub fn size_index(&self, s: &str) -> Option<usize> {
        self.sizes.iter().position(|x| x == s)
    }

    pub fn verb_index(&self, v: &str) -> Option<usize> {
        self.verbs.iter().position(|x| x.lemma == v)
    }

    /// Width of a feature row: one-hot blocks for category, color, size, action.
    pub fn feature_width(&self) -> usize {
        self.nouns.len() + self.colors.len() + self.sizes.len() + self.verbs.len()
    }
}
