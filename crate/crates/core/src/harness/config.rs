//! Experiment configuration: one TOML file resolves every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{Backend, BeamConfig, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::planner::{Approach, TagSet};
use crate::ranker::RankerConfig;
use crate::splits::{ConceptPair, Partition, SplitSpec, DEFAULT_HELDOUT};
use crate::world::{Lexicon, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub top_k: usize,
    pub length_normalize: bool,
    /// Re-rank the full beam with the ranker before keeping the top K.
    pub rerank: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 20,
            top_k: 5,
            length_normalize: false,
            rerank: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldConfig,
    pub world_seed: u64,
    pub scenes: usize,
    /// Held-out pair sets as "dependent noun" strings; `None` uses the four
    /// default sets, an empty list disables the gap.
    pub heldout_sets: Option<Vec<Vec<String>>>,
    /// Indices of the held-out sets that get their own split (and cells).
    pub active_sets: Vec<usize>,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    pub approaches: Vec<Approach>,
    pub tagsets: Vec<TagSet>,
    pub model: ModelConfig,
    pub ranker: Option<RankerConfig>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval_split: Partition,
    /// Cap on evaluated scenes (`None` = the whole split).
    pub eval_limit: Option<usize>,
    /// Images in the retrieval gallery (drawn from the evaluation split).
    pub retrieval_gallery: usize,
    /// Excluded from the content hash.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            world: WorldConfig::default(),
            world_seed: 1,
            scenes: 3000,
            heldout_sets: None,
            active_sets: vec![0, 1],
            split_ratios: (0.7, 0.1, 0.2),
            split_seed: 1,
            approaches: vec![Approach::Standard, Approach::Interleave],
            tagsets: vec![TagSet::Pos],
            model: ModelConfig::default(),
            ranker: None,
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval_split: Partition::Test,
            eval_limit: None,
            retrieval_gallery: 500,
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

/// One trained model: a held-out set, an approach with its tag set, a seed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub set: usize,
    pub approach: Approach,
    pub tagset: TagSet,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("set{}-{}-{}-seed{}", self.set, self.approach, self.tagset, self.seed)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Apply `dotted.key=value` overrides; values parse as TOML and fall
    /// back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for (i, part) in path.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}`: {part} is not a table")))?;
                if i + 1 == path.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The config as stored inside a run: everything but the output
    /// directory, so identical experiments write identical files.
    pub fn to_run_toml(&self) -> Result<String> {
        let mut t = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        t.remove("output_dir");
        toml::to_string(&t).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn heldout_pairs(&self, lex: &Lexicon) -> Result<Vec<Vec<ConceptPair>>> {
        match &self.heldout_sets {
            None => DEFAULT_HELDOUT
                .iter()
                .map(|set| set.iter().map(|p| ConceptPair::parse(p, lex)).collect())
                .collect(),
            Some(sets) => sets
                .iter()
                .map(|set| set.iter().map(|p| ConceptPair::parse(p, lex)).collect())
                .collect(),
        }
    }

    pub fn split_spec(&self, set: usize, lex: &Lexicon) -> Result<SplitSpec> {
        let spec = SplitSpec {
            heldout_sets: self.heldout_pairs(lex)?,
            active_set: set,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn beam_config(&self, approach: Approach) -> BeamConfig {
        BeamConfig {
            beam: self.decode.beam,
            max_len: self.train.max_len(approach),
            top_k: self.decode.top_k,
            length_normalize: self.decode.length_normalize,
        }
    }

    /// Sets that get cells; with the gap disabled there is a single set 0.
    pub fn sets(&self) -> Vec<usize> {
        if self.heldout_sets.as_ref().is_some_and(|s| s.is_empty()) {
            vec![0]
        } else {
            self.active_sets.clone()
        }
    }

    /// Every cell, in execution order. Approaches without tags run once per
    /// set and seed, under the `none` tag set.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for set in self.sets() {
            for &approach in &self.approaches {
                let tagsets: Vec<TagSet> = if approach.uses_tags() {
                    self.tagsets.iter().copied().filter(|t| *t != TagSet::None).collect()
                } else {
                    vec![TagSet::None]
                };
                for tagset in tagsets {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            set,
                            approach,
                            tagset,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let lex = Lexicon::default();
        self.world.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.ranker {
            r.validate()?;
        }
        if self.scenes == 0 {
            return Err(Error::Config("scenes must be positive".into()));
        }
        if self.approaches.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one approach and one seed".into()));
        }
        if self.approaches.iter().any(|a| a.uses_tags())
            && !self.tagsets.iter().any(|t| *t != TagSet::None)
        {
            return Err(Error::Config("tagged approaches need a tag set other than none".into()));
        }
        let sets = self.heldout_pairs(&lex)?;
        if !sets.is_empty() {
            if self.active_sets.is_empty() {
                return Err(Error::Config("active_sets is empty".into()));
            }
            for &s in &self.active_sets {
                self.split_spec(s, &lex)?;
            }
        }
        if self.eval_split == Partition::Train {
            return Err(Error::Config("evaluation on the training split is not supported".into()));
        }
        self.beam_config(Approach::Standard).validate()?;
        if self.decode.rerank && self.ranker.is_none() {
            return Err(Error::Config("rerank requires a ranker".into()));
        }
        if self.model.backend == Backend::Transformer
            && self.model.max_positions < self.train.max_len_tags.max(self.train.max_len_words) + 1
        {
            return Err(Error::Config("max_positions must exceed the longest decode".into()));
        }
        if self.eval_limit == Some(0) {
            return Err(Error::Config("eval_limit must be positive".into()));
        }
        Ok(())
    }
}
