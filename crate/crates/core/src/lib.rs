//! Synthetic compositional-captioning testbed with syntactic sentence planning.

pub mod captioner;
pub mod error;
pub mod harness;
pub mod eval;
pub mod numerics;
pub mod planner;
pub mod ranker;
pub mod splits;
pub mod world;

pub use error::{Error, Result};

// Shared vocabulary of the cli and bench crates.
pub use captioner::{Backend, Captioner, ModelConfig, TrainConfig};
pub use eval::MetricsReport;
pub use harness::{ExperimentConfig, Report};
pub use planner::{Approach, SeqKind, TagSet, Vocabulary};
pub use ranker::{Pooling, RankerConfig};
pub use splits::{ConceptPair, Partition, SplitSpec};
pub use world::{CorpusRecord, Lexicon, WorldConfig};
