//! Dense tensors, a reverse-mode tape, Adam, and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{AttentionMask, Backward, Graph, Var};
pub use layers::{attend_projected, attention, lstm_cell, softmax_xent, AttentionParams, LstmParams};
pub use optim::{AdamConfig, Gradients, Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
