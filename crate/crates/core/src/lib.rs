//! Task-aware greedy layer elimination for small decoder-only transformers.
//!
//! The crate bundles a dense f64 tensor library with reverse-mode autodiff,
//! a pre-norm transformer whose forward pass can skip any set of layers,
//! synthetic classification tasks, the greedy pruning search and its
//! selection metrics, linear-probe mutual-information estimates, a small
//! trainer and the on-disk formats used by the `tale` CLI.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod exec;
mod kv;
pub mod model;
pub mod ops;
pub mod optim;
pub mod persist;
pub mod probe;
pub mod report;
pub mod search;
pub mod select;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{LayerMask, ModelConfig, TransformerModel};
pub use search::{PruneTrajectory, TaleConfig, ThresholdMode};
pub use task::{TaskDataset, TaskKind, TaskSpec};
pub use tensor::Tensor;
