//! Training and evaluation of small MLP classifier heads on precomputed
//! feature banks, with a CVaR tail-risk objective and sharpness-aware
//! parameter perturbation.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`feature_bank`]: labeled embedding banks — file formats, synthesis,
//!   batching.
//! - [`mlp`]: the 3-layer head (batch norm, ReLU, dropout) with exact
//!   reverse-mode gradients and checkpoint I/O.
//! - [`loss`]: per-sample cross-entropy / binary cross-entropy, the
//!   empirical CVaR objective and its λ search.
//! - [`optim`]: sign perturbation, Adam, cosine learning-rate annealing.
//! - [`trainer`]: the three-step iteration (solve λ, perturb, update)
//!   over epochs and minibatches, deterministic by seed.
//! - [`metrics`]: macro-F1 reports for multiclass and multilabel tasks.
//!
//! All in-memory numerics are `f64`; on-disk tensors are `f32` as defined
//! by the `FBNK` and `MLPC` formats (see the module docs).

pub mod feature_bank;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use feature_bank::{BatchPlan, FeatureBank, Labels, SyntheticSpec, TaskKind};
pub use loss::{CvarConfig, CvarSolution};
pub use metrics::{AbsentClasses, EvalReport};
pub use mlp::{Mlp, MlpConfig, MlpParams};
pub use optim::{AdamState, LrSchedule, SamConfig};
pub use trainer::{TrainConfig, TrainLog, Validation};
