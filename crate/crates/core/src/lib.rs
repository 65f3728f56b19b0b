//! Sliced-SVD low-rank adapters and spectral forgetting analysis.
//!
//! An adapter trains the singular components `[s, s + r)` of a pretrained
//! weight and freezes the rest. `s = 0` is PiSSA, `s = k − r` is MiLoRA. The
//! crate also carries the tools to measure what fine-tuning a window does to a
//! previously learned task: a small MLP trainer, forgetting metrics, the
//! projection of fine-tuned weights into the pretrained singular basis, and a
//! seeded two-task sweep harness.

pub mod adapter;
pub mod data;
pub mod error;
pub mod io;
pub mod matrix;
pub mod rng;
pub mod spectral;
pub mod svd;
pub mod sweep;
pub mod train;

pub use adapter::{
    adapter_forward, init_slice_adapter, merge, milora_init, pissa_init, AdapterManifest,
    AdapterState, SliceSpec,
};
pub use data::{load_idx, make_task_pair, TaskPair, TaskPairConfig};
pub use error::{Error, Result};
pub use io::{read_matrix, write_matrix};
pub use matrix::{frobenius_norm, matmul, relative_frobenius_error, row_l2_norms, transpose, DenseMatrix};
pub use spectral::{
    component_importance, feature_space_delta, param_space_delta, weighted_summary,
    ImportanceProfile, Space, SpectralDelta,
};
pub use svd::{reconstruct, svd, SvdFactorization};
pub use sweep::{analyze_checkpoints, run_sweep, ushape_report, SweepConfig, SweepRow, UShapeReport};
pub use train::{
    attach_and_finetune, evaluate, forgetting_abs, forgetting_soft_ce, pretrain, Activation,
    LabeledDataset, Loss, Model, ModelSpec, OptimizerKind, SoftCe, TrainConfig,
};
