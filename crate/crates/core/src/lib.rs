//! Recurrent shared-block Transformers with low-rank level signals.
//!
//! A single Transformer block applied in a ring — the same weights at every
//! depth — with per-level, input-dependent low-rank signals injected into
//! the attention projections and the feedforward input, per-level layer
//! norms, and the usual baselines (vanilla stack, static-signal recurrence,
//! one-wide-FFN) for comparison. The crate bundles:
//!
//! * a deterministic f32/f64 tensor kernel with reverse-mode autodiff,
//! * the model zoo with exact parameter and FLOP accounting,
//! * representation-similarity (linear CKA) and mean-attention-distance
//!   analyses over captured forward traces,
//! * a desk-scale training harness (synthetic tasks, Adam + warmup/cosine,
//!   BLEU, binary checkpoints).

pub mod analysis;
pub mod autograd;
pub mod bleu;
pub mod checkpoint;
pub mod error;
pub mod fd;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod signal;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{
    build_model, count_flops, count_params, enumerate_params, Arch, CountConvention,
    CountExclusion, FlopReport, ForwardCtx, ForwardTrace, Mode, Model, ModelConfig,
    NormPlacement, ParamCountOptions, TokenBatch, VisionConfig,
};
pub use params::{ParamGroup, ParamId, ParamRole, ParamStore, Parameter};
pub use rng::Rng;
pub use signal::{LevelSignalSet, LowRankFactorPair, RankPolicy, SignalVariant, StackMode};
pub use tensor::{DType, Scalar, Tensor};
