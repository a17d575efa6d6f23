//! The model zoo: four weight-sharing schemes in encoder-only and
//! encoder-decoder modes, with exact accounting.

pub mod build;
pub mod config;
pub mod count;
pub mod forward;

pub use build::{build_model, enumerate_params, Model, ParamSpec};
pub use config::{Arch, Mode, ModelConfig, NormPlacement, VisionConfig};
pub use count::{
    count_flops, count_params, CountConvention, CountExclusion, FlopReport, ParamCountOptions,
    ParamCountReport,
};
pub use forward::{universal_level_transition, ForwardCtx, ForwardTrace, TokenBatch};
