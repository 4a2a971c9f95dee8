//! Two-stage optimization: NLL fitting, then the regularized objective on
//! counterfactual samples, plus the end-to-end experiment pipeline.

mod optim;
mod train;

pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use train::{
    continue_nll, read_trace, train_stage1, train_stage2, write_trace, TraceRecord, TrainConfig, TrainOutcome,
};
