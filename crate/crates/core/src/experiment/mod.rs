//! End-to-end experiments: configuration, the cached two-stage pipeline,
//! alpha sweeps, and their plots.

mod config;
mod pipeline;
mod plot;

pub use config::{
    ExperimentConfig, ModelSection, RegularizationSection, TrainSection, DEFAULT_ALPHA, DEFAULT_STAGE1_EPOCHS,
    DEFAULT_STAGE2_LR,
};
pub use pipeline::{
    generate_data, params_hash, prepare, prepare_from, run_name, run_pipeline, run_variant, sweep_alpha, ExperimentDir, Prepared,
    Summary, SweepReport, SweepRow,
};
pub use plot::sweep_svg;
