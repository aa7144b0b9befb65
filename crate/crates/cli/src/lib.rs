//! Command implementations behind the `satad` executable.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_bench, cmd_detect, cmd_eval, cmd_synth, cmd_train, BenchReport, DetectOutcome,
    TrainOutcome, TARGET_STEPS_PER_SECOND,
};
pub use config::{BaselineInput, Method, RunConfig};
