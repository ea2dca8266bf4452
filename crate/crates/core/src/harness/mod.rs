//! Configuration, seeding, metrics and experiment presets.

pub mod config;
pub mod metrics;
pub mod presets;
pub mod run;
pub mod seeds;

pub use config::{DataConfig, EvalConfig, EvalSplit, ExperimentConfig, Subcommand, DATA_DIR_ENV};
pub use presets::{preset, PRESETS};
pub use run::{execute, execute_with, load_splits, obtain_teacher, RunOutput, Splits};
pub use seeds::{derive_seed, seed_streams, stream};
