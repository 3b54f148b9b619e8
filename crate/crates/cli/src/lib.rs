//! Experiment runner behind the `mvpg` binary: TOML run configs, per-seed CSV
//! logs with a JSONL manifest, summaries of finished runs, and the
//! verification suites.

pub mod config;
pub mod error;
pub mod run;
pub mod summary;

pub use config::{ResolvedRun, RunConfig};
pub use error::CliError;
pub use run::{output_root, run_config_file, run_experiment, RunReport};
pub use summary::{summarize_dir, Summary};
