//! Command-line harness for protected convolution networks: model and
//! weight loading, the baseline, protected, campaign and profile modes,
//! and report emission.

pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod weights;

pub use config::{ElementType, LayerConfig, ModelConfig};
pub use error::{CliError, Result};
pub use report::{Mode, Report};
pub use run::{generate_corpus, init_weights, load_plans, run, RunArgs};
