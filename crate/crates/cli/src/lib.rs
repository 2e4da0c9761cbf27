//! Config-driven experiment runner: simulate a world, train the exposure
//! simulators, train a recommender, evaluate it and tabulate runs.

pub mod config;
pub mod error;
pub mod run;

pub use config::{ExperimentConfig, MethodName, CONFIG_VERSION};
pub use error::{CliError, Result};
pub use run::{cmd_evaluate, cmd_report, cmd_simulate, cmd_train, cmd_train_exposure};
