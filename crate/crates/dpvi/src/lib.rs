//! File formats, experiment runner and command-line front end for the
//! `dpvi-core` solvers.

pub mod experiment;
pub mod io;
pub mod parallel;
pub mod policy;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, NSummary, ResultRow};
pub use policy::{build_config, PolicyName};
