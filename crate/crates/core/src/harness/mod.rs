//! Experiment harness: declarative arms, a caching runner, comparison reports,
//! SVG plots and the desk-scale presets.

pub mod experiment;
pub mod plot;
pub mod preset;
pub mod report;
pub mod runner;

pub use experiment::{ArmSpec, Check, ExperimentSpec, Metric, Rule};
pub use preset::{preset, root_seed, PRESETS};
pub use report::{build_report, ArmSummary, CheckResult, ComparisonReport};
pub use runner::{load_report, write_outputs, write_plots, ArmResult, ExperimentResult, Runner};
