//! Command-line driver for soaheap scenarios: configuration, defrag
//! policies, and metrics output.

pub mod config;
pub mod curve;
pub mod error;
pub mod metrics;
pub mod runner;

pub use config::{AppKind, Overrides, Policy, ScenarioConfig};
pub use curve::{fragmentation_curve, fragmentation_curve_file, Curve};
pub use error::HarnessError;
pub use metrics::{Row, Summary};
pub use runner::{run, write_output, RunOutput};
