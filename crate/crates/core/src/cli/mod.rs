//! Configuration-driven scenario runner.

pub mod config;
pub mod presets;
pub mod scenarios;

pub use config::{parse_config, CoefficientSpec, FunctionSpec, Scenario, ScenarioConfig};
pub use presets::{preset, PRESETS};
pub use scenarios::{run_scenario, Report, SummaryLine};
