//! Scenario configuration, experiment runners and policy self-checks used
//! by the command-line front end.

pub mod config;
pub mod figures;
pub mod scenario;
pub mod validate;

pub use config::{ConfigError, FieldError, ScenarioConfig, VictimKind};
pub use figures::{emit_figure_data, FigureKind};
pub use scenario::{run_scenario, ScenarioError, Summary};
pub use validate::{validate_policies, SuiteResult, ValidationReport};
