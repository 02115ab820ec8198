//! Deterministic discrete-event simulator.

pub mod audit;
pub mod config;
pub mod events;
pub mod metrics;
pub mod output;
pub mod replay;
pub mod world;

pub use audit::{audit, Invariant, Violation};
pub use config::{builtin, builtin_with, AdversarySpec, ConfigError, ScenarioConfig, BUILTIN_SCENARIOS};
pub use events::{Event, EventKind};
pub use metrics::{derive, MetricsReport};
pub use output::{check_world, run, write_outputs, Checks, RunOutcome, RunReport};
pub use replay::StateProjection;
pub use world::{Actor, Behavior, SimError, World};
