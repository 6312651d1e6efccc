//! Deterministic scenario engine, simulated clock and cost accounting,
//! metrics and report artifacts.

pub mod clock;
pub mod engine;
pub mod game;
pub mod report;
pub mod scenario;

pub use clock::{time_table, CostMode, CostModel, Event, SimClock, Step, TimeRow};
pub use engine::{run_scenario, MetricsLog, RoundMetrics, SimError, SimOutput, UnlearnEvent, UnlearnStatus};
pub use game::{run_game, GameConfig, GameReport};
pub use report::emit_report;
pub use scenario::{derive_seed, DatasetSpec, OrgSpec, Scenario, ScenarioError};
