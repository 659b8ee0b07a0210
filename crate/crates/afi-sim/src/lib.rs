//! Desk-scale manipulation benchmark around the affordance-field recovery
//! stack: a kinematic world, a memorizing policy stand-in, closed-loop
//! episodes, and the suite/ablation harness behind the CLI.

pub mod builder;
pub mod emit;
pub mod episode;
pub mod policy;
pub mod scenario;
pub mod suite;
pub mod task;
pub mod world;

pub use episode::{run_episode, EpisodeRecord, Mode};
pub use scenario::{prepare, Prepared, ScenarioConfig};
