//! Simulation harness: scenario config, the tick runner, artifacts,
//! invariant checkers and experiments.

pub mod artifacts;
pub mod bus;
pub mod check;
pub mod config;
pub mod experiments;
pub mod oracle;
pub mod world;

pub use world::{run, World};
