//! Privacy-preserving peer-to-peer energy trading for microgrids: assets,
//! transactions and a replicated ledger, smart meters, a mixing service,
//! an anonymous order board, the grid operator, scripted prosumers and a
//! deterministic simulator with invariant checkers.

pub mod agents;
pub mod board;
pub mod codec;
pub mod crypto;
pub mod dso;
pub mod fixed;
pub mod ledger;
pub mod meter;
pub mod mixing;
pub mod profile;
pub mod sim;
pub mod transactions;
pub mod types;
