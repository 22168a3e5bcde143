//! Scenario runner, artifact writer and test tooling for the sharing pipeline.

pub mod gen;
pub mod lint;
pub mod mutations;
pub mod plot;
pub mod runner;
pub mod scenario;
