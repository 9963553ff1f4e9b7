//! Process-rubric assessment bot: checks student repositories against a
//! phased rubric, keeps one progress issue per repository up to date, and
//! mines repository history for group comparisons.

pub mod analyzer;
mod exec;
pub mod forge;
pub mod git;
pub mod miner;
pub mod orchestrator;
pub mod renderer;
pub mod roster;
pub mod rubric;
pub mod stats;
