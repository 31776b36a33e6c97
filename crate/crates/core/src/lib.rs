//! Ranking hyperparameter configurations for online learning under
//! distribution shift.

pub mod harness;
pub mod online;
pub mod predictors;
pub mod ranking;
pub mod scheduler;
pub mod stream;
pub mod trace;
