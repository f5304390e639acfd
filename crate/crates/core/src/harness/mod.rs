//! Training, evaluation, prediction export, plotting, gradient checks and
//! ablations.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod plot;
pub mod train;

pub use config::TrainConfig;
pub use train::{train, RunRecord, TrainOptions, TrainOutcome};
