//! Temporal-graph motion forecasting: scene handling, a reverse-mode
//! substrate, the encoder/decoder model, metrics and a synthetic data
//! generator.

pub mod context;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod scene;
pub mod temporal;

pub use error::{Error, Result};
pub use model::{ForecastOutput, Model, ModelConfig, PreparedScene, Toggles};
pub use scene::{NormalizedScene, Point2, RawScene};
