//! Generation-refinement answer and rationale generation for visual
//! questions, trained end to end on a synthetic grid world.
//!
//! The crate is self-contained: [`autodiff`] provides the tensors and
//! reverse-mode gradients, [`nn`] the building blocks, and
//! [`pipeline`] wires the four stacked attention LSTMs
//! (answer generator, rationale generator, answer refiner, rationale refiner).

pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
