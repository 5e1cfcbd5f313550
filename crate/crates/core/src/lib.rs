//! Mean-opinion-score prediction for synthetic speech.
//!
//! The crate consumes precomputed self-supervised frame features (`MOSF` files) together with
//! rating manifests, and provides:
//!
//! - [`dataset`]: manifest/feature IO, rating aggregation, exploration statistics, class weights
//! - [`batching`]: length-sorted mini-batch compilation and padding
//! - [`model`]: projection → 2×LSTM → SiLU dense → regression or 33-way classification head,
//!   with a hand-written backward pass
//! - [`training`]: SGD with momentum, triangular cyclical learning rate, gradient accumulation,
//!   the regression restart loop, three-phase classification transfer and fine-tuning
//! - [`postprocess`]: quantization, decoding, ensembling and range correction
//! - [`metrics`]: MSE / LCC / SRCC / KTAU at utterance and system level

pub mod batching;
pub mod dataset;
mod error;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
