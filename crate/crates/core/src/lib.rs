//! A desk-scale response-aware dialogue model.
//!
//! The crate trains a small decoder-only transformer on context/response
//! pairs with two additions on top of plain fine-tuning:
//!
//! * a two-stage scheduled sampling pass that rebuilds the response input
//!   from the model's own top-K predictions ([`sampling`]);
//! * a response-aware network and a context-only predictor of its output,
//!   merged into the context slot during training and used alone at
//!   generation time ([`response_aware`]).
//!
//! Everything runs on the in-crate [`tensor`] autodiff engine in `f64`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod response_aware;
pub mod sampling;
pub mod tensor;
pub mod train;
pub(crate) mod util;

pub use error::{RadError, Result};
pub use train::RadModel;
