//! Multi-turn reading comprehension: autodiff engine, text pipeline,
//! co-attention encoder, recurrent reasoner with stochastic termination,
//! training loop, evaluation metrics, and a trigram passage ranker.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod reasoner;
pub mod synth;
pub mod metrics;
pub mod ranker;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Value};
pub use tensor::{Scalar, Tensor};
