#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Deep multiple quantization network for click-through-rate prediction
//! over long behavior sequences.

mod atomic;
pub mod autodiff;
pub mod bench;
pub mod cache;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod head;
pub mod hstu;
pub mod mcqm;
pub mod model;
pub mod params;
pub mod seed;
pub mod serving;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{InterestKind, Model, ModelConfig};
