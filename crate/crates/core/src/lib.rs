//! Many-in-one decoder-only transformers.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod par;
pub mod tensor;
pub mod tournament;
pub mod training;

pub use error::{Error, Result};
