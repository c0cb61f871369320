//! Lightweight convolutional models for extractive question answering.

pub mod error;
pub mod tensor;
pub mod text;
pub mod layers;
pub mod attention;
pub mod span;
pub mod model;
pub mod eval;
pub mod training;

pub use error::{Error, Result};
