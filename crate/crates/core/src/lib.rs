//! Randomized-smoothing certification with noise-aware prompt learning for a
//! zero-shot classification head.

pub mod container;
pub mod error;
pub mod extproto;
pub mod harness;
pub mod linalg;
pub mod promptlearn;
pub mod seed;
pub mod smoothing;
pub mod stats;
pub mod toymodel;
pub mod vlmhead;

pub use error::{ClassifierError, Error, Result};
