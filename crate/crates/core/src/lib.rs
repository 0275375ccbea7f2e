//! Iterative amortized grouping: a denoising network that splits its input
//! into K groups, each with its own reconstruction and assignment mask, and
//! refines both over a fixed number of unrolled iterations.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod ladder;
pub mod model;
pub mod par;
pub mod rng;
pub mod tag;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
