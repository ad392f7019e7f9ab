//! Keyword- and order-conditioned CVAE text generation with a PI controller
//! regulating the KL term during training.

pub mod cli;
pub mod control;
pub mod data;
pub mod diff;
pub mod gen_metrics;
pub mod model;
pub mod objective;
pub mod trainer;
mod error;

pub use error::{Error, Result};
