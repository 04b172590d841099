//! Clustered latent optimization for non-adversarial multi-class image
//! synthesis, with evaluation metrics and estimator-theory checks.

pub mod assignment;
pub mod clustering;
pub mod data;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod posterior;
pub mod theory;

pub use error::{Error, Result};
