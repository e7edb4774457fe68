//! Selective-scan image classifier with per-sample hypernetwork conditioning
//! and an evidential Dirichlet head, plus the data, training and evaluation
//! machinery around it.

pub mod backbone;
pub mod data;
pub mod gradcheck;
mod error;
pub mod hac;
pub mod metrics;
pub mod model;
pub mod rap;
pub mod report;
pub mod scan;
pub mod train;

pub use error::{CoreError, Result};
