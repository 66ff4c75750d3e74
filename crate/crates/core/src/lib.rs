//! Density-map object counting from image-level lower-count supervision.
//!
//! Only per-category counts up to four (and a "beyond" marker for larger
//! counts) are used for training. A classification branch yields category
//! maps whose local maxima seed pseudo ground truth for a density branch;
//! summing a density map gives the category count, and its spatial layout
//! is used to rank instance-mask proposals.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod infer;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod peaks;
pub mod segscore;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
