//! Question quality rating for multiple-choice questions.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod qdqe;
pub mod scqc;
pub mod sf;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
