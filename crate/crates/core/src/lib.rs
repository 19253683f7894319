//! Disc-level lumbar spinal stenosis grading pipeline.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data_model;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod splitting;
pub mod training;

pub use error::{Error, Result};
