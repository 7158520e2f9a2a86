pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data_model;
pub mod degradation;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod global_branch;
pub mod ingestion;
pub mod local_branch;
pub mod nn;
pub mod synthetic;
pub mod training;
pub mod transcoder;

pub use error::{Error, Result};
