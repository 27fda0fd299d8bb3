//! Desk-scale audio-language model pipeline.

pub mod audio;
pub mod batching;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod lora;
pub mod model;
pub mod nn;
pub mod perf;
pub mod projector;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
