//! Thinking-activated recommendation with a small LoRA-adapted language
//! model, collaborative-embedding injection and gated expert fusion.

pub mod checkpoint;
pub mod collab;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod projector;
pub mod reason;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
