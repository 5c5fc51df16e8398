//! Encrypted IoT traffic classification pipeline.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod swarm;
pub mod traffic;
pub mod tuner;
