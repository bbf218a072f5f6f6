//! Robustness toolkit for medical visual question answering.

pub mod data;
pub mod kernel;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod toy;
