//! Cognitive radar spectrum-sharing simulator core.

pub mod agent;
pub mod deep;
pub mod env;
pub mod error;
pub mod interference;
pub mod mask;
pub mod neural;
pub mod radar;
pub mod tabular;
