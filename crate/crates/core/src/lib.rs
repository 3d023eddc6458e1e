//! Street-level crop reference generation and satellite crop mapping.

pub mod cropmapper;
pub mod geocore;
pub mod imageclassifier;
pub mod imagery;
pub mod metrics;
pub mod neuralnet;
pub mod rasterstack;
pub mod refgen;
pub mod synthworld;
