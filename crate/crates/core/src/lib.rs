//! Quantized embedding tables trained directly in low precision.

pub mod data;
pub mod lab;
pub mod model;
pub mod optim;
pub mod quant;
pub mod regimes;
pub mod store;
pub mod synth;
pub mod train;
