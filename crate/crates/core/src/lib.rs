//! Hybrid vertical/horizontal autoscaling of GPU-backed serverless functions,
//! with a trace-driven simulator to evaluate it.

pub mod allocator;
pub mod autoscaler;
pub mod experiment;
pub mod model;
pub mod perf;
pub mod predictor;
pub mod sim;
pub mod trace;
