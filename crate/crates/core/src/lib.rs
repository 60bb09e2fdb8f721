//! Discrete-event simulator for diffusion-LLM serving.
//!
//! Model inference is replaced by a calibrated stochastic commit oracle and
//! a piecewise-affine iteration-latency model. On top of that the crate
//! provides block-wise, prefix-cached and streaming chunked decoding engines,
//! batching policies including the saturation-aware elastic chunk selector,
//! a virtual-clock serving loop, workload generation and SLO metrics.

pub mod commit;
pub mod config;
pub mod cost;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
