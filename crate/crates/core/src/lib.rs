//! Behavioral simulation of analog multiply-accumulate synapse arrays and
//! the stack that runs arbitrary matmuls and convolutions on them:
//! quantization, tiling onto 256 x 256 arrays, dependency-graph execution
//! with pipelined host stages, a link-bandwidth timing model, and
//! hardware-in-the-loop training.

pub mod chip;
pub mod config;
pub mod error;
pub mod executor;
pub mod graph;
pub mod lowering;
pub mod matmul;
pub mod partition;
pub mod perf;
pub mod quantize;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor, TensorData};
