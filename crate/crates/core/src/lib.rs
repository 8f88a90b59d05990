//! Data-parallel CNN inference on the CPU.
//!
//! Feature maps are stored either row-major or as interleaved groups of four
//! channels ([`Layout::Chunked4`]), which lets each output element be
//! computed with 4-wide dot products. Convolutions come in several variants
//! that all agree with the sequential oracle [`conv::conv_sequential`];
//! [`network::forward`] chains them into a full network such as SqueezeNet.

pub mod arith;
pub mod bench;
pub mod conv;
pub mod error;
pub mod layers;
pub mod modelio;
pub mod network;
pub mod pool;
pub mod simd;
pub mod synth;
pub mod tensor;
pub mod tuner;

pub use arith::ArithMode;
pub use error::{Error, Result};
pub use network::{forward, forward_sequential, GranularityPlan, Model, NetworkDef};
pub use pool::WorkerPool;
pub use tensor::{Layout, Shape3, Tensor3};
