//! The convolution ladder: sequential oracle, per-element scalar parallel,
//! vectorized over chunked-4 input, fused chunked-4 output, and granular
//! (several outputs per work item).

mod parallel;
mod sequential;
mod spec;
mod vectorized;

pub use parallel::conv_parallel_scalar;
pub use sequential::{conv_sequential, conv_sequential_ordered, SumOrder};
pub use spec::{enumerate_valid_g, is_valid_g, ConvSpec, Granularity, PlainWeights, WeightBank};
pub use vectorized::{conv_granular, conv_vectorized, conv_vectorized_fused_output};

pub(crate) use vectorized::conv_granular_into;
