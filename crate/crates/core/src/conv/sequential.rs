//! The single-threaded reference convolution every other kernel is checked
//! against.

use crate::error::Result;
use crate::simd::dot4_scalar;
use crate::tensor::{Layout, Tensor3, LANES};

use super::spec::PlainWeights;

/// Order in which the oracle accumulates a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumOrder {
    /// One product at a time: input layers, then kernel rows, then columns.
    #[default]
    Natural,
    /// Input-channel chunks of four, then rows, then columns; each step adds
    /// `(p0 + p1) + (p2 + p3)` over the chunk's four products. This is the
    /// order the strict vectorized kernels commit to.
    ChunkedDot,
}

/// `out[m][h][w] = bias[m] + sum input[l][hS-P+i][wS-P+j] * kernel[m][l][i][j]`
/// with out-of-bounds input treated as zero.
pub fn conv_sequential(input: &Tensor3, weights: &PlainWeights) -> Result<Tensor3> {
    conv_sequential_ordered(input, weights, SumOrder::Natural)
}

pub fn conv_sequential_ordered(
    input: &Tensor3,
    weights: &PlainWeights,
    order: SumOrder,
) -> Result<Tensor3> {
    input.expect_layout(Layout::RowMajor)?;
    let spec = *weights.spec();
    let out_shape = spec.output_shape(input.shape())?;
    let (in_h, in_w) = (input.height() as isize, input.width() as isize);
    let (k, s, p) = (spec.kernel, spec.stride as isize, spec.pad as isize);
    let x = input.data();
    let plane = input.height() * input.width();
    let at = |l: usize, r: isize, c: isize| x[l * plane + r as usize * in_w as usize + c as usize];

    let mut out = Vec::with_capacity(out_shape.volume());
    for m in 0..spec.out_layers {
        for oh in 0..out_shape.height {
            for ow in 0..out_shape.width {
                let mut acc = 0.0f32;
                match order {
                    SumOrder::Natural => {
                        for l in 0..spec.in_layers {
                            for i in 0..k {
                                let r = oh as isize * s - p + i as isize;
                                if r < 0 || r >= in_h {
                                    continue;
                                }
                                for j in 0..k {
                                    let c = ow as isize * s - p + j as isize;
                                    if c < 0 || c >= in_w {
                                        continue;
                                    }
                                    acc += at(l, r, c) * weights.kernel(m, l, i, j);
                                }
                            }
                        }
                    }
                    SumOrder::ChunkedDot => {
                        for chunk in 0..spec.in_chunks() {
                            for i in 0..k {
                                let r = oh as isize * s - p + i as isize;
                                if r < 0 || r >= in_h {
                                    continue;
                                }
                                for j in 0..k {
                                    let c = ow as isize * s - p + j as isize;
                                    if c < 0 || c >= in_w {
                                        continue;
                                    }
                                    let mut a = [0.0f32; LANES];
                                    let mut b = [0.0f32; LANES];
                                    for lane in 0..LANES {
                                        let l = chunk * LANES + lane;
                                        if l < spec.in_layers {
                                            a[lane] = at(l, r, c);
                                            b[lane] = weights.kernel(m, l, i, j);
                                        }
                                    }
                                    acc += dot4_scalar(a, b);
                                }
                            }
                        }
                    }
                }
                out.push(acc + weights.biases()[m]);
            }
        }
    }
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::RowMajor, out))
}
