//! One logical work item per output element, scalar arithmetic.

use crate::error::Result;
use crate::pool::WorkerPool;
use crate::tensor::{row_major_coord, Layout, Tensor3};

use super::spec::PlainWeights;

/// Same values as [`super::conv_sequential`]; each work item derives its
/// `(m, h, w)` from its flat row-major output index.
pub fn conv_parallel_scalar(
    pool: &WorkerPool,
    input: &Tensor3,
    weights: &PlainWeights,
) -> Result<Tensor3> {
    input.expect_layout(Layout::RowMajor)?;
    let spec = *weights.spec();
    let out_shape = spec.output_shape(input.shape())?;
    let (in_h, in_w) = (input.height() as isize, input.width() as isize);
    let (k, s, p) = (spec.kernel, spec.stride as isize, spec.pad as isize);
    let x = input.data();
    let plane = input.height() * input.width();
    let kern = weights.kernels();
    let bias = weights.biases();

    let mut out = vec![0.0f32; out_shape.volume()];
    pool.for_each_range(&mut out, 1, |first, chunk| {
        for (offset, slot) in chunk.iter_mut().enumerate() {
            let c = row_major_coord(first + offset, out_shape.width, out_shape.height);
            let mut acc = 0.0f32;
            for l in 0..spec.in_layers {
                let in_base = l * plane;
                let k_base = (c.m * spec.in_layers + l) * k * k;
                for i in 0..k {
                    let r = c.h as isize * s - p + i as isize;
                    if r < 0 || r >= in_h {
                        continue;
                    }
                    let row = in_base + r as usize * in_w as usize;
                    for j in 0..k {
                        let col = c.w as isize * s - p + j as isize;
                        if col < 0 || col >= in_w {
                            continue;
                        }
                        acc += x[row + col as usize] * kern[k_base + i * k + j];
                    }
                }
            }
            *slot = acc + bias[c.m];
        }
    });
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::RowMajor, out))
}
