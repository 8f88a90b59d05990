//! Pooling, ReLU, softmax and the fire block.

use serde::{Deserialize, Serialize};

use crate::arith::ArithMode;
use crate::conv::{conv_granular_into, conv_sequential, ConvSpec, Granularity, PlainWeights, WeightBank};
use crate::error::{Error, Result};
use crate::pool::WorkerPool;
use crate::simd::F32x4;
use crate::tensor::{Layout, Shape3, Tensor3, LANES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, window: usize, stride: usize) -> Self {
        Self {
            kind,
            window,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidPoolSpec(
                "window and stride must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        self.validate()?;
        if self.window > input.height || self.window > input.width {
            return Err(Error::InvalidPoolSpec(format!(
                "window {} larger than {}x{} input",
                self.window, input.height, input.width
            )));
        }
        Ok(Shape3::new(
            input.layers,
            (input.height - self.window) / self.stride + 1,
            (input.width - self.window) / self.stride + 1,
        ))
    }
}

/// Vectorized pooling over a chunked-4 tensor; one work item per output
/// vector of four channels.
pub fn pool2d(pool: &WorkerPool, t: &Tensor3, spec: PoolSpec) -> Result<Tensor3> {
    t.expect_layout(Layout::Chunked4)?;
    let out_shape = spec.output_shape(t.shape())?;
    let (in_h, in_w) = (t.height(), t.width());
    let (oh, ow) = (out_shape.height, out_shape.width);
    let out_plane = oh * ow;
    let input = t.data();
    let area = (spec.window * spec.window) as f32;
    let mut out = vec![0.0f32; out_shape.stored_len(Layout::Chunked4)];
    pool.for_each_range(&mut out, LANES, |first, chunk| {
        for (off, dst) in chunk.chunks_exact_mut(LANES).enumerate() {
            let v = first + off;
            let (c, p) = (v / out_plane, v % out_plane);
            let (h0, w0) = ((p / ow) * spec.stride, (p % ow) * spec.stride);
            let base = c * in_h * in_w * LANES;
            let at = |r: usize, col: usize| F32x4::load(&input[base + (r * in_w + col) * LANES..]);
            match spec.kind {
                PoolKind::Max => {
                    let mut best = at(h0, w0);
                    for r in h0..h0 + spec.window {
                        for col in w0..w0 + spec.window {
                            // v > best ? v : best, same as the scalar oracle
                            best = at(r, col).max(best);
                        }
                    }
                    best.store(dst);
                }
                PoolKind::Avg => {
                    let mut acc = F32x4::zero();
                    for r in h0..h0 + spec.window {
                        for col in w0..w0 + spec.window {
                            acc = acc.add(at(r, col));
                        }
                    }
                    for (d, s) in dst.iter_mut().zip(acc.to_array()) {
                        *d = s / area;
                    }
                }
            }
        }
    });
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::Chunked4, out))
}

pub fn max_pool(pool: &WorkerPool, t: &Tensor3, window: usize, stride: usize) -> Result<Tensor3> {
    pool2d(pool, t, PoolSpec::new(PoolKind::Max, window, stride))
}

pub fn avg_pool(pool: &WorkerPool, t: &Tensor3, window: usize, stride: usize) -> Result<Tensor3> {
    pool2d(pool, t, PoolSpec::new(PoolKind::Avg, window, stride))
}

/// Scalar row-major pooling, the reference for [`pool2d`].
pub fn pool2d_scalar(t: &Tensor3, spec: PoolSpec) -> Result<Tensor3> {
    t.expect_layout(Layout::RowMajor)?;
    let out_shape = spec.output_shape(t.shape())?;
    let area = (spec.window * spec.window) as f32;
    let mut out = Vec::with_capacity(out_shape.volume());
    for m in 0..out_shape.layers {
        for oh in 0..out_shape.height {
            for ow in 0..out_shape.width {
                let (h0, w0) = (oh * spec.stride, ow * spec.stride);
                let value = match spec.kind {
                    PoolKind::Max => {
                        let mut best = t.get(m, h0, w0);
                        for r in h0..h0 + spec.window {
                            for c in w0..w0 + spec.window {
                                let v = t.get(m, r, c);
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0f32;
                        for r in h0..h0 + spec.window {
                            for c in w0..w0 + spec.window {
                                acc += t.get(m, r, c);
                            }
                        }
                        acc / area
                    }
                };
                out.push(value);
            }
        }
    }
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::RowMajor, out))
}

#[inline]
fn relu_scalar(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Element-wise `max(0, x)`, layout preserving. Padded channels stay zero.
pub fn relu(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    relu_inplace(&mut out);
    out
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in t.data_mut() {
        *v = relu_scalar(*v);
    }
}

/// Max-subtracted softmax. Sums are taken in `f64`; an empty input yields
/// an empty output.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let Some(max) = logits.iter().copied().reduce(f32::max) else {
        return Vec::new();
    };
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / total) as f32).collect()
}

/// Squeeze 1x1 convolution feeding parallel 1x1 and 3x3 expand convolutions
/// whose outputs are concatenated along channels, expand1x1 first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FireSpec {
    pub squeeze: ConvSpec,
    pub expand1x1: ConvSpec,
    pub expand3x3: ConvSpec,
}

impl FireSpec {
    /// Standard fire block: 1x1 squeeze, 1x1 expand, 3x3 expand with pad 1.
    pub fn standard(in_layers: usize, squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        Self {
            squeeze: ConvSpec::new(1, 1, 0, in_layers, squeeze),
            expand1x1: ConvSpec::new(1, 1, 0, squeeze, expand1x1),
            expand3x3: ConvSpec::new(3, 1, 1, squeeze, expand3x3),
        }
    }

    pub fn in_layers(&self) -> usize {
        self.squeeze.in_layers
    }

    pub fn out_layers(&self) -> usize {
        self.expand1x1.out_layers + self.expand3x3.out_layers
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        let squeezed = self.squeeze.output_shape(input)?;
        let e1 = self.expand1x1.output_shape(squeezed)?;
        let e3 = self.expand3x3.output_shape(squeezed)?;
        if (e1.height, e1.width) != (e3.height, e3.width) {
            return Err(Error::ShapeMismatch {
                expected: e1,
                actual: e3,
            });
        }
        if self.expand1x1.out_layers % LANES != 0 {
            return Err(Error::InvalidConvSpec(format!(
                "expand1x1 output count {} must be a multiple of {LANES} so the concatenation seam is chunk aligned",
                self.expand1x1.out_layers
            )));
        }
        Ok(Shape3::new(self.out_layers(), e1.height, e1.width))
    }

    pub fn convs(&self) -> [(&'static str, ConvSpec); 3] {
        [
            ("squeeze1x1", self.squeeze),
            ("expand1x1", self.expand1x1),
            ("expand3x3", self.expand3x3),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FireWeights {
    pub squeeze: WeightBank,
    pub expand1x1: WeightBank,
    pub expand3x3: WeightBank,
}

impl FireWeights {
    pub fn spec(&self) -> FireSpec {
        FireSpec {
            squeeze: *self.squeeze.spec(),
            expand1x1: *self.expand1x1.spec(),
            expand3x3: *self.expand3x3.spec(),
        }
    }

    pub fn banks(&self) -> [&WeightBank; 3] {
        [&self.squeeze, &self.expand1x1, &self.expand3x3]
    }

    pub fn to_plain(&self) -> [PlainWeights; 3] {
        [
            self.squeeze.to_plain(),
            self.expand1x1.to_plain(),
            self.expand3x3.to_plain(),
        ]
    }
}

/// Granularity choice for each of a fire block's convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireGranularity {
    pub squeeze: Granularity,
    pub expand1x1: Granularity,
    pub expand3x3: Granularity,
}

impl Default for FireGranularity {
    fn default() -> Self {
        let one = Granularity::unchecked(1);
        Self {
            squeeze: one,
            expand1x1: one,
            expand3x3: one,
        }
    }
}

/// Chunked-4 fire forward pass. Both expand convolutions write straight into
/// their halves of the concatenated output.
pub fn fire_forward(
    pool: &WorkerPool,
    t: &Tensor3,
    weights: &FireWeights,
    g: FireGranularity,
    mode: ArithMode,
) -> Result<Tensor3> {
    t.expect_layout(Layout::Chunked4)?;
    let spec = weights.spec();
    let out_shape = spec.output_shape(t.shape())?;
    let squeezed_shape = spec.squeeze.output_shape(t.shape())?;

    let mut squeezed = vec![0.0f32; squeezed_shape.stored_len(Layout::Chunked4)];
    conv_granular_into(pool, t, &weights.squeeze, g.squeeze, mode, &mut squeezed)?;
    let mut squeezed = Tensor3::from_raw_unchecked(squeezed_shape, Layout::Chunked4, squeezed);
    relu_inplace(&mut squeezed);

    let mut out = vec![0.0f32; out_shape.stored_len(Layout::Chunked4)];
    let seam = spec.expand1x1.out_layers * out_shape.plane();
    let (left, right) = out.split_at_mut(seam);
    conv_granular_into(pool, &squeezed, &weights.expand1x1, g.expand1x1, mode, left)?;
    conv_granular_into(pool, &squeezed, &weights.expand3x3, g.expand3x3, mode, right)?;
    let mut out = Tensor3::from_raw_unchecked(out_shape, Layout::Chunked4, out);
    relu_inplace(&mut out);
    Ok(out)
}

/// Row-major fire forward pass built from the sequential oracle.
pub fn fire_forward_sequential(t: &Tensor3, weights: &[PlainWeights; 3]) -> Result<Tensor3> {
    let squeezed = relu(&conv_sequential(t, &weights[0])?);
    let e1 = conv_sequential(&squeezed, &weights[1])?;
    let e3 = conv_sequential(&squeezed, &weights[2])?;
    if (e1.height(), e1.width()) != (e3.height(), e3.width()) {
        return Err(Error::ShapeMismatch {
            expected: e1.shape(),
            actual: e3.shape(),
        });
    }
    let shape = Shape3::new(e1.layers() + e3.layers(), e1.height(), e1.width());
    let mut data = e1.into_data();
    data.extend_from_slice(e3.data());
    let mut out = Tensor3::from_raw_unchecked(shape, Layout::RowMajor, data);
    relu_inplace(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{reorder_from_chunked4, reorder_to_chunked4};

    fn pool() -> WorkerPool {
        WorkerPool::new(2).unwrap()
    }

    fn grid(v: &[f32], h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(Shape3::new(1, h, w), Layout::RowMajor, v.to_vec()).unwrap()
    }

    #[test]
    fn max_and_avg_of_2x2() {
        let t = reorder_to_chunked4(&grid(&[1., 2., 3., 4.], 2, 2));
        let mx = max_pool(&pool(), &t, 2, 2).unwrap();
        assert_eq!(reorder_from_chunked4(&mx).data(), &[4.0]);
        let av = avg_pool(&pool(), &t, 2, 2).unwrap();
        assert_eq!(reorder_from_chunked4(&av).data(), &[2.5]);
    }

    #[test]
    fn constant_downsamples_to_constant() {
        let t = reorder_to_chunked4(&Tensor3::from_fn(Shape3::new(5, 7, 7), |_| 3.25));
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let out = pool2d(&pool(), &t, PoolSpec::new(kind, 3, 2)).unwrap();
            assert_eq!(out.shape(), Shape3::new(5, 3, 3));
            assert!(out.to_row_major_vec().iter().all(|&v| v == 3.25));
        }
        let zeros = Tensor3::zeros(Shape3::new(4, 4, 4), Layout::Chunked4);
        let out = avg_pool(&pool(), &zeros, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_window_rejected() {
        let t = Tensor3::zeros(Shape3::new(4, 2, 2), Layout::Chunked4);
        assert!(max_pool(&pool(), &t, 3, 1).is_err());
        assert!(PoolSpec::new(PoolKind::Max, 0, 1).validate().is_err());
    }

    #[test]
    fn relu_examples() {
        let t = Tensor3::from_vec(Shape3::new(3, 1, 1), Layout::RowMajor, vec![-1., 0., 2.])
            .unwrap();
        let r = relu(&t);
        assert_eq!(r.data(), &[0., 0., 2.]);
        assert_eq!(relu(&r), r);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
        assert!(softmax(&[]).is_empty());
        let p = softmax(&[1.0, 3.0, 2.0]);
        assert!(p[1] > p[2] && p[2] > p[0]);
    }

    #[test]
    fn fire_channel_mismatch_rejected() {
        let spec = FireSpec::standard(8, 4, 4, 4);
        assert!(spec.output_shape(Shape3::new(7, 3, 3)).is_err());
        let misaligned = FireSpec::standard(8, 4, 6, 4);
        assert!(misaligned.output_shape(Shape3::new(8, 3, 3)).is_err());
        assert_eq!(
            spec.output_shape(Shape3::new(8, 3, 3)).unwrap(),
            Shape3::new(8, 3, 3)
        );
    }

    #[test]
    fn fire_on_zero_input_propagates_biases() {
        // squeeze bias 1 -> relu 1; expand1x1 weights 2, bias -1 -> 2*1*4-1 = 7
        // expand3x3 weights 0, bias -3 -> relu 0
        let spec = FireSpec::standard(4, 4, 4, 4);
        let bank = |c: ConvSpec, w: f32, b: f32| {
            WeightBank::from_plain(
                &PlainWeights::new(c, vec![w; c.plain_kernel_len()], vec![b; c.out_layers])
                    .unwrap(),
            )
        };
        let weights = FireWeights {
            squeeze: bank(spec.squeeze, 0.5, 1.0),
            expand1x1: bank(spec.expand1x1, 2.0, -1.0),
            expand3x3: bank(spec.expand3x3, 0.0, -3.0),
        };
        let input = Tensor3::zeros(Shape3::new(4, 3, 3), Layout::Chunked4);
        let out = fire_forward(&pool(), &input, &weights, FireGranularity::default(), ArithMode::Strict)
            .unwrap();
        assert_eq!(out.shape(), Shape3::new(8, 3, 3));
        for h in 0..3 {
            for w in 0..3 {
                for m in 0..4 {
                    assert_eq!(out.get(m, h, w), 7.0);
                    assert_eq!(out.get(m + 4, h, w), 0.0);
                }
            }
        }
    }
}
