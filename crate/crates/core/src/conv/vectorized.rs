//! Convolution over chunked-4 inputs with 4-wide dot products.
//!
//! Every kernel here accumulates a window in the same order: input-channel
//! chunks outermost, then kernel rows, then columns. In strict mode the
//! result is therefore independent of the output layout, the granularity and
//! the partitioning across workers.

use crate::arith::{with_mode, ArithMode, Reduction, RelaxedFma, RelaxedLanes, StrictDot};
use crate::error::{Error, Result};
use crate::pool::WorkerPool;
use crate::simd::{fma_available, F32x4};
use crate::tensor::{chunked4_coord, row_major_coord, Layout, Shape3, Tensor3, LANES};

use super::spec::{is_valid_g, Granularity, WeightBank};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    chunks: usize,
    /// floats per input chunk plane
    in_chunk_len: usize,
    /// floats per output layer of the kernel bank
    kernel_layer_len: usize,
}

/// Kernel taps `[lo, hi)` along one axis whose input coordinate
/// `o * stride + tap - pad` lies inside `[0, extent)`.
#[inline(always)]
fn tap_span(o: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let origin = o * stride;
    let lo = pad.saturating_sub(origin);
    let hi = (extent + pad).saturating_sub(origin).min(kernel);
    (lo, hi.max(lo))
}

#[inline(always)]
fn window<R: Reduction, const G: usize>(
    input: &[f32],
    kern: &[f32],
    geo: &Geometry,
    oh: usize,
    ow: usize,
    bases: &[usize; G],
) -> [R::Acc; G] {
    let mut acc = [R::zero(); G];
    let (i_lo, i_hi) = tap_span(oh, geo.stride, geo.pad, geo.kernel, geo.in_h);
    let (j_lo, j_hi) = tap_span(ow, geo.stride, geo.pad, geo.kernel, geo.in_w);
    let k = geo.kernel;
    for c in 0..geo.chunks {
        let in_c = c * geo.in_chunk_len;
        let k_c = c * k * k * LANES;
        for i in i_lo..i_hi {
            let ih = oh * geo.stride + i - geo.pad;
            let in_row = in_c + ih * geo.in_w * LANES;
            let k_row = k_c + i * k * LANES;
            for j in j_lo..j_hi {
                let iw = ow * geo.stride + j - geo.pad;
                // SAFETY: ih < in_h, iw < in_w and c < chunks keep the load
                // inside the input; the launch checked the bank length.
                let a = unsafe { F32x4::load_at(input, in_row + iw * LANES) };
                let koff = k_row + j * LANES;
                for t in 0..G {
                    let b = unsafe { F32x4::load_at(kern, bases[t] + koff) };
                    acc[t] = R::step(acc[t], a, b);
                }
            }
        }
    }
    acc
}

#[inline(always)]
fn window_dyn<R: Reduction>(
    input: &[f32],
    kern: &[f32],
    geo: &Geometry,
    oh: usize,
    ow: usize,
    bases: &[usize],
    acc: &mut [R::Acc],
) {
    acc.fill(R::zero());
    let (i_lo, i_hi) = tap_span(oh, geo.stride, geo.pad, geo.kernel, geo.in_h);
    let (j_lo, j_hi) = tap_span(ow, geo.stride, geo.pad, geo.kernel, geo.in_w);
    let k = geo.kernel;
    for c in 0..geo.chunks {
        let in_c = c * geo.in_chunk_len;
        let k_c = c * k * k * LANES;
        for i in i_lo..i_hi {
            let ih = oh * geo.stride + i - geo.pad;
            let in_row = in_c + ih * geo.in_w * LANES;
            let k_row = k_c + i * k * LANES;
            for j in j_lo..j_hi {
                let iw = ow * geo.stride + j - geo.pad;
                let a = unsafe { F32x4::load_at(input, in_row + iw * LANES) };
                let koff = k_row + j * LANES;
                for (slot, &base) in acc.iter_mut().zip(bases) {
                    let b = unsafe { F32x4::load_at(kern, base + koff) };
                    *slot = R::step(*slot, a, b);
                }
            }
        }
    }
}

struct Launch<'a> {
    input: &'a [f32],
    kern: &'a [f32],
    bias: &'a [f32],
    geo: Geometry,
    out_layers: usize,
    /// stored output layers covered by one region
    group_layers: usize,
    groups: usize,
}

#[inline(always)]
fn fused_range<R: Reduction, const G: usize>(l: &Launch, first: usize, regions: &mut [&mut [f32]]) {
    let geo = &l.geo;
    let n = regions[0].len();
    for off in 0..n {
        let c = chunked4_coord(first + off, geo.out_w, geo.out_h);
        if c.m >= l.out_layers {
            // zero padding channel; only reachable with a single region
            for region in regions.iter_mut() {
                region[off] = 0.0;
            }
            continue;
        }
        let bases: [usize; G] =
            std::array::from_fn(|t| (c.m + t * l.group_layers) * geo.kernel_layer_len);
        let acc = window::<R, G>(l.input, l.kern, geo, c.h, c.w, &bases);
        for t in 0..G {
            regions[t][off] = R::finish(acc[t]) + l.bias[c.m + t * l.group_layers];
        }
    }
}

#[inline(always)]
fn fused_range_dyn<R: Reduction>(l: &Launch, first: usize, regions: &mut [&mut [f32]]) {
    let geo = &l.geo;
    let n = regions[0].len();
    let mut bases = vec![0usize; l.groups];
    let mut acc = vec![R::zero(); l.groups];
    for off in 0..n {
        let c = chunked4_coord(first + off, geo.out_w, geo.out_h);
        for (t, b) in bases.iter_mut().enumerate() {
            *b = (c.m + t * l.group_layers) * geo.kernel_layer_len;
        }
        window_dyn::<R>(l.input, l.kern, geo, c.h, c.w, &bases, &mut acc);
        for (t, a) in acc.iter().enumerate() {
            regions[t][off] = R::finish(*a) + l.bias[c.m + t * l.group_layers];
        }
    }
}

#[inline(always)]
fn fused_range_any<R: Reduction>(l: &Launch, first: usize, regions: &mut [&mut [f32]]) {
    match l.groups {
        1 => fused_range::<R, 1>(l, first, regions),
        2 => fused_range::<R, 2>(l, first, regions),
        3 => fused_range::<R, 3>(l, first, regions),
        4 => fused_range::<R, 4>(l, first, regions),
        5 => fused_range::<R, 5>(l, first, regions),
        6 => fused_range::<R, 6>(l, first, regions),
        8 => fused_range::<R, 8>(l, first, regions),
        _ => fused_range_dyn::<R>(l, first, regions),
    }
}

#[cfg_attr(target_arch = "x86_64", target_feature(enable = "fma"))]
unsafe fn fused_range_fma(l: &Launch, first: usize, regions: &mut [&mut [f32]]) {
    fused_range_any::<RelaxedFma>(l, first, regions)
}

#[inline(always)]
fn row_major_range<R: Reduction>(l: &Launch, first: usize, out: &mut [f32]) {
    let geo = &l.geo;
    for (off, slot) in out.iter_mut().enumerate() {
        let c = row_major_coord(first + off, geo.out_w, geo.out_h);
        let acc = window::<R, 1>(l.input, l.kern, geo, c.h, c.w, &[c.m * geo.kernel_layer_len]);
        *slot = R::finish(acc[0]) + l.bias[c.m];
    }
}

#[cfg_attr(target_arch = "x86_64", target_feature(enable = "fma"))]
unsafe fn row_major_range_fma(l: &Launch, first: usize, out: &mut [f32]) {
    row_major_range::<RelaxedFma>(l, first, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    Strict,
    Relaxed,
    RelaxedFma,
}

fn select_path(mode: ArithMode) -> Path {
    match mode {
        ArithMode::Strict => Path::Strict,
        ArithMode::Relaxed if fma_available() => Path::RelaxedFma,
        ArithMode::Relaxed => Path::Relaxed,
    }
}

fn prepare<'a>(input: &'a Tensor3, bank: &'a WeightBank) -> Result<(Shape3, Geometry)> {
    input.expect_layout(Layout::Chunked4)?;
    let spec = bank.spec();
    let out_shape = spec.output_shape(input.shape())?;
    let geo = Geometry {
        in_h: input.height(),
        in_w: input.width(),
        out_h: out_shape.height,
        out_w: out_shape.width,
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.pad,
        chunks: spec.in_chunks(),
        in_chunk_len: input.height() * input.width() * LANES,
        kernel_layer_len: spec.in_chunks() * spec.kernel * spec.kernel * LANES,
    };
    debug_assert_eq!(input.data().len(), geo.chunks * geo.in_chunk_len);
    debug_assert_eq!(bank.kernels().len(), spec.out_layers * geo.kernel_layer_len);
    Ok((out_shape, geo))
}

/// Vectorized convolution producing a row-major output; one work item per
/// output element, indexed in row-major order.
pub fn conv_vectorized(
    pool: &WorkerPool,
    input: &Tensor3,
    bank: &WeightBank,
    mode: ArithMode,
) -> Result<Tensor3> {
    let (out_shape, geo) = prepare(input, bank)?;
    let launch = Launch {
        input: input.data(),
        kern: bank.kernels(),
        bias: bank.biases(),
        geo,
        out_layers: out_shape.layers,
        group_layers: out_shape.layers,
        groups: 1,
    };
    let path = select_path(mode);
    let mut out = vec![0.0f32; out_shape.volume()];
    pool.for_each_range(&mut out, 1, |first, chunk| {
        with_mode(mode, || match path {
            Path::Strict => row_major_range::<StrictDot>(&launch, first, chunk),
            Path::Relaxed => row_major_range::<RelaxedLanes>(&launch, first, chunk),
            // SAFETY: selected only when the CPU reports FMA.
            Path::RelaxedFma => unsafe { row_major_range_fma(&launch, first, chunk) },
        })
    });
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::RowMajor, out))
}

/// Vectorized convolution whose work items write straight into chunked-4
/// order, so the result feeds the next layer without a reorder pass.
pub fn conv_vectorized_fused_output(
    pool: &WorkerPool,
    input: &Tensor3,
    bank: &WeightBank,
    mode: ArithMode,
) -> Result<Tensor3> {
    let (out_shape, _) = prepare(input, bank)?;
    let mut out = vec![0.0f32; out_shape.stored_len(Layout::Chunked4)];
    launch_fused(pool, input, bank, 1, mode, &mut out)?;
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::Chunked4, out))
}

/// Fused-output convolution where every work item computes `g` outputs at
/// the same spatial position, in layers `m, m + L/g, m + 2L/g, ...`,
/// loading each input vector once for all of them.
pub fn conv_granular(
    pool: &WorkerPool,
    input: &Tensor3,
    bank: &WeightBank,
    g: Granularity,
    mode: ArithMode,
) -> Result<Tensor3> {
    let (out_shape, _) = prepare(input, bank)?;
    let mut out = vec![0.0f32; out_shape.stored_len(Layout::Chunked4)];
    conv_granular_into(pool, input, bank, g, mode, &mut out)?;
    Ok(Tensor3::from_raw_unchecked(out_shape, Layout::Chunked4, out))
}

/// [`conv_granular`] writing into a caller-provided chunked-4 buffer.
pub(crate) fn conv_granular_into(
    pool: &WorkerPool,
    input: &Tensor3,
    bank: &WeightBank,
    g: Granularity,
    mode: ArithMode,
    out: &mut [f32],
) -> Result<Shape3> {
    let layers = bank.spec().out_layers;
    // layer counts off the 4-grid have no valid g; g = 1 still works there
    // through the padded single-region path
    if g.get() != 1 && !is_valid_g(g.get(), layers) {
        return Err(Error::InvalidGranularity { g: g.get(), layers });
    }
    launch_fused(pool, input, bank, g.get(), mode, out)
}

fn launch_fused(
    pool: &WorkerPool,
    input: &Tensor3,
    bank: &WeightBank,
    groups: usize,
    mode: ArithMode,
    out: &mut [f32],
) -> Result<Shape3> {
    let (out_shape, geo) = prepare(input, bank)?;
    let stored = out_shape.stored_layers(Layout::Chunked4);
    if out.len() != out_shape.stored_len(Layout::Chunked4) {
        return Err(Error::DataLength {
            shape: out_shape,
            expected: out_shape.stored_len(Layout::Chunked4),
            actual: out.len(),
        });
    }
    let launch = Launch {
        input: input.data(),
        kern: bank.kernels(),
        bias: bank.biases(),
        geo,
        out_layers: out_shape.layers,
        group_layers: stored / groups,
        groups,
    };
    let path = select_path(mode);
    pool.for_each_strided_range(out, groups, |first, regions| {
        with_mode(mode, || match path {
            Path::Strict => fused_range_any::<StrictDot>(&launch, first, regions),
            Path::Relaxed => fused_range_any::<RelaxedLanes>(&launch, first, regions),
            // SAFETY: selected only when the CPU reports FMA.
            Path::RelaxedFma => unsafe { fused_range_fma(&launch, first, regions) },
        })
    });
    Ok(out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{enumerate_valid_g, ConvSpec, PlainWeights};
    use crate::tensor::{reorder_to_chunked4, ElemCoord};

    fn pool() -> WorkerPool {
        WorkerPool::new(2).unwrap()
    }

    #[test]
    fn tap_span_clips_to_input() {
        // K=3, P=1 at the left border: tap 0 falls outside
        assert_eq!(tap_span(0, 1, 1, 3, 5), (1, 3));
        assert_eq!(tap_span(4, 1, 1, 3, 5), (0, 2));
        assert_eq!(tap_span(2, 1, 1, 3, 5), (0, 3));
        // window entirely inside the padding
        assert_eq!(tap_span(0, 1, 3, 3, 1), (3, 3));
    }

    #[test]
    fn single_dot4() {
        let input = Tensor3::from_fn(Shape3::new(4, 1, 1), |c| (c.m + 1) as f32);
        let w = PlainWeights::new(ConvSpec::new(1, 1, 0, 4, 1), vec![1.0; 4], vec![0.0]).unwrap();
        let bank = WeightBank::from_plain(&w);
        let out = conv_vectorized(&pool(), &reorder_to_chunked4(&input), &bank, ArithMode::Strict)
            .unwrap();
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn row_major_input_rejected() {
        let input = Tensor3::zeros(Shape3::new(4, 1, 1), Layout::RowMajor);
        let w = PlainWeights::new(ConvSpec::new(1, 1, 0, 4, 1), vec![1.0; 4], vec![0.0]).unwrap();
        let bank = WeightBank::from_plain(&w);
        assert!(matches!(
            conv_vectorized(&pool(), &input, &bank, ArithMode::Strict),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn eight_output_layers_interleave_in_chunks() {
        // out layer m produces the constant m via its bias
        let spec = ConvSpec::new(1, 1, 0, 4, 8);
        let w = PlainWeights::new(spec, vec![0.0; 32], (0..8).map(|m| m as f32).collect()).unwrap();
        let bank = WeightBank::from_plain(&w);
        let input = Tensor3::zeros(Shape3::new(4, 1, 2), Layout::Chunked4);
        let out = conv_vectorized_fused_output(&pool(), &input, &bank, ArithMode::Strict).unwrap();
        assert_eq!(
            out.data(),
            &[0., 1., 2., 3., 0., 1., 2., 3., 4., 5., 6., 7., 4., 5., 6., 7.]
        );
        for x in 0..16 {
            let c = crate::tensor::index_to_coord_chunked4(x, Shape3::new(8, 1, 2)).unwrap();
            assert_eq!(out.data()[x], c.m as f32);
            assert_eq!(out.flat_index(ElemCoord::new(c.m, c.h, c.w)), x);
        }
    }

    #[test]
    fn invalid_granularity_rejected() {
        let spec = ConvSpec::new(1, 1, 0, 4, 8);
        let bank = WeightBank::from_plain(
            &PlainWeights::new(spec, vec![0.0; 32], vec![0.0; 8]).unwrap(),
        );
        let input = Tensor3::zeros(Shape3::new(4, 1, 1), Layout::Chunked4);
        let err = conv_granular(&pool(), &input, &bank, Granularity::unchecked(4), ArithMode::Strict)
            .unwrap_err();
        assert_eq!(err, Error::InvalidGranularity { g: 4, layers: 8 });
        assert_eq!(enumerate_valid_g(8).len(), 2);
    }

    #[test]
    fn odd_output_layers_keep_padding_zero() {
        let spec = ConvSpec::new(1, 1, 0, 1, 3);
        let bank =
            WeightBank::from_plain(&PlainWeights::new(spec, vec![1.0; 3], vec![1.0; 3]).unwrap());
        let input = reorder_to_chunked4(&Tensor3::from_fn(Shape3::new(1, 2, 2), |_| 2.0));
        let out = conv_vectorized_fused_output(&pool(), &input, &bank, ArithMode::Relaxed).unwrap();
        assert!(Tensor3::from_vec(out.shape(), Layout::Chunked4, out.data().to_vec()).is_ok());
        assert_eq!(out.get(2, 1, 1), 3.0);
    }
}
