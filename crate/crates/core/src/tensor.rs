//! Three-dimensional feature maps and the index algebra between the plain
//! row-major layout and the chunked-of-4 ("layer major") layout.
//!
//! In `Chunked4` storage, channels are grouped in runs of four at every
//! spatial position: the flat order is `[chunk][row][col][lane]`, so the four
//! values that feed one 4-wide dot product are adjacent in memory. Channel
//! counts that are not a multiple of four are padded with zero channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of channels packed into one vector.
pub const LANES: usize = 4;

/// Rounds a channel count up to the next multiple of [`LANES`].
#[inline]
pub fn pad_to_lanes(layers: usize) -> usize {
    layers.div_ceil(LANES) * LANES
}

/// Storage order of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    RowMajor,
    Chunked4,
}

/// Logical dimensions of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(layers: usize, height: usize, width: usize) -> Self {
        Self {
            layers,
            height,
            width,
        }
    }

    /// Number of elements in the logical (unpadded) box.
    pub fn volume(&self) -> usize {
        self.layers * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Layer count as stored under `layout`.
    pub fn stored_layers(&self, layout: Layout) -> usize {
        match layout {
            Layout::RowMajor => self.layers,
            Layout::Chunked4 => pad_to_lanes(self.layers),
        }
    }

    /// Storage length under `layout`.
    pub fn stored_len(&self, layout: Layout) -> usize {
        self.stored_layers(layout) * self.plane()
    }
}

/// Coordinates of one element: layer, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElemCoord {
    pub m: usize,
    pub h: usize,
    pub w: usize,
}

impl ElemCoord {
    pub const fn new(m: usize, h: usize, w: usize) -> Self {
        Self { m, h, w }
    }
}

/// Maps a row-major flat index to its coordinates.
///
/// `w = x mod width`, `h = (x / width) mod height`, `m = x / (width * height)`.
pub fn index_to_coord_row_major(x: usize, shape: Shape3) -> Result<ElemCoord> {
    let len = shape.volume();
    if x >= len {
        return Err(Error::IndexOutOfRange { index: x, len });
    }
    Ok(row_major_coord(x, shape.width, shape.height))
}

/// Maps a chunked-4 flat index to its coordinates.
///
/// `shape.layers` is the stored (padded) layer count and must be a multiple
/// of four. `w = (x / 4) mod width`, `h = (x / (4 width)) mod height`,
/// `m = x mod 4 + (x / (4 width height)) * 4`.
pub fn index_to_coord_chunked4(x: usize, shape: Shape3) -> Result<ElemCoord> {
    if shape.layers % LANES != 0 {
        return Err(Error::UnpaddedLayers(shape.layers));
    }
    let len = shape.volume();
    if x >= len {
        return Err(Error::IndexOutOfRange { index: x, len });
    }
    Ok(chunked4_coord(x, shape.width, shape.height))
}

#[inline(always)]
pub(crate) fn row_major_coord(x: usize, width: usize, height: usize) -> ElemCoord {
    ElemCoord {
        w: x % width,
        h: (x / width) % height,
        m: x / (width * height),
    }
}

#[inline(always)]
pub(crate) fn chunked4_coord(x: usize, width: usize, height: usize) -> ElemCoord {
    ElemCoord {
        w: (x / LANES) % width,
        h: (x / (LANES * width)) % height,
        m: x % LANES + (x / (LANES * width * height)) * LANES,
    }
}

/// Inverse of [`index_to_coord_row_major`].
#[inline(always)]
pub fn coord_to_index_row_major(c: ElemCoord, width: usize, height: usize) -> usize {
    (c.m * height + c.h) * width + c.w
}

/// Inverse of [`index_to_coord_chunked4`].
#[inline(always)]
pub fn coord_to_index_chunked4(c: ElemCoord, width: usize, height: usize) -> usize {
    (((c.m / LANES) * height + c.h) * width + c.w) * LANES + c.m % LANES
}

/// A 3-D feature map with an explicit storage layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    layout: Layout,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape3, layout: Layout) -> Self {
        Self {
            shape,
            layout,
            data: vec![0.0; shape.stored_len(layout)],
        }
    }

    /// Wraps `data`, checking its length and (for `Chunked4`) that every
    /// padded channel slot is zero.
    pub fn from_vec(shape: Shape3, layout: Layout, data: Vec<f32>) -> Result<Self> {
        let expected = shape.stored_len(layout);
        if data.len() != expected {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if layout == Layout::Chunked4 && shape.layers % LANES != 0 {
            let tail = shape.layers % LANES;
            let last_chunk = shape.layers / LANES;
            let base = last_chunk * shape.plane() * LANES;
            for p in 0..shape.plane() {
                for lane in tail..LANES {
                    let i = base + p * LANES + lane;
                    if data[i] != 0.0 || data[i].is_sign_negative() {
                        return Err(Error::NonZeroPadding(i));
                    }
                }
            }
        }
        Ok(Self {
            shape,
            layout,
            data,
        })
    }

    /// Builds a row-major tensor from a function of coordinates.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(ElemCoord) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.volume());
        for m in 0..shape.layers {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(ElemCoord { m, h, w }));
                }
            }
        }
        Self {
            shape,
            layout: Layout::RowMajor,
            data,
        }
    }

    pub(crate) fn from_raw_unchecked(shape: Shape3, layout: Layout, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.stored_len(layout));
        Self {
            shape,
            layout,
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn layers(&self) -> usize {
        self.shape.layers
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Stored layer count (padded to a multiple of four for `Chunked4`).
    pub fn stored_layers(&self) -> usize {
        self.shape.stored_layers(self.layout)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat storage position of a coordinate under this tensor's layout.
    #[inline]
    pub fn flat_index(&self, c: ElemCoord) -> usize {
        match self.layout {
            Layout::RowMajor => coord_to_index_row_major(c, self.shape.width, self.shape.height),
            Layout::Chunked4 => coord_to_index_chunked4(c, self.shape.width, self.shape.height),
        }
    }

    /// Element at `(m, h, w)`, independent of layout.
    ///
    /// Panics when the coordinate lies outside the logical box.
    #[inline]
    pub fn get(&self, m: usize, h: usize, w: usize) -> f32 {
        assert!(
            m < self.shape.layers && h < self.shape.height && w < self.shape.width,
            "coordinate ({m},{h},{w}) outside {:?}",
            self.shape
        );
        self.data[self.flat_index(ElemCoord { m, h, w })]
    }

    pub(crate) fn expect_layout(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::LayoutMismatch {
                expected: layout,
                actual: self.layout,
            });
        }
        Ok(())
    }

    /// Logical values in row-major order, whatever the storage layout.
    pub fn to_row_major_vec(&self) -> Vec<f32> {
        match self.layout {
            Layout::RowMajor => self.data.clone(),
            Layout::Chunked4 => reorder_from_chunked4(self).data,
        }
    }

    /// Largest absolute element-wise difference over the logical box.
    pub fn max_abs_diff(&self, other: &Tensor3) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        let a = self.to_row_major_vec();
        let b = other.to_row_major_vec();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    /// True when both tensors hold bit-identical logical values.
    pub fn bit_eq(&self, other: &Tensor3) -> bool {
        self.shape == other.shape
            && self
                .to_row_major_vec()
                .iter()
                .zip(other.to_row_major_vec().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Rewrites a tensor into chunked-4 order, zero-padding the channel axis.
///
/// A tensor that is already `Chunked4` is returned as a copy.
pub fn reorder_to_chunked4(t: &Tensor3) -> Tensor3 {
    if t.layout == Layout::Chunked4 {
        return t.clone();
    }
    let Shape3 {
        layers,
        height,
        width,
    } = t.shape;
    let plane = height * width;
    let mut out = vec![0.0f32; t.shape.stored_len(Layout::Chunked4)];
    for m in 0..layers {
        let src = &t.data[m * plane..(m + 1) * plane];
        let chunk_base = (m / LANES) * plane * LANES;
        let lane = m % LANES;
        for (p, &v) in src.iter().enumerate() {
            out[chunk_base + p * LANES + lane] = v;
        }
    }
    Tensor3::from_raw_unchecked(t.shape, Layout::Chunked4, out)
}

/// Inverse of [`reorder_to_chunked4`]; padded channels are dropped.
pub fn reorder_from_chunked4(t: &Tensor3) -> Tensor3 {
    if t.layout == Layout::RowMajor {
        return t.clone();
    }
    let Shape3 {
        layers,
        height,
        width,
    } = t.shape;
    let plane = height * width;
    let mut out = vec![0.0f32; t.shape.volume()];
    for m in 0..layers {
        let dst = &mut out[m * plane..(m + 1) * plane];
        let chunk_base = (m / LANES) * plane * LANES;
        let lane = m % LANES;
        for (p, v) in dst.iter_mut().enumerate() {
            *v = t.data[chunk_base + p * LANES + lane];
        }
    }
    Tensor3::from_raw_unchecked(t.shape, Layout::RowMajor, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_examples() {
        let s = Shape3::new(2, 2, 3);
        assert_eq!(index_to_coord_row_major(0, s).unwrap(), ElemCoord::new(0, 0, 0));
        assert_eq!(index_to_coord_row_major(7, s).unwrap(), ElemCoord::new(1, 0, 1));
        assert!(matches!(
            index_to_coord_row_major(12, s),
            Err(Error::IndexOutOfRange { index: 12, len: 12 })
        ));
    }

    #[test]
    fn chunked_examples() {
        let s = Shape3::new(4, 2, 2);
        assert_eq!(index_to_coord_chunked4(0, s).unwrap(), ElemCoord::new(0, 0, 0));
        assert_eq!(index_to_coord_chunked4(5, s).unwrap(), ElemCoord::new(1, 0, 1));
        // second output slot holds layer 1 at the origin, whatever the plane size
        for (w, h) in [(1, 1), (3, 7), (13, 13)] {
            let s = Shape3::new(8, h, w);
            assert_eq!(index_to_coord_chunked4(1, s).unwrap(), ElemCoord::new(1, 0, 0));
        }
        assert_eq!(
            index_to_coord_chunked4(0, Shape3::new(3, 1, 1)),
            Err(Error::UnpaddedLayers(3))
        );
        assert!(index_to_coord_chunked4(16, s).is_err());
    }

    #[test]
    fn row_major_bijection_5x4x3() {
        let s = Shape3::new(3, 4, 5);
        let mut seen = vec![false; 60];
        for x in 0..60 {
            let c = index_to_coord_row_major(x, s).unwrap();
            assert!(c.m < 3 && c.h < 4 && c.w < 5);
            let slot = (c.m * 4 + c.h) * 5 + c.w;
            assert!(!seen[slot]);
            seen[slot] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn single_value_pads_to_four() {
        let t = Tensor3::from_vec(Shape3::new(1, 1, 1), Layout::RowMajor, vec![2.5]).unwrap();
        let c = reorder_to_chunked4(&t);
        assert_eq!(c.data(), &[2.5, 0.0, 0.0, 0.0]);
        let back = reorder_from_chunked4(&c);
        assert_eq!(back.data(), &[2.5]);
        assert_eq!(back.layout(), Layout::RowMajor);
    }

    #[test]
    fn eight_layers_group_in_two_chunks() {
        let t = Tensor3::from_fn(Shape3::new(8, 1, 1), |c| c.m as f32);
        let c = reorder_to_chunked4(&t);
        assert_eq!(c.data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        // (m, h, w) sequence matches (0,0,0),(1,0,0),(2,0,0),(3,0,0),(4,0,0)...
        let coords: Vec<_> = (0..8)
            .map(|x| index_to_coord_chunked4(x, Shape3::new(8, 1, 1)).unwrap().m)
            .collect();
        assert_eq!(coords, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn from_vec_rejects_bad_length_and_dirty_padding() {
        let s = Shape3::new(3, 1, 2);
        assert!(matches!(
            Tensor3::from_vec(s, Layout::Chunked4, vec![0.0; 6]),
            Err(Error::DataLength { expected: 8, .. })
        ));
        let mut d = vec![0.0; 8];
        d[7] = 1.0;
        assert_eq!(
            Tensor3::from_vec(s, Layout::Chunked4, d),
            Err(Error::NonZeroPadding(7))
        );
    }

    #[test]
    fn get_is_layout_independent() {
        let t = Tensor3::from_fn(Shape3::new(6, 3, 2), |c| (c.m * 100 + c.h * 10 + c.w) as f32);
        let c = reorder_to_chunked4(&t);
        for m in 0..6 {
            for h in 0..3 {
                for w in 0..2 {
                    assert_eq!(t.get(m, h, w), c.get(m, h, w));
                }
            }
        }
    }
}
