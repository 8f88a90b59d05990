use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pad_to_lanes, Shape3, LANES};

/// Convolution hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    pub in_layers: usize,
    pub out_layers: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize, in_layers: usize, out_layers: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            in_layers,
            out_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::InvalidConvSpec("kernel size must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConvSpec("stride must be >= 1".into()));
        }
        if self.in_layers == 0 || self.out_layers == 0 {
            return Err(Error::InvalidConvSpec("layer counts must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in + 2P - K) / S + 1`, or `None` when the padded input is smaller
    /// than the kernel.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output shape for an input of shape `input`, checking the channel count.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        self.validate()?;
        if input.layers != self.in_layers {
            return Err(Error::ShapeMismatch {
                expected: Shape3::new(self.in_layers, input.height, input.width),
                actual: input,
            });
        }
        match (self.output_dim(input.height), self.output_dim(input.width)) {
            (Some(h), Some(w)) => Ok(Shape3::new(self.out_layers, h, w)),
            _ => Err(Error::InvalidConvSpec(format!(
                "kernel {} with pad {} does not fit a {}x{} input",
                self.kernel, self.pad, input.height, input.width
            ))),
        }
    }

    pub fn padded_in_layers(&self) -> usize {
        pad_to_lanes(self.in_layers)
    }

    pub fn in_chunks(&self) -> usize {
        self.padded_in_layers() / LANES
    }

    /// Length of a plain `[out][in][K][K]` kernel array.
    pub fn plain_kernel_len(&self) -> usize {
        self.out_layers * self.in_layers * self.kernel * self.kernel
    }

    /// Length of a chunked `[out][chunk][K][K][lane]` kernel array.
    pub fn chunked_kernel_len(&self) -> usize {
        self.out_layers * self.kernel * self.kernel * self.padded_in_layers()
    }

    /// Multiply-accumulate count for one output of the given plane size.
    pub fn macs(&self, out_plane: usize) -> usize {
        self.out_layers * out_plane * self.in_layers * self.kernel * self.kernel
    }
}

/// Kernels in their natural `[out][in][row][col]` order, plus biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainWeights {
    spec: ConvSpec,
    kernels: Vec<f32>,
    biases: Vec<f32>,
}

impl PlainWeights {
    pub fn new(spec: ConvSpec, kernels: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if kernels.len() != spec.plain_kernel_len() {
            return Err(Error::WeightSize(format!(
                "plain kernels: expected {}, got {}",
                spec.plain_kernel_len(),
                kernels.len()
            )));
        }
        if biases.len() != spec.out_layers {
            return Err(Error::WeightSize(format!(
                "biases: expected {}, got {}",
                spec.out_layers,
                biases.len()
            )));
        }
        Ok(Self {
            spec,
            kernels,
            biases,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &[f32] {
        &self.kernels
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    #[inline]
    pub fn kernel(&self, m: usize, l: usize, i: usize, j: usize) -> f32 {
        let k = self.spec.kernel;
        self.kernels[((m * self.spec.in_layers + l) * k + i) * k + j]
    }
}

/// A layer's kernels stored pre-reordered for 4-wide access:
/// `[out][in_chunk][row][col][lane]`, padded input lanes zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    spec: ConvSpec,
    kernels: Vec<f32>,
    biases: Vec<f32>,
}

impl WeightBank {
    /// Wraps an already reordered kernel array.
    pub fn from_chunked(spec: ConvSpec, kernels: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if kernels.len() != spec.chunked_kernel_len() {
            return Err(Error::WeightSize(format!(
                "chunked kernels: expected {}, got {}",
                spec.chunked_kernel_len(),
                kernels.len()
            )));
        }
        if biases.len() != spec.out_layers {
            return Err(Error::WeightSize(format!(
                "biases: expected {}, got {}",
                spec.out_layers,
                biases.len()
            )));
        }
        let tail = spec.in_layers % LANES;
        if tail != 0 {
            let chunks = spec.in_chunks();
            let kk = spec.kernel * spec.kernel;
            for m in 0..spec.out_layers {
                for p in 0..kk {
                    let base = ((m * chunks + chunks - 1) * kk + p) * LANES;
                    if kernels[base + tail..base + LANES].iter().any(|&v| v != 0.0) {
                        return Err(Error::WeightSize(format!(
                            "padded kernel lane non-zero in output layer {m}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            spec,
            kernels,
            biases,
        })
    }

    pub fn from_plain(plain: &PlainWeights) -> Self {
        Self {
            spec: plain.spec,
            kernels: crate::modelio::reorder_kernels_offline(&plain.spec, &plain.kernels),
            biases: plain.biases.clone(),
        }
    }

    pub fn to_plain(&self) -> PlainWeights {
        PlainWeights {
            spec: self.spec,
            kernels: crate::modelio::restore_plain_kernels(&self.spec, &self.kernels),
            biases: self.biases.clone(),
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &[f32] {
        &self.kernels
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }
}

/// Number of outputs a work item computes sequentially.
///
/// Valid when `g` divides the output layer count `L` and `L / g` is a
/// multiple of four, so every group of output layers stays chunk aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Granularity(usize);

impl Granularity {
    pub fn new(g: usize, out_layers: usize) -> Result<Self> {
        if is_valid_g(g, out_layers) {
            Ok(Self(g))
        } else {
            Err(Error::InvalidGranularity {
                g,
                layers: out_layers,
            })
        }
    }

    /// Wraps `g` without checking it against a layer count.
    pub(crate) fn unchecked(g: usize) -> Self {
        Self(g)
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn is_valid_g(g: usize, out_layers: usize) -> bool {
    g >= 1 && out_layers % g == 0 && (out_layers / g) % LANES == 0
}

/// All valid granularities for `out_layers`, ascending. Empty when the
/// layer count is not a multiple of four.
pub fn enumerate_valid_g(out_layers: usize) -> Vec<Granularity> {
    (1..=out_layers)
        .filter(|&g| is_valid_g(g, out_layers))
        .map(Granularity)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gs(l: usize) -> Vec<usize> {
        enumerate_valid_g(l).into_iter().map(Granularity::get).collect()
    }

    #[test]
    fn valid_g_sets() {
        assert_eq!(gs(16), vec![1, 2, 4]);
        assert_eq!(gs(64), vec![1, 2, 4, 8, 16]);
        assert_eq!(gs(4), vec![1]);
        assert_eq!(gs(1000), vec![1, 2, 5, 10, 25, 50, 125, 250]);
        assert!(gs(6).is_empty());
        assert!(Granularity::new(3, 64).is_err());
        assert_eq!(Granularity::new(8, 64).unwrap().get(), 8);
    }

    #[test]
    fn output_dims() {
        let c = ConvSpec::new(7, 2, 0, 3, 96);
        assert_eq!(c.output_dim(224), Some(109));
        let c = ConvSpec::new(7, 2, 2, 3, 96);
        assert_eq!(c.output_dim(224), Some(111));
        assert_eq!(ConvSpec::new(3, 1, 0, 1, 1).output_dim(2), None);
        assert_eq!(ConvSpec::new(3, 1, 1, 1, 1).output_dim(2), Some(2));
    }

    #[test]
    fn spec_validation() {
        assert!(ConvSpec::new(0, 1, 0, 1, 1).validate().is_err());
        assert!(ConvSpec::new(1, 0, 0, 1, 1).validate().is_err());
        let err = ConvSpec::new(1, 1, 0, 4, 4)
            .output_shape(Shape3::new(3, 2, 2))
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn bank_size_checks() {
        let spec = ConvSpec::new(1, 1, 0, 3, 1);
        assert!(WeightBank::from_chunked(spec, vec![0.0; 3], vec![0.0]).is_err());
        assert!(WeightBank::from_chunked(spec, vec![1.0, 1.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(WeightBank::from_chunked(spec, vec![1.0, 1.0, 1.0, 0.0], vec![0.0]).is_ok());
        assert!(PlainWeights::new(spec, vec![0.0; 3], vec![]).is_err());
    }
}
