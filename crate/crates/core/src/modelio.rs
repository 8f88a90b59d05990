//! Binary model files with pre-reordered kernels, and PPM image input.
//!
//! The byte layout is described in `docs/model_format.md`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::conv::{ConvSpec, WeightBank};
use crate::layers::{FireSpec, FireWeights, PoolKind, PoolSpec};
use crate::network::{shape_check, Model, NetworkDef, NodeDef, NodeOp, NodeWeights};
use crate::tensor::{Shape3, Tensor3, LANES};

pub const MAGIC: [u8; 4] = *b"VCNN";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u32 = 0;
const KIND_FIRE: u32 = 1;
const KIND_POOL: u32 = 2;
const KIND_SOFTMAX: u32 = 3;

const POOL_MAX: u32 = 0;
const POOL_AVG: u32 = 1;

const MAX_NAME_LEN: usize = 1 << 12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: not a VCNN model file")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("header truncated while reading {0}")]
    TruncatedHeader(&'static str),

    #[error("node `{node}`: unknown node kind {kind}")]
    UnknownNodeKind { node: String, kind: u32 },

    #[error("node `{node}`: unknown pool kind {kind}")]
    UnknownPoolKind { node: String, kind: u32 },

    #[error("node name is not valid UTF-8 or has length {0}")]
    BadName(usize),

    #[error("{count} channel means for {layers} input layers")]
    MeanCount { count: usize, layers: usize },

    #[error("node `{node}`: {reason}")]
    InvalidHyperparameter { node: String, reason: String },

    #[error("shape chain broken: {0}")]
    ShapeChain(String),

    #[error("node `{node}`: shape table says {stored:?}, definition gives {derived:?}")]
    ShapeTableMismatch {
        node: String,
        stored: Shape3,
        derived: Shape3,
    },

    #[error("payload truncated: header declares {declared} bytes, {available} remain")]
    TruncatedPayload { declared: u64, available: u64 },

    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(u64),

    #[error("payload is {declared} bytes but the node list needs {expected}")]
    PayloadSizeMismatch { declared: u64, expected: u64 },

    #[error("node `{0}`: non-finite weight")]
    NonFiniteWeight(String),

    #[error("node `{0}`: padded kernel lane is non-zero")]
    PaddingNotZero(String),
}

/// Reorders plain `[out][in][K][K]` kernels into the chunked
/// `[out][in_chunk][K][K][lane]` order, zero filling padded lanes.
pub fn reorder_kernels_offline(spec: &ConvSpec, plain: &[f32]) -> Vec<f32> {
    assert_eq!(plain.len(), spec.plain_kernel_len(), "plain kernel length");
    let (k, n_in, chunks) = (spec.kernel, spec.in_layers, spec.in_chunks());
    let kk = k * k;
    let mut out = vec![0.0f32; spec.chunked_kernel_len()];
    for m in 0..spec.out_layers {
        for l in 0..n_in {
            let (c, lane) = (l / LANES, l % LANES);
            for p in 0..kk {
                out[((m * chunks + c) * kk + p) * LANES + lane] = plain[(m * n_in + l) * kk + p];
            }
        }
    }
    out
}

/// Inverse of [`reorder_kernels_offline`]; padded lanes are dropped.
pub fn restore_plain_kernels(spec: &ConvSpec, chunked: &[f32]) -> Vec<f32> {
    assert_eq!(chunked.len(), spec.chunked_kernel_len(), "chunked kernel length");
    let (k, n_in, chunks) = (spec.kernel, spec.in_layers, spec.in_chunks());
    let kk = k * k;
    let mut out = vec![0.0f32; spec.plain_kernel_len()];
    for m in 0..spec.out_layers {
        for l in 0..n_in {
            let (c, lane) = (l / LANES, l % LANES);
            for p in 0..kk {
                out[(m * n_in + l) * kk + p] = chunked[((m * chunks + c) * kk + p) * LANES + lane];
            }
        }
    }
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn conv(&mut self, s: &ConvSpec) {
        for v in [s.kernel, s.stride, s.pad, s.in_layers, s.out_layers] {
            self.u32(v);
        }
    }

    fn shape(&mut self, s: Shape3) {
        for v in [s.layers, s.height, s.width] {
            self.u32(v);
        }
    }
}

/// Serializes a model. Loading the result reproduces it bit for bit.
pub fn write_model(model: &Model) -> Vec<u8> {
    let def = model.def();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(def.name.len());
    w.0.extend_from_slice(def.name.as_bytes());
    w.shape(def.input);
    w.u32(def.mean.len());
    w.f32s(&def.mean);
    w.u32(def.nodes.len());
    for node in &def.nodes {
        w.u32(node.name.len());
        w.0.extend_from_slice(node.name.as_bytes());
        match &node.op {
            NodeOp::Conv { spec, relu } => {
                w.u32(KIND_CONV as usize);
                w.conv(spec);
                w.u32(*relu as usize);
            }
            NodeOp::Fire(f) => {
                w.u32(KIND_FIRE as usize);
                for (_, s) in f.convs() {
                    w.conv(&s);
                }
            }
            NodeOp::Pool(p) => {
                w.u32(KIND_POOL as usize);
                w.u32(match p.kind {
                    PoolKind::Max => POOL_MAX,
                    PoolKind::Avg => POOL_AVG,
                } as usize);
                w.u32(p.window);
                w.u32(p.stride);
            }
            NodeOp::Softmax => w.u32(KIND_SOFTMAX as usize),
        }
    }
    for (_, shape) in shape_check(def).expect("model definitions are shape checked") {
        w.shape(shape);
    }
    let mut payload = Writer(Vec::new());
    for (_, bank) in model.banks() {
        payload.f32s(bank.kernels());
        payload.f32s(bank.biases());
    }
    w.0.extend_from_slice(&(payload.0.len() as u64).to_le_bytes());
    w.0.extend_from_slice(&payload.0);
    w.0
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    parse_model(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ModelError::TruncatedHeader(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, ModelError> {
        self.u32(what).map(|v| v as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, ModelError> {
        let raw = self.take(n.checked_mul(4).ok_or(ModelError::TruncatedHeader(what))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn conv(&mut self) -> Result<ConvSpec, ModelError> {
        let mut v = [0usize; 5];
        for slot in &mut v {
            *slot = self.usize("convolution hyperparameters")?;
        }
        Ok(ConvSpec::new(v[0], v[1], v[2], v[3], v[4]))
    }

    fn shape(&mut self, what: &'static str) -> Result<Shape3, ModelError> {
        Ok(Shape3::new(self.usize(what)?, self.usize(what)?, self.usize(what)?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn hyper(node: &str, e: crate::Error) -> ModelError {
    ModelError::InvalidHyperparameter {
        node: node.to_string(),
        reason: e.to_string(),
    }
}

fn read_name(r: &mut Reader, allow_empty: bool) -> Result<String, ModelError> {
    let len = r.usize("name length")?;
    if (len == 0 && !allow_empty) || len > MAX_NAME_LEN {
        return Err(ModelError::BadName(len));
    }
    Ok(std::str::from_utf8(r.take(len, "name")?)
        .map_err(|_| ModelError::BadName(len))?
        .to_string())
}

fn read_node(r: &mut Reader) -> Result<NodeDef, ModelError> {
    let name = read_name(r, false)?;
    let kind = r.u32("node kind")?;
    let op = match kind {
        KIND_CONV => {
            let spec = r.conv()?;
            let relu = match r.u32("relu flag")? {
                0 => false,
                1 => true,
                v => {
                    return Err(ModelError::InvalidHyperparameter {
                        node: name,
                        reason: format!("relu flag {v}"),
                    })
                }
            };
            spec.validate().map_err(|e| hyper(&name, e))?;
            NodeOp::Conv { spec, relu }
        }
        KIND_FIRE => {
            let (squeeze, expand1x1, expand3x3) = (r.conv()?, r.conv()?, r.conv()?);
            for s in [squeeze, expand1x1, expand3x3] {
                s.validate().map_err(|e| hyper(&name, e))?;
            }
            NodeOp::Fire(FireSpec {
                squeeze,
                expand1x1,
                expand3x3,
            })
        }
        KIND_POOL => {
            let kind = match r.u32("pool kind")? {
                POOL_MAX => PoolKind::Max,
                POOL_AVG => PoolKind::Avg,
                k => return Err(ModelError::UnknownPoolKind { node: name, kind: k }),
            };
            let spec = PoolSpec::new(kind, r.usize("pool window")?, r.usize("pool stride")?);
            spec.validate().map_err(|e| hyper(&name, e))?;
            NodeOp::Pool(spec)
        }
        KIND_SOFTMAX => NodeOp::Softmax,
        k => return Err(ModelError::UnknownNodeKind { node: name, kind: k }),
    };
    Ok(NodeDef { name, op })
}

fn read_bank(r: &mut Reader, node: &str, spec: ConvSpec) -> Result<WeightBank, ModelError> {
    let kernels = r.f32s(spec.chunked_kernel_len(), "payload")?;
    let biases = r.f32s(spec.out_layers, "payload")?;
    if kernels.iter().chain(&biases).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteWeight(node.to_string()));
    }
    WeightBank::from_chunked(spec, kernels, biases)
        .map_err(|_| ModelError::PaddingNotZero(node.to_string()))
}

/// Parses and fully validates a model file image.
pub fn parse_model(bytes: &[u8]) -> Result<Model, ModelError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let name = read_name(&mut r, true)?;
    let input = r.shape("input shape")?;
    let mean_count = r.usize("mean count")?;
    if mean_count != input.layers {
        return Err(ModelError::MeanCount {
            count: mean_count,
            layers: input.layers,
        });
    }
    let mean = r.f32s(mean_count, "channel means")?;
    let node_count = r.usize("node count")?;
    // Every node occupies at least eight header bytes.
    if node_count > r.remaining() / 8 {
        return Err(ModelError::TruncatedHeader("node list"));
    }
    let nodes = (0..node_count)
        .map(|_| read_node(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    let def = NetworkDef {
        name,
        input,
        mean,
        nodes,
    };
    let shapes = shape_check(&def).map_err(|e| ModelError::ShapeChain(e.to_string()))?;
    for (name, derived) in shapes {
        let stored = r.shape("shape table")?;
        if stored != derived {
            return Err(ModelError::ShapeTableMismatch {
                node: name,
                stored,
                derived,
            });
        }
    }

    let declared = r.u64("payload length")?;
    let available = r.remaining() as u64;
    if declared > available {
        return Err(ModelError::TruncatedPayload { declared, available });
    }
    if declared < available {
        return Err(ModelError::TrailingBytes(available - declared));
    }
    let expected: u64 = def
        .nodes
        .iter()
        .flat_map(|n| match n.op {
            NodeOp::Conv { spec, .. } => vec![spec],
            NodeOp::Fire(f) => f.convs().map(|(_, s)| s).to_vec(),
            _ => vec![],
        })
        .map(|s| 4 * (s.chunked_kernel_len() + s.out_layers) as u64)
        .sum();
    if declared != expected {
        return Err(ModelError::PayloadSizeMismatch { declared, expected });
    }

    let mut weights = Vec::with_capacity(def.nodes.len());
    for node in &def.nodes {
        weights.push(match node.op {
            NodeOp::Conv { spec, .. } => NodeWeights::Conv(read_bank(&mut r, &node.name, spec)?),
            NodeOp::Fire(f) => NodeWeights::Fire(FireWeights {
                squeeze: read_bank(&mut r, &node.name, f.squeeze)?,
                expand1x1: read_bank(&mut r, &node.name, f.expand1x1)?,
                expand3x3: read_bank(&mut r, &node.name, f.expand3x3)?,
            }),
            _ => NodeWeights::None,
        });
    }
    Model::new(def, weights).map_err(|e| ModelError::ShapeChain(e.to_string()))
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed PPM: {0}")]
    Malformed(String),

    #[error("image is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    Dimensions {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("{0} channel means supplied, PPM images have 3 channels")]
    MeanCount(usize),
}

/// A decoded binary PPM (P6) image with 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row by row.
    pub pixels: Vec<u8>,
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(ImageError::Malformed("header ends early".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Malformed(format!("expected a number at byte {start}")))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    if !bytes.starts_with(b"P6") {
        return Err(ImageError::Malformed("missing P6 signature".into()));
    }
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Malformed(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(ImageError::Malformed("no separator before pixel data".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let data = &bytes[pos..];
    if data.len() != need {
        return Err(ImageError::Malformed(format!(
            "{} pixel bytes for {width}x{height}, expected {need}",
            data.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: data.to_vec(),
    })
}

pub fn write_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Converts a decoded image into a row-major `3 x H x W` tensor of raw
/// sample values minus the per-channel means.
pub fn image_to_tensor(
    image: &RgbImage,
    mean: &[f32],
    height: usize,
    width: usize,
) -> Result<Tensor3, ImageError> {
    if mean.len() != 3 {
        return Err(ImageError::MeanCount(mean.len()));
    }
    if (image.width, image.height) != (width, height) {
        return Err(ImageError::Dimensions {
            expected_w: width,
            expected_h: height,
            actual_w: image.width,
            actual_h: image.height,
        });
    }
    let shape = Shape3::new(3, height, width);
    Ok(Tensor3::from_fn(shape, |c| {
        image.pixels[(c.h * width + c.w) * 3 + c.m] as f32 - mean[c.m]
    }))
}

pub fn load_image(
    path: impl AsRef<Path>,
    mean: &[f32],
    height: usize,
    width: usize,
) -> Result<Tensor3, ImageError> {
    image_to_tensor(&parse_ppm(&fs::read(path)?)?, mean, height, width)
}

/// Loads an image sized for `def`'s input, using its channel means.
pub fn load_image_for(path: impl AsRef<Path>, def: &NetworkDef) -> Result<Tensor3, ImageError> {
    load_image(path, &def.mean, def.input.height, def.input.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_kernel_gets_padded() {
        let spec = ConvSpec::new(1, 1, 0, 1, 1);
        assert_eq!(reorder_kernels_offline(&spec, &[2.5]), vec![2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn three_input_kernels_gain_zero_lane() {
        let spec = ConvSpec::new(1, 1, 0, 3, 2);
        let plain = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let got = reorder_kernels_offline(&spec, &plain);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]);
        assert_eq!(restore_plain_kernels(&spec, &got), plain);
    }

    #[test]
    fn reorder_matches_brute_force_index() {
        let spec = ConvSpec::new(3, 1, 1, 8, 2);
        let plain: Vec<f32> = (0..spec.plain_kernel_len()).map(|v| v as f32).collect();
        let got = reorder_kernels_offline(&spec, &plain);
        for m in 0..2 {
            for l in 0..8 {
                for i in 0..3 {
                    for j in 0..3 {
                        let src = ((m * 8 + l) * 3 + i) * 3 + j;
                        let dst = (((m * 2 + l / 4) * 3 + i) * 3 + j) * 4 + l % 4;
                        assert_eq!(got[dst], plain[src]);
                    }
                }
            }
        }
    }

    #[test]
    fn solid_image_minus_its_mean_is_zero() {
        let img = RgbImage {
            width: 4,
            height: 2,
            pixels: [10u8, 20, 30].repeat(8),
        };
        let t = image_to_tensor(&parse_ppm(&write_ppm(&img)).unwrap(), &[10.0, 20.0, 30.0], 2, 4)
            .unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        let t = image_to_tensor(&img, &[0.0; 3], 1, 2).unwrap();
        assert_eq!(t.get(0, 0, 1), 4.0);
        assert_eq!(t.get(2, 0, 0), 3.0);
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let img = RgbImage {
            width: 3,
            height: 3,
            pixels: vec![0; 27],
        };
        assert!(matches!(
            image_to_tensor(&img, &[0.0; 3], 224, 224),
            Err(ImageError::Dimensions { .. })
        ));
        assert!(matches!(parse_ppm(b"P5 1 1 255 x"), Err(ImageError::Malformed(_))));
        assert!(matches!(parse_ppm(b"P6 1 1 255 xy"), Err(ImageError::Malformed(_))));
    }
}
