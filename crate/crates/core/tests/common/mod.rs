//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use vcnn::conv::{ConvSpec, PlainWeights, WeightBank};
use vcnn::layers::{PoolKind, PoolSpec};
use vcnn::network::{NodeDef, NodeOp, NodeWeights};
use vcnn::{Model, NetworkDef, Shape3};

/// Byte offsets inside the encoded [`micro_model`].
pub mod offsets {
    pub const VERSION: usize = 4;
    pub const MEAN_COUNT: usize = 29;
    pub const NODE0_NAME: usize = 53;
    pub const NODE0_KIND: usize = 55;
    pub const NODE0_STRIDE: usize = 63;
    pub const NODE0_IN_LAYERS: usize = 71;
    pub const NODE1_POOL_KIND: usize = 92;
    pub const SHAPE_TABLE: usize = 116;
    pub const PAYLOAD_LEN: usize = 152;
    pub const PAYLOAD: usize = 160;
    pub const FILE_LEN: usize = 752;
}

/// conv 3->4 (3x3, pad 1, relu) on 3x4x4, 2x2 max pool, softmax. Weights
/// follow a fixed arithmetic pattern.
pub fn micro_model() -> Model {
    let def = NetworkDef {
        name: "micro".into(),
        input: Shape3::new(3, 4, 4),
        mean: vec![0.5, 0.25, 0.125],
        nodes: vec![
            NodeDef {
                name: "c1".into(),
                op: NodeOp::Conv {
                    spec: ConvSpec::new(3, 1, 1, 3, 4),
                    relu: true,
                },
            },
            NodeDef {
                name: "p".into(),
                op: NodeOp::Pool(PoolSpec::new(PoolKind::Max, 2, 2)),
            },
            NodeDef {
                name: "prob".into(),
                op: NodeOp::Softmax,
            },
        ],
    };
    let spec = ConvSpec::new(3, 1, 1, 3, 4);
    let kernels = (0..spec.plain_kernel_len())
        .map(|i| (i as f32 - 54.0) * 0.015625)
        .collect();
    let biases = vec![0.5, -0.25, 0.0, 1.0];
    let plain = PlainWeights::new(spec, kernels, biases).unwrap();
    let weights = vec![
        NodeWeights::Conv(WeightBank::from_plain(&plain)),
        NodeWeights::None,
        NodeWeights::None,
    ];
    Model::new(def, weights).unwrap()
}

pub fn put_u32(bytes: &mut [u8], at: usize, v: u32) {
    bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
