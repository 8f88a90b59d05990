//! Seeded random weights and inputs for tests, tuning and benchmarks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::conv::{ConvSpec, PlainWeights, WeightBank};
use crate::error::Result;
use crate::layers::FireWeights;
use crate::network::{Model, NetworkDef, NodeOp, NodeWeights};
use crate::tensor::{Shape3, Tensor3};

/// Row-major tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: Shape3, seed: u64, scale: f32) -> Tensor3 {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor3::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// He-initialised kernels with small uniform biases.
pub fn random_plain_weights(spec: ConvSpec, rng: &mut impl Rng) -> PlainWeights {
    let fan_in = (spec.in_layers * spec.kernel * spec.kernel).max(1) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std dev");
    let kernels = (0..spec.plain_kernel_len()).map(|_| normal.sample(rng)).collect();
    let biases = (0..spec.out_layers)
        .map(|_| rng.random_range(-0.05f32..0.05))
        .collect();
    PlainWeights::new(spec, kernels, biases).expect("sizes derived from the conv shape")
}

pub fn random_bank(spec: ConvSpec, rng: &mut impl Rng) -> WeightBank {
    WeightBank::from_plain(&random_plain_weights(spec, rng))
}

/// A model over `def` with seeded random weights.
pub fn random_model(def: NetworkDef, seed: u64) -> Result<Model> {
    let mut rng = StdRng::seed_from_u64(seed);
    let weights = def
        .nodes
        .iter()
        .map(|n| match n.op {
            NodeOp::Conv { spec, .. } => NodeWeights::Conv(random_bank(spec, &mut rng)),
            NodeOp::Fire(f) => NodeWeights::Fire(FireWeights {
                squeeze: random_bank(f.squeeze, &mut rng),
                expand1x1: random_bank(f.expand1x1, &mut rng),
                expand3x3: random_bank(f.expand3x3, &mut rng),
            }),
            NodeOp::Pool(_) | NodeOp::Softmax => NodeWeights::None,
        })
        .collect();
    Model::new(def, weights)
}

/// An input for `def` resembling a mean-subtracted 8-bit image.
pub fn random_input(def: &NetworkDef, seed: u64) -> Tensor3 {
    random_tensor(def.input, seed, 128.0)
}
