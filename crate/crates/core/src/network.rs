//! Declarative network definitions and the forward-pass executors.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::arith::ArithMode;
use crate::conv::{conv_granular, conv_sequential, is_valid_g, ConvSpec, Granularity, PlainWeights, WeightBank};
use crate::error::{Error, Result};
use crate::layers::{
    fire_forward, fire_forward_sequential, pool2d, pool2d_scalar, relu_inplace, softmax,
    FireGranularity, FireSpec, FireWeights, PoolKind, PoolSpec,
};
use crate::pool::WorkerPool;
use crate::tensor::{reorder_to_chunked4, Layout, Shape3, Tensor3};

const SQUEEZENET_V1_0: &str = include_str!("../configs/squeezenet_v1_0.toml");

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeOp {
    Conv { spec: ConvSpec, relu: bool },
    Fire(FireSpec),
    Pool(PoolSpec),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDef {
    pub name: String,
    pub op: NodeOp,
}

/// Ordered layer graph with its declared input shape and the per-channel
/// means subtracted from raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub name: String,
    pub input: Shape3,
    pub mean: Vec<f32>,
    pub nodes: Vec<NodeDef>,
}

#[derive(Deserialize)]
struct NetworkConfig {
    name: String,
    input: Shape3,
    #[serde(default)]
    mean: Vec<f32>,
    #[serde(default)]
    node: Vec<NodeConfig>,
}

#[derive(Deserialize)]
struct NodeConfig {
    name: String,
    #[serde(flatten)]
    op: OpConfig,
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum OpConfig {
    Conv {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
        in_layers: usize,
        out_layers: usize,
        #[serde(default)]
        relu: bool,
    },
    Fire {
        in_layers: usize,
        squeeze: usize,
        expand1x1: usize,
        expand3x3: usize,
    },
    Maxpool {
        window: usize,
        stride: usize,
    },
    Avgpool {
        window: usize,
        stride: usize,
    },
    Softmax,
}

impl NetworkDef {
    /// Parses a TOML topology description.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig =
            toml::from_str(text).map_err(|e| Error::Network(e.to_string()))?;
        let nodes = cfg
            .node
            .into_iter()
            .map(|n| {
                let op = match n.op {
                    OpConfig::Conv {
                        kernel,
                        stride,
                        pad,
                        in_layers,
                        out_layers,
                        relu,
                    } => NodeOp::Conv {
                        spec: ConvSpec::new(kernel, stride, pad, in_layers, out_layers),
                        relu,
                    },
                    OpConfig::Fire {
                        in_layers,
                        squeeze,
                        expand1x1,
                        expand3x3,
                    } => NodeOp::Fire(FireSpec::standard(in_layers, squeeze, expand1x1, expand3x3)),
                    OpConfig::Maxpool { window, stride } => {
                        NodeOp::Pool(PoolSpec::new(PoolKind::Max, window, stride))
                    }
                    OpConfig::Avgpool { window, stride } => {
                        NodeOp::Pool(PoolSpec::new(PoolKind::Avg, window, stride))
                    }
                    OpConfig::Softmax => NodeOp::Softmax,
                };
                NodeDef { name: n.name, op }
            })
            .collect();
        let mean = if cfg.mean.is_empty() {
            vec![0.0; cfg.input.layers]
        } else {
            cfg.mean
        };
        Ok(Self {
            name: cfg.name,
            input: cfg.input,
            mean,
            nodes,
        })
    }

    /// SqueezeNet v1.0 for 3x224x224 input, from the bundled topology file.
    pub fn squeezenet_v1_0() -> Self {
        Self::from_toml(SQUEEZENET_V1_0).expect("bundled SqueezeNet topology parses")
    }

    /// Every convolution in execution order, with the shape it consumes.
    /// Fire sub-convolutions are named `<fire>/squeeze1x1`,
    /// `<fire>/expand1x1` and `<fire>/expand3x3`.
    pub fn conv_sites(&self) -> Result<Vec<ConvSite>> {
        let shapes = shape_check(self)?;
        let mut sites = Vec::new();
        let mut current = self.input;
        for (node, (_, out)) in self.nodes.iter().zip(&shapes) {
            match node.op {
                NodeOp::Conv { spec, .. } => sites.push(ConvSite {
                    id: node.name.clone(),
                    spec,
                    input: current,
                }),
                NodeOp::Fire(f) => {
                    let squeezed = f.squeeze.output_shape(current)?;
                    for (suffix, spec) in f.convs() {
                        sites.push(ConvSite {
                            id: fire_conv_id(&node.name, suffix),
                            spec,
                            input: if suffix == "squeeze1x1" { current } else { squeezed },
                        });
                    }
                }
                _ => {}
            }
            current = *out;
        }
        Ok(sites)
    }
}

pub fn fire_conv_id(fire: &str, part: &str) -> String {
    format!("{fire}/{part}")
}

/// A convolution inside a network: its id, hyperparameters and input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSite {
    pub id: String,
    pub spec: ConvSpec,
    pub input: Shape3,
}

/// Static shape propagation: the output shape of every node, or the first
/// node whose input does not fit.
pub fn shape_check(def: &NetworkDef) -> Result<Vec<(String, Shape3)>> {
    let mut current = def.input;
    let mut out = Vec::with_capacity(def.nodes.len());
    for (i, node) in def.nodes.iter().enumerate() {
        let next = match node.op {
            NodeOp::Conv { spec, .. } => spec.output_shape(current),
            NodeOp::Fire(f) => f.output_shape(current),
            NodeOp::Pool(p) => p.output_shape(current),
            NodeOp::Softmax if i + 1 != def.nodes.len() => Err(Error::Network(
                "softmax must be the final node".into(),
            )),
            NodeOp::Softmax => Ok(Shape3::new(current.volume(), 1, 1)),
        }
        .map_err(|e| e.at_node(&node.name))?;
        out.push((node.name.clone(), next));
        current = next;
    }
    Ok(out)
}

/// Chosen granularity per convolution id. Convolutions without an entry run
/// with g = 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GranularityPlan {
    choices: BTreeMap<String, Granularity>,
}

impl GranularityPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, id: impl Into<String>, g: Granularity) {
        self.choices.insert(id.into(), g);
    }

    pub fn get(&self, id: &str) -> Granularity {
        self.choices
            .get(id)
            .copied()
            .unwrap_or(Granularity::unchecked(1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Granularity)> {
        self.choices.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    /// Checks every entry names a convolution of `def` and is valid for its
    /// output layer count.
    pub fn validate(&self, def: &NetworkDef) -> Result<()> {
        let sites = def.conv_sites()?;
        for (id, g) in &self.choices {
            let site = sites
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::UnknownPlanNode(id.clone()))?;
            if !is_valid_g(g.get(), site.spec.out_layers) {
                return Err(Error::InvalidGranularity {
                    g: g.get(),
                    layers: site.spec.out_layers,
                }
                .at_node(id));
            }
        }
        Ok(())
    }

    fn fire(&self, name: &str) -> FireGranularity {
        FireGranularity {
            squeeze: self.get(&fire_conv_id(name, "squeeze1x1")),
            expand1x1: self.get(&fire_conv_id(name, "expand1x1")),
            expand3x3: self.get(&fire_conv_id(name, "expand3x3")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeWeights {
    None,
    Conv(WeightBank),
    Fire(FireWeights),
}

/// A network definition with weights for every convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    def: NetworkDef,
    weights: Vec<NodeWeights>,
}

impl Model {
    pub fn new(def: NetworkDef, weights: Vec<NodeWeights>) -> Result<Self> {
        shape_check(&def)?;
        if def.mean.len() != def.input.layers {
            return Err(Error::Network(format!(
                "{} channel means for {} input layers",
                def.mean.len(),
                def.input.layers
            )));
        }
        if weights.len() != def.nodes.len() {
            return Err(Error::Network(format!(
                "{} weight entries for {} nodes",
                weights.len(),
                def.nodes.len()
            )));
        }
        for (node, w) in def.nodes.iter().zip(&weights) {
            let ok = match (&node.op, w) {
                (NodeOp::Conv { spec, .. }, NodeWeights::Conv(b)) => b.spec() == spec,
                (NodeOp::Fire(f), NodeWeights::Fire(fw)) => fw.spec() == *f,
                (NodeOp::Pool(_) | NodeOp::Softmax, NodeWeights::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Network(format!(
                    "weights for `{}` do not match its definition",
                    node.name
                )));
            }
        }
        Ok(Self { def, weights })
    }

    pub fn def(&self) -> &NetworkDef {
        &self.def
    }

    pub fn weights(&self) -> &[NodeWeights] {
        &self.weights
    }

    /// Weight banks of every convolution in execution order, keyed like
    /// [`NetworkDef::conv_sites`].
    pub fn banks(&self) -> Vec<(String, &WeightBank)> {
        let mut out = Vec::new();
        for (node, w) in self.def.nodes.iter().zip(&self.weights) {
            match w {
                NodeWeights::Conv(b) => out.push((node.name.clone(), b)),
                NodeWeights::Fire(f) => {
                    for ((suffix, _), bank) in f.spec().convs().iter().zip(f.banks()) {
                        out.push((fire_conv_id(&node.name, suffix), bank));
                    }
                }
                NodeWeights::None => {}
            }
        }
        out
    }

    pub fn bank(&self, id: &str) -> Option<&WeightBank> {
        self.banks().into_iter().find(|(k, _)| k == id).map(|(_, b)| b)
    }

    /// Plain-order weights for the sequential executor.
    pub fn to_sequential(&self) -> SequentialModel {
        let weights = self
            .weights
            .iter()
            .map(|w| match w {
                NodeWeights::None => PlainNodeWeights::None,
                NodeWeights::Conv(b) => PlainNodeWeights::Conv(b.to_plain()),
                NodeWeights::Fire(f) => PlainNodeWeights::Fire(Box::new(f.to_plain())),
            })
            .collect();
        SequentialModel {
            def: self.def.clone(),
            weights,
        }
    }
}

#[derive(Debug, Clone)]
enum PlainNodeWeights {
    None,
    Conv(PlainWeights),
    Fire(Box<[PlainWeights; 3]>),
}

/// A model unpacked into plain kernel order for [`forward_sequential`].
#[derive(Debug, Clone)]
pub struct SequentialModel {
    def: NetworkDef,
    weights: Vec<PlainNodeWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTiming {
    pub name: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Values entering the softmax node (or the final tensor when there is
    /// none), in row-major order.
    pub logits: Vec<f32>,
    pub probabilities: Option<Vec<f32>>,
    pub timings: Vec<NodeTiming>,
    pub total: Duration,
}

impl ForwardOutput {
    /// Index of the largest probability (or logit).
    pub fn argmax(&self) -> Option<usize> {
        let v = self.probabilities.as_ref().unwrap_or(&self.logits);
        argmax(v)
    }

    /// The `k` most probable classes, best first.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f32)> {
        let v = self.probabilities.as_ref().unwrap_or(&self.logits);
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, v[i])).collect()
    }
}

pub fn argmax(v: &[f32]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f32)>, (i, &x)| match best {
            Some((_, bx)) if bx >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

fn check_input(def: &NetworkDef, input: &Tensor3) -> Result<()> {
    if input.shape() != def.input {
        return Err(Error::ShapeMismatch {
            expected: def.input,
            actual: input.shape(),
        });
    }
    Ok(())
}

/// Runs the vectorized executor. A row-major input is reordered once before
/// the first node (and that time is charged to it); every layer after that
/// stays chunked-4.
pub fn forward(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    plan: &GranularityPlan,
    mode: ArithMode,
) -> Result<ForwardOutput> {
    let def = &model.def;
    check_input(def, input)?;
    let start = Instant::now();
    let mut timings = Vec::with_capacity(def.nodes.len());
    let mut lap = Instant::now();
    let mut current = match input.layout() {
        Layout::RowMajor => reorder_to_chunked4(input),
        Layout::Chunked4 => input.clone(),
    };
    let mut probabilities = None;
    let mut logits = None;
    for (node, weights) in def.nodes.iter().zip(&model.weights) {
        let step = || -> Result<Option<Tensor3>> {
            Ok(Some(match (&node.op, weights) {
                (NodeOp::Conv { relu, .. }, NodeWeights::Conv(bank)) => {
                    let mut out = conv_granular(pool, &current, bank, plan.get(&node.name), mode)?;
                    if *relu {
                        relu_inplace(&mut out);
                    }
                    out
                }
                (NodeOp::Fire(_), NodeWeights::Fire(fw)) => {
                    fire_forward(pool, &current, fw, plan.fire(&node.name), mode)?
                }
                (NodeOp::Pool(spec), _) => pool2d(pool, &current, *spec)?,
                (NodeOp::Softmax, _) => return Ok(None),
                _ => return Err(Error::Network("weights do not match node".into())),
            }))
        };
        match step().map_err(|e| e.at_node(&node.name))? {
            Some(next) => current = next,
            None => {
                let l = current.to_row_major_vec();
                probabilities = Some(softmax(&l));
                logits = Some(l);
            }
        }
        timings.push(NodeTiming {
            name: node.name.clone(),
            elapsed: lap.elapsed(),
        });
        lap = Instant::now();
    }
    Ok(ForwardOutput {
        logits: logits.unwrap_or_else(|| current.to_row_major_vec()),
        probabilities,
        timings,
        total: start.elapsed(),
    })
}

/// Single-threaded row-major executor built on the sequential oracle.
pub fn forward_sequential(model: &SequentialModel, input: &Tensor3) -> Result<ForwardOutput> {
    let def = &model.def;
    check_input(def, input)?;
    let start = Instant::now();
    let mut timings = Vec::with_capacity(def.nodes.len());
    let mut lap = Instant::now();
    let mut current = match input.layout() {
        Layout::RowMajor => input.clone(),
        Layout::Chunked4 => crate::tensor::reorder_from_chunked4(input),
    };
    let mut probabilities = None;
    let mut logits = None;
    for (node, weights) in def.nodes.iter().zip(&model.weights) {
        let step = || -> Result<Option<Tensor3>> {
            Ok(Some(match (&node.op, weights) {
                (NodeOp::Conv { relu, .. }, PlainNodeWeights::Conv(w)) => {
                    let mut out = conv_sequential(&current, w)?;
                    if *relu {
                        relu_inplace(&mut out);
                    }
                    out
                }
                (NodeOp::Fire(_), PlainNodeWeights::Fire(w)) => fire_forward_sequential(&current, w)?,
                (NodeOp::Pool(spec), _) => pool2d_scalar(&current, *spec)?,
                (NodeOp::Softmax, _) => return Ok(None),
                _ => return Err(Error::Network("weights do not match node".into())),
            }))
        };
        match step().map_err(|e| e.at_node(&node.name))? {
            Some(next) => current = next,
            None => {
                let l = current.to_row_major_vec();
                probabilities = Some(softmax(&l));
                logits = Some(l);
            }
        }
        timings.push(NodeTiming {
            name: node.name.clone(),
            elapsed: lap.elapsed(),
        });
        lap = Instant::now();
    }
    Ok(ForwardOutput {
        logits: logits.unwrap_or_else(|| current.to_row_major_vec()),
        probabilities,
        timings,
        total: start.elapsed(),
    })
}

/// The actual tensor each convolution consumes when `input` flows through
/// the model, keyed like [`NetworkDef::conv_sites`]. Tensors are chunked-4.
pub fn conv_site_inputs(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
) -> Result<Vec<(String, Tensor3)>> {
    let def = &model.def;
    check_input(def, input)?;
    let mode = ArithMode::Strict;
    let one = Granularity::unchecked(1);
    let mut current = match input.layout() {
        Layout::RowMajor => reorder_to_chunked4(input),
        Layout::Chunked4 => input.clone(),
    };
    let mut out = Vec::new();
    for (node, weights) in def.nodes.iter().zip(&model.weights) {
        let step = |out: &mut Vec<(String, Tensor3)>| -> Result<Option<Tensor3>> {
            Ok(Some(match (&node.op, weights) {
                (NodeOp::Conv { relu, .. }, NodeWeights::Conv(bank)) => {
                    out.push((node.name.clone(), current.clone()));
                    let mut t = conv_granular(pool, &current, bank, one, mode)?;
                    if *relu {
                        relu_inplace(&mut t);
                    }
                    t
                }
                (NodeOp::Fire(_), NodeWeights::Fire(fw)) => {
                    let mut squeezed = conv_granular(pool, &current, &fw.squeeze, one, mode)?;
                    relu_inplace(&mut squeezed);
                    out.push((fire_conv_id(&node.name, "squeeze1x1"), current.clone()));
                    out.push((fire_conv_id(&node.name, "expand1x1"), squeezed.clone()));
                    out.push((fire_conv_id(&node.name, "expand3x3"), squeezed));
                    fire_forward(pool, &current, fw, FireGranularity::default(), mode)?
                }
                (NodeOp::Pool(spec), _) => pool2d(pool, &current, *spec)?,
                (NodeOp::Softmax, _) => return Ok(None),
                _ => return Err(Error::Network("weights do not match node".into())),
            }))
        };
        if let Some(next) = step(&mut out).map_err(|e| e.at_node(&node.name))? {
            current = next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeezenet_shape_chain() {
        let def = NetworkDef::squeezenet_v1_0();
        let shapes: BTreeMap<_, _> = shape_check(&def).unwrap().into_iter().collect();
        assert_eq!(shapes["conv1"], Shape3::new(96, 111, 111));
        assert_eq!(shapes["pool1"], Shape3::new(96, 55, 55));
        assert_eq!(shapes["fire4"], Shape3::new(256, 55, 55));
        assert_eq!(shapes["pool4"], Shape3::new(256, 27, 27));
        assert_eq!(shapes["pool8"], Shape3::new(512, 13, 13));
        assert_eq!(shapes["conv10"], Shape3::new(1000, 13, 13));
        assert_eq!(shapes["pool10"], Shape3::new(1000, 1, 1));
        assert_eq!(shapes["prob"], Shape3::new(1000, 1, 1));
        assert_eq!(def.conv_sites().unwrap().len(), 26);
    }

    #[test]
    fn node_counts() {
        let def = NetworkDef::squeezenet_v1_0();
        let count = |f: fn(&NodeOp) -> bool| def.nodes.iter().filter(|n| f(&n.op)).count();
        assert_eq!(count(|o| matches!(o, NodeOp::Conv { .. })), 2);
        assert_eq!(count(|o| matches!(o, NodeOp::Fire(_))), 8);
        assert_eq!(count(|o| matches!(o, NodeOp::Pool(p) if p.kind == PoolKind::Max)), 3);
        assert_eq!(count(|o| matches!(o, NodeOp::Pool(p) if p.kind == PoolKind::Avg)), 1);
        assert_eq!(count(|o| matches!(o, NodeOp::Softmax)), 1);
    }

    #[test]
    fn empty_network_has_no_shapes() {
        let def = NetworkDef::from_toml("name = \"empty\"\ninput = { layers = 3, height = 4, width = 4 }\n").unwrap();
        assert!(shape_check(&def).unwrap().is_empty());
        assert_eq!(def.mean, vec![0.0; 3]);
    }

    #[test]
    fn first_bad_node_is_reported() {
        let text = r#"
            name = "bad"
            input = { layers = 4, height = 8, width = 8 }
            [[node]]
            name = "a"
            op = "conv"
            kernel = 3
            stride = 1
            in_layers = 4
            out_layers = 8
            [[node]]
            name = "b"
            op = "conv"
            kernel = 1
            stride = 1
            in_layers = 5
            out_layers = 8
        "#;
        let def = NetworkDef::from_toml(text).unwrap();
        match shape_check(&def) {
            Err(Error::Node { node, .. }) => assert_eq!(node, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_must_be_last() {
        let text = r#"
            name = "bad"
            input = { layers = 4, height = 2, width = 2 }
            [[node]]
            name = "s"
            op = "softmax"
            [[node]]
            name = "p"
            op = "maxpool"
            window = 1
            stride = 1
        "#;
        assert!(shape_check(&NetworkDef::from_toml(text).unwrap()).is_err());
    }

    #[test]
    fn plan_validation() {
        let def = NetworkDef::squeezenet_v1_0();
        let mut plan = GranularityPlan::new();
        plan.set("conv10", Granularity::new(250, 1000).unwrap());
        plan.validate(&def).unwrap();
        plan.set("nope", Granularity::unchecked(1));
        assert_eq!(plan.validate(&def), Err(Error::UnknownPlanNode("nope".into())));
        let mut plan = GranularityPlan::new();
        plan.set("fire2/squeeze1x1", Granularity::unchecked(8));
        assert!(plan.validate(&def).is_err());
    }

    #[test]
    fn argmax_prefers_first_of_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
