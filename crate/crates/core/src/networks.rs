//! Builders for the benchmark architectures.
//!
//! A dense MLP is laid out layer by layer: all affine nodes `u^{l-1/2}` of a
//! layer, then their activations `u^l`. The output layer is affine only.
//! The block MLP runs `k` independent MLPs on disjoint input blocks and joins
//! them with a single sum-of-products node.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, EdgeStats, Graph, NodeId, OpKind};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightInit {
    /// `W, b ~ N(0, 1/fan_in)`
    #[default]
    NormalFanIn,
    Constant { weight: f64, bias: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `N₀, …, N_{L+1}` with `N_{L+1} = 1`.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self { widths, activation, weight_init: WeightInit::NormalFanIn, seed }
    }

    /// `n_in → hidden × layers → 1`.
    pub fn uniform(n_in: usize, hidden: usize, layers: usize, activation: Activation, seed: u64) -> Self {
        let mut widths = vec![n_in];
        widths.extend(std::iter::repeat_n(hidden, layers));
        widths.push(1);
        Self::new(widths, activation, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.widths.first().copied().unwrap_or(0)
    }

    fn validate(&self, require_scalar: bool) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidNetwork("need at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidNetwork("widths must be positive".into()));
        }
        if require_scalar && *self.widths.last().unwrap() != 1 {
            return Err(Error::InvalidNetwork("last width must be 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    /// `out × in`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

fn init_layers<T: Scalar>(widths: &[usize], init: WeightInit, rng: &mut ChaCha8Rng) -> Vec<Layer<T>> {
    widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            match init {
                WeightInit::NormalFanIn => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    let mut draw = || T::lit(scale * rng.sample::<f64, _>(StandardNormal));
                    let weights = Matrix::from_fn(fan_out, fan_in, |_, _| draw());
                    let bias = (0..fan_out).map(|_| draw()).collect();
                    Layer { weights, bias }
                }
                WeightInit::Constant { weight, bias } => Layer {
                    weights: Matrix::from_fn(fan_out, fan_in, |_, _| T::lit(weight)),
                    bias: vec![T::lit(bias); fan_out],
                },
            }
        })
        .collect()
}

/// Appends one MLP's nodes to `nodes`, reading from `inputs`; returns the
/// ids of its output layer.
fn emit_mlp<T: Scalar>(
    layers: &[Layer<T>],
    activation: Activation,
    inputs: Vec<NodeId>,
    nodes: &mut Vec<OpKind<T>>,
) -> Vec<NodeId> {
    let mut prev = inputs;
    for (li, layer) in layers.iter().enumerate() {
        let start = nodes.len();
        for i in 0..layer.weights.rows() {
            let weights = prev.iter().copied().zip(layer.weights.row(i).iter().copied()).collect();
            nodes.push(OpKind::Affine { weights, bias: layer.bias[i] });
        }
        let affine: Vec<NodeId> = (start..nodes.len()).map(NodeId::internal).collect();
        if li + 1 == layers.len() {
            return affine;
        }
        let start = nodes.len();
        for &arg in &affine {
            nodes.push(OpKind::Unary { f: activation, arg });
        }
        prev = (start..nodes.len()).map(NodeId::internal).collect();
    }
    prev
}

/// Dense MLP with explicit weights and its graph form.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    activation: Activation,
    layers: Vec<Layer<T>>,
    graph: Graph<T>,
    stats: OnceLock<EdgeStats>,
}

impl<T: Scalar> Mlp<T> {
    pub fn from_spec(spec: &MlpSpec) -> Result<Self> {
        spec.validate(true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self::from_layers(init_layers(&spec.widths, spec.weight_init, &mut rng), spec.activation)
    }

    pub fn from_layers(layers: Vec<Layer<T>>, activation: Activation) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidNetwork("no layers".into()))?;
        let mut width = first.weights.cols();
        for layer in &layers {
            if layer.weights.cols() != width || layer.bias.len() != layer.weights.rows() {
                return Err(Error::InvalidNetwork("layer shapes do not chain".into()));
            }
            width = layer.weights.rows();
        }
        if width != 1 {
            return Err(Error::InvalidNetwork("last width must be 1".into()));
        }
        let n = first.weights.cols();
        let mut nodes = Vec::new();
        emit_mlp(&layers, activation, (0..n).map(NodeId::input).collect(), &mut nodes);
        let graph = Graph::new(n, nodes)?;
        Ok(Self { activation, layers, graph, stats: OnceLock::new() })
    }

    pub fn input_dim(&self) -> usize {
        self.graph.n_inputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weights.rows()));
        w
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_fingerprint(&self) -> u64 {
        self.graph.fingerprint()
    }

    pub fn edge_stats(&self) -> &EdgeStats {
        self.stats.get_or_init(|| self.graph.edge_stats())
    }

    /// Straight matrix-form forward pass, independent of the graph.
    pub fn forward(&self, x: &[T]) -> Result<T> {
        let mut u = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weights.mul_vec(&u)?;
            for (v, &b) in next.iter_mut().zip(&layer.bias) {
                *v = *v + b;
                if li + 1 < self.layers.len() {
                    *v = self.activation.eval(*v).0;
                }
            }
            u = next;
        }
        Ok(u[0])
    }
}

pub fn build_mlp<T: Scalar>(spec: &MlpSpec) -> Result<Graph<T>> {
    Ok(Mlp::from_spec(spec)?.graph)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMlpSpec {
    pub n_blocks: usize,
    pub block_input_dim: usize,
    /// Hidden widths of each sub-MLP.
    pub widths: Vec<usize>,
    /// `d_max`: outputs per sub-MLP, equal to the number of product terms.
    pub block_output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default)]
    pub seed: u64,
}

impl BlockMlpSpec {
    pub fn input_dim(&self) -> usize {
        self.n_blocks * self.block_input_dim
    }

    fn block_widths(&self) -> Vec<usize> {
        let mut w = vec![self.block_input_dim];
        w.extend(&self.widths);
        w.push(self.block_output_dim);
        w
    }

    /// Internal nodes owned by one sub-MLP.
    pub fn nodes_per_block(&self) -> usize {
        2 * self.widths.iter().sum::<usize>() + self.block_output_dim
    }
}

/// `Σ_d Π_i [MLPⁱ(xᵢ)]_d` over `k` blocks.
pub fn build_block_mlp<T: Scalar>(spec: &BlockMlpSpec) -> Result<Graph<T>> {
    if spec.n_blocks == 0 || spec.block_input_dim == 0 || spec.block_output_dim == 0 {
        return Err(Error::InvalidNetwork("block counts and dimensions must be positive".into()));
    }
    let widths = spec.block_widths();
    MlpSpec { widths: widths.clone(), activation: spec.activation, weight_init: spec.weight_init, seed: spec.seed }
        .validate(false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes = Vec::new();
    let mut outputs = Vec::with_capacity(spec.n_blocks);
    for b in 0..spec.n_blocks {
        let layers = init_layers::<T>(&widths, spec.weight_init, &mut rng);
        let inputs = (0..spec.block_input_dim).map(|k| NodeId::input(b * spec.block_input_dim + k)).collect();
        outputs.push(emit_mlp(&layers, spec.activation, inputs, &mut nodes));
    }
    let terms = (0..spec.block_output_dim).map(|d| outputs.iter().map(|o| o[d]).collect()).collect();
    nodes.push(OpKind::SumProduct { terms });
    Graph::new(spec.input_dim(), nodes)
}

/// Random DAG exercising every op kind, for fuzzing.
///
/// Products and squares only take inputs or saturating activations as
/// operands, so values stay bounded for `x ∈ [-1, 1]ⁿ`.
pub fn random_graph<T: Scalar>(n_inputs: usize, n_nodes: usize, seed: u64) -> Result<Graph<T>> {
    if n_inputs == 0 || n_nodes < 2 {
        return Err(Error::InvalidNetwork("random graph needs inputs and at least two nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<OpKind<T>> = Vec::with_capacity(n_nodes);
    let mut bounded: Vec<NodeId> = (0..n_inputs).map(NodeId::input).collect();
    let mut all = bounded.clone();
    let mut used = vec![false; n_nodes];
    let pick = |rng: &mut ChaCha8Rng, from: &[NodeId]| from[rng.random_range(0..from.len())];
    let saturating = [Activation::Tanh, Activation::Sin, Activation::Sigmoid];

    for j in 0..n_nodes - 1 {
        let kind = if j < 5 { j } else { rng.random_range(0..5) };
        let op = match kind {
            0 => {
                let k = rng.random_range(1..=all.len().min(4));
                let mut operands: Vec<NodeId> = Vec::new();
                while operands.len() < k {
                    let id = pick(&mut rng, &all);
                    if !operands.contains(&id) {
                        operands.push(id);
                    }
                }
                let scale = 1.0 / (k as f64).sqrt();
                let weights = operands
                    .into_iter()
                    .map(|id| (id, T::lit(scale * rng.sample::<f64, _>(StandardNormal))))
                    .collect();
                OpKind::Affine { weights, bias: T::lit(0.1 * rng.sample::<f64, _>(StandardNormal)) }
            }
            1 => OpKind::Unary { f: saturating[rng.random_range(0..3)], arg: pick(&mut rng, &all) },
            2 => OpKind::Unary { f: Activation::Square, arg: pick(&mut rng, &bounded) },
            3 => OpKind::Mul { lhs: pick(&mut rng, &bounded), rhs: pick(&mut rng, &bounded) },
            _ => {
                let n_terms = rng.random_range(1..=3);
                let terms = (0..n_terms)
                    .map(|_| (0..rng.random_range(1..=3)).map(|_| pick(&mut rng, &bounded)).collect())
                    .collect();
                OpKind::SumProduct { terms }
            }
        };
        for id in op.operands() {
            if let Some(i) = id.internal_index() {
                used[i] = true;
            }
        }
        let id = NodeId::internal(j);
        if matches!(op, OpKind::Unary { f, .. } if f != Activation::Square) {
            bounded.push(id);
        }
        all.push(id);
        nodes.push(op);
    }
    // The output gathers every dangling node so nothing is dead.
    let mut tail: Vec<NodeId> = (0..n_nodes - 1).filter(|&i| !used[i]).map(NodeId::internal).collect();
    if tail.is_empty() {
        tail.push(NodeId::internal(n_nodes - 2));
    }
    let weights = tail.into_iter().map(|id| (id, T::lit(0.5 + rng.random::<f64>()))).collect();
    nodes.push(OpKind::Affine { weights, bias: T::zero() });
    Graph::new(n_inputs, nodes)
}
