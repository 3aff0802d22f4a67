//! Scalar computation graphs.
//!
//! External inputs are `v^{-1} .. v^{-N}` and internal nodes `v^0 .. v^M` in
//! topological order; `v^M` is the output. Internally every node lives in a
//! flat *slot*: input `k` is slot `k`, internal node `j` is slot `N + j`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub i32);

impl NodeId {
    /// Input `k` (0-based) is `v^{-(k+1)}`.
    pub fn input(k: usize) -> Self {
        NodeId(-(k as i32) - 1)
    }

    pub fn internal(j: usize) -> Self {
        NodeId(j as i32)
    }

    pub fn is_input(self) -> bool {
        self.0 < 0
    }

    pub fn input_index(self) -> Option<usize> {
        (self.0 < 0).then(|| (-self.0 - 1) as usize)
    }

    pub fn internal_index(self) -> Option<usize> {
        (self.0 >= 0).then_some(self.0 as usize)
    }

    #[inline]
    pub fn slot(self, n_inputs: usize) -> usize {
        match self.input_index() {
            Some(k) => k,
            None => n_inputs + self.0 as usize,
        }
    }

    #[inline]
    pub fn from_slot(slot: usize, n_inputs: usize) -> Self {
        if slot < n_inputs {
            NodeId::input(slot)
        } else {
            NodeId::internal(slot - n_inputs)
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v[{}]", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sin,
    Sigmoid,
    Square,
    Identity,
}

impl Activation {
    /// `(σ(x), σ'(x), σ''(x))`.
    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> (T, T, T) {
        let one = T::one();
        let two = T::lit(2.0);
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                let d1 = one - t * t;
                (t, d1, -two * t * d1)
            }
            Activation::Sin => {
                let (s, c) = x.sin_cos();
                (s, c, -s)
            }
            Activation::Sigmoid => {
                let y = one / (one + (-x).exp());
                let d1 = y * (one - y);
                (y, d1, d1 * (one - two * y))
            }
            Activation::Square => (x * x, two * x, two),
            Activation::Identity => (x, one, T::zero()),
        }
    }

    /// Second derivative is not identically zero.
    pub fn has_curvature(self) -> bool {
        !matches!(self, Activation::Identity)
    }

    pub fn transcendental_calls(self) -> u64 {
        match self {
            Activation::Tanh | Activation::Sigmoid => 1,
            Activation::Sin => 2,
            Activation::Square | Activation::Identity => 0,
        }
    }

    /// Multiplications spent producing `(σ, σ', σ'')` from the argument.
    pub(crate) fn local_mults(self) -> u64 {
        match self {
            Activation::Tanh => 3,
            Activation::Sin => 0,
            Activation::Sigmoid => 3,
            Activation::Square => 2,
            Activation::Identity => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum OpKind<T> {
    Affine { weights: Vec<(NodeId, T)>, bias: T },
    Unary { f: Activation, arg: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    #[serde(rename = "sumproduct")]
    SumProduct { terms: Vec<Vec<NodeId>> },
}

impl<T> OpKind<T> {
    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            OpKind::Affine { weights, .. } => weights.iter().map(|(id, _)| *id).collect(),
            OpKind::Unary { arg, .. } => vec![*arg],
            OpKind::Mul { lhs, rhs } => vec![*lhs, *rhs],
            OpKind::SumProduct { terms } => terms.iter().flatten().copied().collect(),
        }
    }
}

/// True iff every op references only inputs that exist and internal nodes
/// that precede it.
pub fn topological_check<T>(n_inputs: usize, nodes: &[OpKind<T>]) -> bool {
    first_bad_reference(n_inputs, nodes).is_none()
}

fn first_bad_reference<T>(n_inputs: usize, nodes: &[OpKind<T>]) -> Option<(usize, NodeId)> {
    nodes.iter().enumerate().find_map(|(j, op)| {
        op.operands().into_iter().find_map(|id| {
            let ok = match id.input_index() {
                Some(k) => k < n_inputs,
                None => (id.0 as usize) < j,
            };
            (!ok).then_some((j, id))
        })
    })
}

/// Derived structure shared by every evaluation route.
#[derive(Clone, Debug)]
pub(crate) struct Topology {
    /// Distinct parent slots per internal node, in first-appearance order.
    pub parents: Vec<Vec<usize>>,
    /// Structurally nonzero second-derivative pairs `(a, b)`, `a <= b`, as
    /// positions into `parents`.
    pub pairs: Vec<Vec<(usize, usize)>>,
    /// Mul / SumProduct: parent position of every factor of every term.
    pub factors: Vec<Vec<Vec<usize>>>,
    /// SumProduct: for each term, `(factor k, factor k', pair index)` with `k < k'`.
    pub factor_pairs: Vec<Vec<Vec<(usize, usize, usize)>>>,
    /// Internal consumers of each slot, ascending.
    pub consumers: Vec<Vec<usize>>,
}

/// Values of one node and its local first/second partial derivatives.
#[derive(Clone, Debug, Default)]
pub(crate) struct Local<T> {
    pub value: T,
    pub d1: Vec<T>,
    pub d2: Vec<T>,
    pub mults: u64,
    pub transcendental: u64,
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    n_inputs: usize,
    nodes: Vec<OpKind<T>>,
    topo: Topology,
    fingerprint: u64,
}

impl<T: PartialEq> PartialEq for Graph<T> {
    fn eq(&self, other: &Self) -> bool {
        self.n_inputs == other.n_inputs && self.nodes == other.nodes
    }
}

impl<T: Scalar> Graph<T> {
    /// Validates and indexes a graph. The output is the last node; every
    /// internal node must reach it.
    pub fn new(n_inputs: usize, nodes: Vec<OpKind<T>>) -> Result<Self> {
        if n_inputs == 0 {
            return Err(Error::InvalidGraph("graph needs at least one input".into()));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph needs at least one internal node".into()));
        }
        if let Some((j, reference)) = first_bad_reference(n_inputs, &nodes) {
            return Err(Error::ForwardReference { node: NodeId::internal(j), reference });
        }
        for (j, op) in nodes.iter().enumerate() {
            match op {
                OpKind::Affine { weights, bias } => {
                    let mut seen = BTreeSet::new();
                    for (id, w) in weights {
                        if !seen.insert(*id) {
                            return Err(Error::InvalidGraph(format!(
                                "affine node {} lists {} twice",
                                NodeId::internal(j),
                                id
                            )));
                        }
                        if !w.is_finite() {
                            return Err(Error::NonFiniteInput { what: "affine weight" });
                        }
                    }
                    if !bias.is_finite() {
                        return Err(Error::NonFiniteInput { what: "affine bias" });
                    }
                }
                OpKind::SumProduct { terms } => {
                    if terms.is_empty() || terms.iter().any(Vec::is_empty) {
                        return Err(Error::InvalidGraph(format!(
                            "sumproduct node {} has an empty term",
                            NodeId::internal(j)
                        )));
                    }
                }
                OpKind::Unary { .. } | OpKind::Mul { .. } => {}
            }
        }
        let topo = build_topology(n_inputs, &nodes);
        // reachability from the output
        let m = nodes.len();
        let mut live = vec![false; m];
        live[m - 1] = true;
        for j in (0..m).rev() {
            if !live[j] {
                return Err(Error::DeadNode(NodeId::internal(j)));
            }
            for &p in &topo.parents[j] {
                if p >= n_inputs {
                    live[p - n_inputs] = true;
                }
            }
        }
        let fingerprint = fingerprint_nodes(n_inputs, &nodes);
        Ok(Self { n_inputs, nodes, topo, fingerprint })
    }

    #[inline]
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// Number of internal nodes, `M + 1`.
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn n_slots(&self) -> usize {
        self.n_inputs + self.nodes.len()
    }

    pub fn nodes(&self) -> &[OpKind<T>] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        NodeId::internal(self.nodes.len() - 1)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub(crate) fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Distinct parents of internal node `j`.
    pub fn parents(&self, j: usize) -> Vec<NodeId> {
        self.topo.parents[j].iter().map(|&s| NodeId::from_slot(s, self.n_inputs)).collect()
    }

    /// `τ(i)`: the last internal consumer of a slot, `None` for unused inputs.
    /// The output is its own last consumer.
    pub(crate) fn tau_slot(&self, slot: usize) -> Option<usize> {
        if slot == self.n_slots() - 1 {
            return Some(self.nodes.len() - 1);
        }
        self.topo.consumers[slot].last().copied()
    }

    /// Plain forward pass returning `φ(x)`.
    pub fn evaluate(&self, x: &[T]) -> Result<T> {
        let mut scratch = Vec::new();
        self.evaluate_with(x, &mut scratch)
    }

    /// Forward pass into a caller-owned buffer, which ends up holding every
    /// slot value.
    pub fn evaluate_with(&self, x: &[T], values: &mut Vec<T>) -> Result<T> {
        self.check_point(x)?;
        values.clear();
        values.extend_from_slice(x);
        values.resize(self.n_slots(), T::zero());
        for j in 0..self.nodes.len() {
            let v = self.node_value(j, values);
            if !v.is_finite() {
                return Err(Error::NonFinite { node: NodeId::internal(j), what: "value" });
            }
            values[self.n_inputs + j] = v;
        }
        Ok(values[self.n_slots() - 1])
    }

    /// Every slot value (inputs first).
    pub fn evaluate_all(&self, x: &[T]) -> Result<Vec<T>> {
        let mut values = Vec::new();
        self.evaluate_with(x, &mut values)?;
        Ok(values)
    }

    pub(crate) fn check_point(&self, x: &[T]) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::DimensionMismatch { expected: self.n_inputs, found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { what: "evaluation point" });
        }
        Ok(())
    }

    fn node_value(&self, j: usize, values: &[T]) -> T {
        let n = self.n_inputs;
        match &self.nodes[j] {
            OpKind::Affine { weights, bias } => weights
                .iter()
                .fold(*bias, |acc, (id, w)| acc + *w * values[id.slot(n)]),
            OpKind::Unary { f, arg } => f.eval(values[arg.slot(n)]).0,
            OpKind::Mul { lhs, rhs } => values[lhs.slot(n)] * values[rhs.slot(n)],
            OpKind::SumProduct { terms } => terms.iter().fold(T::zero(), |acc, term| {
                acc + term.iter().fold(T::one(), |p, id| p * values[id.slot(n)])
            }),
        }
    }

    /// Value and local derivatives of internal node `j` with respect to its
    /// distinct parents. `d2[k]` belongs to `topology().pairs[j][k]`.
    pub(crate) fn local(&self, j: usize, values: &[T], out: &mut Local<T>) {
        let n = self.n_inputs;
        let topo = &self.topo;
        out.d1.clear();
        out.d2.clear();
        out.mults = 0;
        out.transcendental = 0;
        match &self.nodes[j] {
            OpKind::Affine { weights, bias } => {
                let mut v = *bias;
                for (id, w) in weights {
                    v = v + *w * values[id.slot(n)];
                    out.d1.push(*w);
                }
                out.value = v;
                out.mults = weights.len() as u64;
            }
            OpKind::Unary { f, arg } => {
                let (v, d1, d2) = f.eval(values[arg.slot(n)]);
                out.value = v;
                out.d1.push(d1);
                if !topo.pairs[j].is_empty() {
                    out.d2.push(d2);
                }
                out.mults = f.local_mults();
                out.transcendental = f.transcendental_calls();
            }
            OpKind::Mul { lhs, rhs } => {
                let a = values[lhs.slot(n)];
                let b = values[rhs.slot(n)];
                out.value = a * b;
                if lhs == rhs {
                    out.d1.push(a + a);
                    out.d2.push(T::lit(2.0));
                } else {
                    out.d1.push(b);
                    out.d1.push(a);
                    out.d2.push(T::one());
                }
                out.mults = 1;
            }
            OpKind::SumProduct { terms } => {
                let parents = &topo.parents[j];
                out.d1.resize(parents.len(), T::zero());
                out.d2.resize(topo.pairs[j].len(), T::zero());
                let mut value = T::zero();
                let mut mults = 0u64;
                for (t, term) in terms.iter().enumerate() {
                    let pos = &topo.factors[j][t];
                    let vals: Vec<T> = term.iter().map(|id| values[id.slot(n)]).collect();
                    let k = vals.len();
                    value = value + vals.iter().fold(T::one(), |p, &v| p * v);
                    mults += k.saturating_sub(1) as u64;
                    // product of all factors except one, via prefix/suffix products
                    let mut prefix = vec![T::one(); k + 1];
                    for i in 0..k {
                        prefix[i + 1] = prefix[i] * vals[i];
                    }
                    let mut suffix = vec![T::one(); k + 1];
                    for i in (0..k).rev() {
                        suffix[i] = suffix[i + 1] * vals[i];
                    }
                    for i in 0..k {
                        out.d1[pos[i]] = out.d1[pos[i]] + prefix[i] * suffix[i + 1];
                    }
                    mults += 3 * k as u64;
                    for &(a, b, pair) in &topo.factor_pairs[j][t] {
                        let mut prod = T::one();
                        for (i, &v) in vals.iter().enumerate() {
                            if i != a && i != b {
                                prod = prod * v;
                            }
                        }
                        mults += k.saturating_sub(2) as u64;
                        // a repeated factor contributes to the diagonal twice
                        let w = if pos[a] == pos[b] { prod + prod } else { prod };
                        out.d2[pair] = out.d2[pair] + w;
                    }
                }
                out.value = value;
                out.mults = mults;
            }
        }
    }

    /// Enumerates `T = {(i, l, j) : ∂²F_j/∂v^i∂v^l ≢ 0}` as ordered triples.
    pub fn second_order_triples(&self) -> Vec<(NodeId, NodeId, NodeId)> {
        let n = self.n_inputs;
        let mut out = Vec::new();
        for j in 0..self.nodes.len() {
            let parents = &self.topo.parents[j];
            for &(a, b) in &self.topo.pairs[j] {
                let (i, l) = (NodeId::from_slot(parents[a], n), NodeId::from_slot(parents[b], n));
                out.push((i, l, NodeId::internal(j)));
                if a != b {
                    out.push((l, i, NodeId::internal(j)));
                }
            }
        }
        out
    }

    pub fn edge_stats(&self) -> EdgeStats {
        EdgeStats::from_graph(self)
    }
}

fn build_topology<T: Scalar>(n_inputs: usize, nodes: &[OpKind<T>]) -> Topology {
    let m = nodes.len();
    let mut parents = Vec::with_capacity(m);
    let mut pairs = Vec::with_capacity(m);
    let mut factors = Vec::with_capacity(m);
    let mut factor_pairs = Vec::with_capacity(m);
    let mut consumers = vec![Vec::new(); n_inputs + m];
    for (j, op) in nodes.iter().enumerate() {
        let mut ps: Vec<usize> = Vec::new();
        let position = |slot: usize, ps: &mut Vec<usize>| match ps.iter().position(|&p| p == slot) {
            Some(k) => k,
            None => {
                ps.push(slot);
                ps.len() - 1
            }
        };
        let mut node_pairs = Vec::new();
        let mut node_factors = Vec::new();
        let mut node_factor_pairs = Vec::new();
        match op {
            OpKind::Affine { weights, .. } => {
                for (id, _) in weights {
                    position(id.slot(n_inputs), &mut ps);
                }
            }
            OpKind::Unary { f, arg } => {
                position(arg.slot(n_inputs), &mut ps);
                if f.has_curvature() {
                    node_pairs.push((0, 0));
                }
            }
            OpKind::Mul { lhs, rhs } => {
                let a = position(lhs.slot(n_inputs), &mut ps);
                let b = position(rhs.slot(n_inputs), &mut ps);
                node_pairs.push((a.min(b), a.max(b)));
                node_factors.push(vec![a, b]);
            }
            OpKind::SumProduct { terms } => {
                let mut index: HashMap<(usize, usize), usize> = HashMap::new();
                for term in terms {
                    let pos: Vec<usize> =
                        term.iter().map(|id| position(id.slot(n_inputs), &mut ps)).collect();
                    let mut fp = Vec::new();
                    for a in 0..pos.len() {
                        for b in (a + 1)..pos.len() {
                            let key = (pos[a].min(pos[b]), pos[a].max(pos[b]));
                            let next = index.len();
                            let pair = *index.entry(key).or_insert_with(|| {
                                node_pairs.push(key);
                                next
                            });
                            fp.push((a, b, pair));
                        }
                    }
                    node_factors.push(pos);
                    node_factor_pairs.push(fp);
                }
            }
        }
        for &p in &ps {
            consumers[p].push(j);
        }
        parents.push(ps);
        pairs.push(node_pairs);
        factors.push(node_factors);
        factor_pairs.push(node_factor_pairs);
    }
    Topology { parents, pairs, factors, factor_pairs, consumers }
}

fn fingerprint_nodes<T: Scalar>(n_inputs: usize, nodes: &[OpKind<T>]) -> u64 {
    let mut h = DefaultHasher::new();
    n_inputs.hash(&mut h);
    for op in nodes {
        match op {
            OpKind::Affine { weights, bias } => {
                0u8.hash(&mut h);
                bias.fingerprint_bits().hash(&mut h);
                for (id, w) in weights {
                    id.hash(&mut h);
                    w.fingerprint_bits().hash(&mut h);
                }
            }
            OpKind::Unary { f, arg } => {
                1u8.hash(&mut h);
                f.hash(&mut h);
                arg.hash(&mut h);
            }
            OpKind::Mul { lhs, rhs } => {
                2u8.hash(&mut h);
                lhs.hash(&mut h);
                rhs.hash(&mut h);
            }
            OpKind::SumProduct { terms } => {
                3u8.hash(&mut h);
                terms.hash(&mut h);
            }
        }
    }
    h.finish()
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct GraphDoc<T> {
    n_inputs: usize,
    nodes: Vec<OpKind<T>>,
}

impl<T: Scalar> Serialize for Graph<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphDoc { n_inputs: self.n_inputs, nodes: self.nodes.clone() }.serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Graph<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = GraphDoc::<T>::deserialize(d)?;
        Graph::new(doc.n_inputs, doc.nodes).map_err(serde::de::Error::custom)
    }
}

/// Edge-set sizes and liveness data used by the cost model.
///
/// Per-node vectors are indexed by slot (inputs first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub n_inputs: usize,
    pub n_nodes: usize,
    /// `|E|`
    pub e_count: u64,
    /// `|T|`, ordered triples
    pub t_count: u64,
    /// `|R|`, ordered pairs
    pub r_count: u64,
    /// Pairs `(i, i)` in `R`.
    pub r_diag_count: u64,
    pub fan_in: Vec<usize>,
    pub fan_out: Vec<usize>,
    /// `τ(i)` as an internal node index; `None` for unused inputs.
    pub tau: Vec<Option<usize>>,
    /// Smallest slot among `{l} ∪ {i : (i, l) ∈ R}`: the last reverse-sweep
    /// step that still reads the forward tangent of `l`.
    pub tangent_last_use: Vec<usize>,
}

impl EdgeStats {
    fn from_graph<T: Scalar>(g: &Graph<T>) -> Self {
        let n = g.n_inputs;
        let topo = &g.topo;
        let slots = g.n_slots();
        let mut r_set: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut t_count = 0u64;
        let mut e_count = 0u64;
        let mut fan_in = vec![0; slots];
        for j in 0..g.n_nodes() {
            let parents = &topo.parents[j];
            e_count += parents.len() as u64;
            fan_in[n + j] = parents.len();
            for &(a, b) in &topo.pairs[j] {
                let (i, l) = (parents[a], parents[b]);
                r_set.insert((i, l));
                r_set.insert((l, i));
                t_count += if a == b { 1 } else { 2 };
            }
        }
        let fan_out = topo.consumers.iter().map(Vec::len).collect();
        let tau = (0..slots).map(|s| g.tau_slot(s)).collect();
        let mut tangent_last_use: Vec<usize> = (0..slots).collect();
        for &(i, l) in &r_set {
            tangent_last_use[l] = tangent_last_use[l].min(i);
        }
        let r_diag_count = r_set.iter().filter(|(i, l)| i == l).count() as u64;
        Self {
            n_inputs: n,
            n_nodes: g.n_nodes(),
            e_count,
            t_count,
            r_count: r_set.len() as u64,
            r_diag_count,
            fan_in,
            fan_out,
            tau,
            tangent_last_use,
        }
    }

    /// `|V|`: slots that carry a tangent (used inputs and internal nodes).
    pub fn n_vertices(&self) -> usize {
        self.tau.iter().filter(|t| t.is_some()).count()
    }

    /// Unordered pairs of `R`, i.e. distinct Gram entries `gᵢᵀDgₗ`.
    pub fn r_unordered(&self) -> u64 {
        (self.r_count + self.r_diag_count) / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(k: usize) -> NodeId {
        NodeId::input(k)
    }

    #[test]
    fn node_id_slots() {
        assert_eq!(x(0).0, -1);
        assert_eq!(x(2).slot(3), 2);
        assert_eq!(NodeId::internal(0).slot(3), 3);
        assert_eq!(NodeId::from_slot(4, 3), NodeId::internal(1));
        assert_eq!(NodeId::from_slot(1, 3), x(1));
    }

    #[test]
    fn evaluate_sum() {
        let g = Graph::new(2, vec![OpKind::Affine { weights: vec![(x(0), 1.0), (x(1), 1.0)], bias: 0.0 }])
            .unwrap();
        assert_eq!(g.evaluate(&[2.0, 3.0]).unwrap(), 5.0);
    }

    #[test]
    fn evaluate_tanh_origin() {
        let g = Graph::new(1, vec![OpKind::Unary { f: Activation::Tanh, arg: x(0) }]).unwrap();
        assert_eq!(g.evaluate(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn nan_names_first_bad_node() {
        let g = Graph::new(
            1,
            vec![
                OpKind::Mul { lhs: x(0), rhs: x(0) },
                OpKind::Mul { lhs: NodeId::internal(0), rhs: NodeId::internal(0) },
                OpKind::Unary { f: Activation::Sin, arg: NodeId::internal(1) },
            ],
        )
        .unwrap();
        let err = g.evaluate(&[1e100]).unwrap_err();
        assert_eq!(err, Error::NonFinite { node: NodeId::internal(1), what: "value" });
    }

    #[test]
    fn single_affine_stats() {
        let g = Graph::new(
            3,
            vec![OpKind::Affine { weights: vec![(x(0), 1.0), (x(1), -2.0), (x(2), 0.5)], bias: 1.0 }],
        )
        .unwrap();
        let s = g.edge_stats();
        assert_eq!((s.e_count, s.t_count, s.r_count), (3, 0, 0));
    }

    #[test]
    fn single_mul_stats() {
        let g = Graph::<f64>::new(2, vec![OpKind::Mul { lhs: x(0), rhs: x(1) }]).unwrap();
        let s = g.edge_stats();
        assert_eq!((s.e_count, s.t_count, s.r_count), (2, 2, 2));
        assert_eq!(s.tau, vec![Some(0), Some(0), Some(0)]);
    }

    #[test]
    fn identity_activation_has_no_triples() {
        let g = Graph::<f64>::new(1, vec![OpKind::Unary { f: Activation::Identity, arg: x(0) }]).unwrap();
        assert_eq!(g.edge_stats().t_count, 0);
        let g = Graph::<f64>::new(1, vec![OpKind::Unary { f: Activation::Square, arg: x(0) }]).unwrap();
        assert_eq!(g.edge_stats().t_count, 1);
    }

    #[test]
    fn forward_and_self_references_rejected() {
        let fwd: Vec<OpKind<f64>> = vec![
            OpKind::Unary { f: Activation::Tanh, arg: NodeId::internal(1) },
            OpKind::Unary { f: Activation::Tanh, arg: x(0) },
        ];
        assert!(!topological_check(1, &fwd));
        assert!(matches!(Graph::new(1, fwd), Err(Error::ForwardReference { .. })));

        let selfref: Vec<OpKind<f64>> = vec![OpKind::Mul { lhs: x(0), rhs: NodeId::internal(0) }];
        assert!(!topological_check(1, &selfref));
        assert!(Graph::new(1, selfref).is_err());

        let missing_input: Vec<OpKind<f64>> = vec![OpKind::Unary { f: Activation::Sin, arg: x(4) }];
        assert!(!topological_check(2, &missing_input));
    }

    #[test]
    fn dead_nodes_rejected() {
        let nodes: Vec<OpKind<f64>> = vec![
            OpKind::Unary { f: Activation::Tanh, arg: x(0) },
            OpKind::Unary { f: Activation::Sin, arg: x(0) },
        ];
        assert_eq!(Graph::new(1, nodes).unwrap_err(), Error::DeadNode(NodeId::internal(0)));
    }

    #[test]
    fn duplicate_affine_operand_rejected() {
        let nodes: Vec<OpKind<f64>> =
            vec![OpKind::Affine { weights: vec![(x(0), 1.0), (x(0), 2.0)], bias: 0.0 }];
        assert!(matches!(Graph::new(1, nodes), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn sumproduct_local_derivatives() {
        // x0*x1*x2 + x0*x0
        let g = Graph::new(3, vec![OpKind::SumProduct { terms: vec![vec![x(0), x(1), x(2)], vec![x(0), x(0)]] }])
            .unwrap();
        let vals = [2.0, 3.0, 5.0, 0.0];
        let mut local = Local::default();
        g.local(0, &vals, &mut local);
        assert_eq!(local.value, 34.0);
        assert_eq!(local.d1, vec![15.0 + 4.0, 10.0, 6.0]);
        // pairs: (0,1), (0,2), (1,2), (0,0)
        assert_eq!(g.topology().pairs[0], vec![(0, 1), (0, 2), (1, 2), (0, 0)]);
        assert_eq!(local.d2, vec![5.0, 3.0, 2.0, 2.0]);
        let s = g.edge_stats();
        assert_eq!((s.e_count, s.t_count, s.r_count, s.r_diag_count), (3, 7, 7, 1));
    }

    #[test]
    fn json_round_trip() {
        let json = r#"{"n_inputs":2,"nodes":[
            {"op":"affine","weights":[[-1,0.5],[-2,-1.0]],"bias":0.25},
            {"op":"unary","f":"tanh","arg":0},
            {"op":"mul","lhs":1,"rhs":-1},
            {"op":"sumproduct","terms":[[2,1],[-2]]}
        ]}"#;
        let g: Graph<f64> = serde_json::from_str(json).unwrap();
        assert_eq!(g.n_nodes(), 4);
        let back: Graph<f64> = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.fingerprint(), g.fingerprint());
    }

    #[test]
    fn json_rejects_forward_reference() {
        let json = r#"{"n_inputs":1,"nodes":[{"op":"unary","f":"sin","arg":1},{"op":"unary","f":"sin","arg":-1}]}"#;
        assert!(serde_json::from_str::<Graph<f64>>(json).is_err());
    }
}
