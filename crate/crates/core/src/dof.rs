//! Forward propagation of `(v, g, s)` with `g = L∇v` and `s = ℒ₂v`.
//!
//! Per node `j`, in topological order:
//!
//! ```text
//! v^j = F_j(v^i : i → j)
//! g^j = Σ_i ∂F_j/∂v^i · g^i
//! s^j = Σ_{i,l} ∂²F_j/∂v^i∂v^l · g^iᵀ D g^l + Σ_i ∂F_j/∂v^i · s^i
//! ```
//!
//! The pair sum runs over unordered pairs with off-diagonal terms doubled, and
//! each Gram entry `g^iᵀDg^l` is computed once at its first consumer. Tangent
//! vectors only store the rows of `L` they can be nonzero on, so block-sparse
//! Jacobians cost proportionally less. A node's state is released as soon as
//! its last consumer `τ(i)` has run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::costmodel::{self, CostReport, Method};
use crate::error::{Error, Result};
use crate::graph::{EdgeStats, Graph, Local, NodeId};
use crate::networks::Mlp;
use crate::numerics::Matrix;
use crate::operator::{Decomposition, OperatorSpec};
use crate::scalar::Scalar;

/// `|σ'|` below which the fused rule falls back to the per-node form.
pub const FUSED_FALLBACK_THRESHOLD: f64 = 1e-12;

/// Per-node tuple; `g` is scattered to the full rank `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DofState<T> {
    pub v: T,
    pub g: Vec<T>,
    pub s: T,
    pub t: Option<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DofResult<T> {
    pub value: T,
    pub operator_value: T,
    /// `L∇φ`
    pub g_out: Vec<T>,
    pub cost: CostReport,
}

#[derive(Clone, Debug)]
enum GramKind {
    /// Both operands share one support.
    Same,
    /// Matching positions `(in i, in l)` of differing supports.
    Intersect(Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
struct Gram {
    i: usize,
    l: usize,
    kind: GramKind,
}

/// Caller-owned working memory; reuse it across points to avoid reallocating.
#[derive(Debug, Default)]
pub struct DofScratch<T> {
    values: Vec<T>,
    s: Vec<T>,
    t: Vec<T>,
    grams: Vec<T>,
    states: Vec<Option<Vec<T>>>,
    pool: Vec<Vec<T>>,
    local: Local<T>,
}

impl<T: Scalar> DofScratch<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            s: Vec::new(),
            t: Vec::new(),
            grams: Vec::new(),
            states: Vec::new(),
            pool: Vec::new(),
            local: Local::default(),
        }
    }

    fn take(&mut self, len: usize) -> Vec<T> {
        let mut buf = self.pool.pop().unwrap_or_default();
        buf.clear();
        buf.resize(len, T::zero());
        buf
    }

    fn release(&mut self, slot: usize) -> u64 {
        match self.states[slot].take() {
            Some(buf) => {
                let len = buf.len() as u64;
                self.pool.push(buf);
                len
            }
            None => 0,
        }
    }
}

/// A graph bound to one operator, with its propagation schedule precomputed.
pub struct DofEngine<'a, T> {
    graph: &'a Graph<T>,
    dec: &'a Decomposition<T>,
    spec: &'a OperatorSpec<T>,
    method: Method,
    stats: EdgeStats,
    support: Vec<Vec<usize>>,
    seeds: Vec<Vec<T>>,
    edge_maps: Vec<Vec<Option<Vec<usize>>>>,
    pair_gram: Vec<Vec<usize>>,
    gram_at: Vec<Vec<usize>>,
    grams: Vec<Gram>,
    release_at: Vec<Vec<usize>>,
    used_inputs: Vec<usize>,
    all_positive: bool,
    first_order: bool,
    profile: Vec<u64>,
    predicted_peak: u64,
}

impl<'a, T: Scalar> DofEngine<'a, T> {
    pub fn new(graph: &'a Graph<T>, dec: &'a Decomposition<T>, spec: &'a OperatorSpec<T>) -> Result<Self> {
        Self::with_method(graph, dec, spec, Method::Dof)
    }

    fn with_method(
        graph: &'a Graph<T>,
        dec: &'a Decomposition<T>,
        spec: &'a OperatorSpec<T>,
        method: Method,
    ) -> Result<Self> {
        dec.check_against(spec)?;
        if graph.n_inputs() != spec.dim() {
            return Err(Error::DimensionMismatch { expected: graph.n_inputs(), found: spec.dim() });
        }
        let n = graph.n_inputs();
        let topo = graph.topology();
        let stats = graph.edge_stats();
        let slots = graph.n_slots();
        let r = dec.rank();

        let mut support: Vec<Vec<usize>> = Vec::with_capacity(slots);
        let mut seeds = Vec::with_capacity(n);
        for m in 0..n {
            let rows: Vec<usize> = (0..r).filter(|&k| dec.l.get(k, m) != T::zero()).collect();
            seeds.push(rows.iter().map(|&k| dec.l.get(k, m)).collect());
            support.push(rows);
        }
        let mut edge_maps = Vec::with_capacity(graph.n_nodes());
        for j in 0..graph.n_nodes() {
            let parents = &topo.parents[j];
            let mut mask = vec![false; r];
            for &p in parents {
                for &k in &support[p] {
                    mask[k] = true;
                }
            }
            let sup: Vec<usize> = (0..r).filter(|&k| mask[k]).collect();
            let mut position = vec![usize::MAX; r];
            for (q, &k) in sup.iter().enumerate() {
                position[k] = q;
            }
            edge_maps.push(
                parents
                    .iter()
                    .map(|&p| (support[p] != sup).then(|| support[p].iter().map(|&k| position[k]).collect()))
                    .collect(),
            );
            support.push(sup);
        }

        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut grams = Vec::new();
        let mut gram_at = vec![Vec::new(); graph.n_nodes()];
        let mut pair_gram = Vec::with_capacity(graph.n_nodes());
        for j in 0..graph.n_nodes() {
            let parents = &topo.parents[j];
            let ids = topo.pairs[j]
                .iter()
                .map(|&(a, b)| {
                    let (i, l) = (parents[a].min(parents[b]), parents[a].max(parents[b]));
                    *index.entry((i, l)).or_insert_with(|| {
                        let kind = if support[i] == support[l] {
                            GramKind::Same
                        } else {
                            let mut matched = Vec::new();
                            let (si, sl) = (&support[i], &support[l]);
                            let (mut p, mut q) = (0, 0);
                            while p < si.len() && q < sl.len() {
                                match si[p].cmp(&sl[q]) {
                                    std::cmp::Ordering::Less => p += 1,
                                    std::cmp::Ordering::Greater => q += 1,
                                    std::cmp::Ordering::Equal => {
                                        matched.push((p, q));
                                        p += 1;
                                        q += 1;
                                    }
                                }
                            }
                            GramKind::Intersect(matched)
                        };
                        grams.push(Gram { i, l, kind });
                        gram_at[j].push(grams.len() - 1);
                        grams.len() - 1
                    })
                })
                .collect();
            pair_gram.push(ids);
        }

        let output = slots - 1;
        let mut release_at = vec![Vec::new(); graph.n_nodes()];
        let mut used_inputs = Vec::new();
        for (slot, tau) in stats.tau.iter().enumerate() {
            if let Some(t) = *tau {
                if slot < n {
                    used_inputs.push(slot);
                }
                if slot != output {
                    release_at[t].push(slot);
                }
            }
        }
        let widths: Vec<u64> = support.iter().map(|s| s.len() as u64).collect();
        let profile = costmodel::predict_forward_profile_sparse(&stats, &widths).profile;
        let predicted_peak = costmodel::predict_memory_profile(&stats, n, r, method).peak;

        Ok(Self {
            graph,
            dec,
            spec,
            method,
            stats,
            support,
            seeds,
            edge_maps,
            pair_gram,
            gram_at,
            grams,
            release_at,
            used_inputs,
            all_positive: dec.is_elliptic(),
            first_order: spec.has_first_order(),
            profile,
            predicted_peak,
        })
    }

    pub fn graph(&self) -> &Graph<T> {
        self.graph
    }

    pub fn rank(&self) -> usize {
        self.dec.rank()
    }

    pub fn edge_stats(&self) -> &EdgeStats {
        &self.stats
    }

    /// Support width of every slot's `g`.
    pub fn support_widths(&self) -> Vec<usize> {
        self.support.iter().map(Vec::len).collect()
    }

    /// Exact live-real profile this engine will produce.
    pub fn expected_profile(&self) -> &[u64] {
        &self.profile
    }

    pub fn evaluate(&self, x: &[T], scratch: &mut DofScratch<T>) -> Result<DofResult<T>> {
        self.run(x, scratch, None)
    }

    /// Evaluates and records every slot's state (inputs first).
    pub fn evaluate_traced(&self, x: &[T]) -> Result<(DofResult<T>, Vec<DofState<T>>)> {
        let mut trace = Vec::with_capacity(self.graph.n_slots());
        let result = self.run(x, &mut DofScratch::new(), Some(&mut trace))?;
        Ok((result, trace))
    }

    fn scatter(&self, slot: usize, packed: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.dec.rank()];
        for (&k, &v) in self.support[slot].iter().zip(packed) {
            g[k] = v;
        }
        g
    }

    #[inline]
    fn signed_dot(&self, a: &[T], b: &[T], rows: &[usize]) -> T {
        if self.all_positive {
            a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
        } else {
            let d = &self.dec.d;
            a.iter().zip(b).zip(rows).fold(T::zero(), |acc, ((&x, &y), &k)| {
                if d[k] < 0 {
                    acc - x * y
                } else {
                    acc + x * y
                }
            })
        }
    }

    fn run(
        &self,
        x: &[T],
        scratch: &mut DofScratch<T>,
        mut trace: Option<&mut Vec<DofState<T>>>,
    ) -> Result<DofResult<T>> {
        let graph = self.graph;
        graph.check_point(x)?;
        let n = graph.n_inputs();
        let slots = graph.n_slots();
        let topo = graph.topology();
        let fp = costmodel::run_fingerprint(graph.fingerprint(), self.spec.a_fingerprint(), x);
        let mut cost = CostReport::new(self.method, n, self.dec.rank(), &self.stats, fp);
        cost.predicted_peak = self.predicted_peak;

        for slot in 0..scratch.states.len() {
            scratch.release(slot);
        }
        scratch.states.resize_with(slots, || None);
        scratch.values.clear();
        scratch.values.extend_from_slice(x);
        scratch.values.resize(slots, T::zero());
        scratch.s.clear();
        scratch.s.resize(slots, T::zero());
        scratch.t.clear();
        if self.first_order {
            scratch.t.extend_from_slice(&self.spec.b);
            scratch.t.resize(slots, T::zero());
        }
        scratch.grams.clear();
        scratch.grams.resize(self.grams.len(), T::zero());

        let mut live = 0u64;
        for &m in &self.used_inputs {
            let mut buf = scratch.take(self.seeds[m].len());
            buf.copy_from_slice(&self.seeds[m]);
            live += buf.len() as u64;
            scratch.states[m] = Some(buf);
        }
        if let Some(tr) = trace.as_deref_mut() {
            for m in 0..n {
                tr.push(DofState {
                    v: x[m],
                    g: self.scatter(m, &self.seeds[m]),
                    s: T::zero(),
                    t: self.first_order.then(|| self.spec.b[m]),
                });
            }
        }

        let mut local = std::mem::take(&mut scratch.local);
        for j in 0..graph.n_nodes() {
            let sj = n + j;
            graph.local(j, &scratch.values, &mut local);
            cost.scalar_mults += local.mults;
            cost.transcendental_calls += local.transcendental;
            if !local.value.is_finite() {
                scratch.local = local;
                return Err(Error::NonFinite { node: NodeId::internal(j), what: "value" });
            }
            scratch.values[sj] = local.value;

            let mut buf = scratch.take(self.support[sj].len());
            let mut sv = T::zero();
            let mut tv = T::zero();
            for (a, &p) in topo.parents[j].iter().enumerate() {
                let w = local.d1[a];
                let pg = scratch.states[p].as_deref().expect("parent state released early");
                match &self.edge_maps[j][a] {
                    None => {
                        for (o, &v) in buf.iter_mut().zip(pg) {
                            *o = *o + w * v;
                        }
                    }
                    Some(map) => {
                        for (&q, &v) in map.iter().zip(pg) {
                            buf[q] = buf[q] + w * v;
                        }
                    }
                }
                cost.tangent_flops += pg.len() as u64;
                sv = sv + w * scratch.s[p];
                cost.scalar_mults += 1;
                if self.first_order {
                    tv = tv + w * scratch.t[p];
                    cost.scalar_mults += 1;
                }
            }
            for &gid in &self.gram_at[j] {
                let gram = &self.grams[gid];
                let gi = scratch.states[gram.i].as_deref().expect("gram operand released");
                let gl = scratch.states[gram.l].as_deref().expect("gram operand released");
                let (value, count) = match &gram.kind {
                    GramKind::Same => (self.signed_dot(gi, gl, &self.support[gram.i]), gi.len()),
                    GramKind::Intersect(matched) => {
                        let rows = &self.support[gram.i];
                        let d = &self.dec.d;
                        let v = matched.iter().fold(T::zero(), |acc, &(p, q)| {
                            let prod = gi[p] * gl[q];
                            if d[rows[p]] < 0 {
                                acc - prod
                            } else {
                                acc + prod
                            }
                        });
                        (v, matched.len())
                    }
                };
                scratch.grams[gid] = value;
                cost.second_order_pair_flops += count as u64;
            }
            for (k, &gid) in self.pair_gram[j].iter().enumerate() {
                let (a, b) = topo.pairs[j][k];
                let term = local.d2[k] * scratch.grams[gid];
                sv = if a == b { sv + term } else { sv + term + term };
                cost.second_order_pair_flops += 1;
            }
            if !sv.is_finite() {
                scratch.local = local;
                return Err(Error::NonFinite { node: NodeId::internal(j), what: "operator channel" });
            }
            scratch.s[sj] = sv;
            if self.first_order {
                scratch.t[sj] = tv;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(DofState {
                    v: local.value,
                    g: self.scatter(sj, &buf),
                    s: sv,
                    t: self.first_order.then_some(tv),
                });
            }
            live += buf.len() as u64;
            scratch.states[sj] = Some(buf);
            cost.profile.push(live);
            debug_assert!(live <= self.profile[j], "live count exceeds the predicted profile at node {j}");
            for &slot in &self.release_at[j] {
                live -= scratch.release(slot);
            }
        }
        scratch.local = local;

        let out = slots - 1;
        let value = scratch.values[out];
        let mut operator_value = scratch.s[out];
        if self.first_order {
            operator_value = operator_value + scratch.t[out];
        }
        if self.spec.c != T::zero() {
            operator_value = operator_value + self.spec.c * value;
            cost.scalar_mults += 1;
        }
        let g_out = self.scatter(out, scratch.states[out].as_deref().unwrap_or(&[]));
        scratch.release(out);
        cost.finish();
        Ok(DofResult { value, operator_value, g_out, cost })
    }
}

/// One-shot `ℒφ(x)` by forward propagation.
pub fn dof_evaluate<T: Scalar>(
    graph: &Graph<T>,
    dec: &Decomposition<T>,
    spec: &OperatorSpec<T>,
    x: &[T],
) -> Result<DofResult<T>> {
    DofEngine::new(graph, dec, spec)?.evaluate(x, &mut DofScratch::new())
}

/// Coefficients `A(x), b(x), c(x)` frozen at the evaluation point, then
/// decomposed and propagated.
pub fn dof_evaluate_field<T: Scalar>(
    graph: &Graph<T>,
    field: impl Fn(&[T]) -> OperatorSpec<T>,
    x: &[T],
) -> Result<DofResult<T>> {
    let spec = field(x);
    let dec = crate::operator::decompose(&spec, None)?;
    dof_evaluate(graph, &dec, &spec, x)
}

/// Laplacian engine: `L = I`, `D = I`, `b = 0`, `c = 0`.
pub struct ForwardLaplacian<T> {
    dec: Decomposition<T>,
    spec: OperatorSpec<T>,
}

impl<T: Scalar> ForwardLaplacian<T> {
    pub fn new(n: usize) -> Self {
        Self { dec: Decomposition::identity(n), spec: OperatorSpec::laplacian(n) }
    }

    pub fn engine<'a>(&'a self, graph: &'a Graph<T>) -> Result<DofEngine<'a, T>> {
        DofEngine::with_method(graph, &self.dec, &self.spec, Method::ForwardLaplacian)
    }
}

/// `Δφ(x)` with per-node states `(v, ∇v, Δv)`.
pub fn forward_laplacian<T: Scalar>(graph: &Graph<T>, x: &[T]) -> Result<DofResult<T>> {
    let fl = ForwardLaplacian::new(graph.n_inputs());
    fl.engine(graph)?.evaluate(x, &mut DofScratch::new())
}

/// Layer-wise evaluation of a dense MLP using
/// `Σ_{j,l} ∂²F_i/∂u_j∂u_l · g_jᵀDg_l = (σ''/σ'²)(a_i) · |g_i^{post}|²_D`,
/// which needs one Gram entry per unit.
///
/// The MLP carries no `b`/`c` terms here; the result is `Σ aᵢⱼ∂²ᵢⱼφ`.
pub fn dof_evaluate_mlp_fused<T: Scalar>(mlp: &Mlp<T>, dec: &Decomposition<T>, x: &[T]) -> Result<DofResult<T>> {
    let n = mlp.input_dim();
    if dec.n() != n {
        return Err(Error::DimensionMismatch { expected: n, found: dec.n() });
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "evaluation point" });
    }
    let r = dec.rank();
    let stats = mlp.edge_stats();
    let fp = costmodel::run_fingerprint(mlp.graph_fingerprint(), dec.source_fingerprint(), x);
    let mut cost = CostReport::new(Method::DofFused, n, r, stats, fp);
    cost.predicted_peak = costmodel::predict_memory_profile(stats, n, r, Method::DofFused).peak;
    let all_positive = dec.is_elliptic();
    let gram = |g: &[T]| -> T {
        if all_positive {
            g.iter().fold(T::zero(), |acc, &v| acc + v * v)
        } else {
            g.iter().zip(&dec.d).fold(T::zero(), |acc, (&v, &d)| if d < 0 { acc - v * v } else { acc + v * v })
        }
    };
    let threshold = T::lit(FUSED_FALLBACK_THRESHOLD);

    let mut u: Vec<T> = x.to_vec();
    let mut s = vec![T::zero(); n];
    let mut g = dec.l.transpose();
    let mut node = 0usize;
    let layers = mlp.layers();
    for (li, layer) in layers.iter().enumerate() {
        let out_dim = layer.weights.rows();
        let mut pre = vec![T::zero(); out_dim];
        let mut s_pre = vec![T::zero(); out_dim];
        let mut g_pre = Matrix::zeros(out_dim, r);
        for i in 0..out_dim {
            let w_row = layer.weights.row(i);
            let mut v = layer.bias[i];
            let mut sv = T::zero();
            let dst = g_pre.row_mut(i);
            for (jj, &w) in w_row.iter().enumerate() {
                v = v + w * u[jj];
                sv = sv + w * s[jj];
                for (o, &gv) in dst.iter_mut().zip(g.row(jj)) {
                    *o = *o + w * gv;
                }
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { node: NodeId::internal(node + i), what: "value" });
            }
            pre[i] = v;
            s_pre[i] = sv;
            cost.tangent_flops += (r * w_row.len()) as u64;
            cost.scalar_mults += 2 * w_row.len() as u64;
        }
        cost.profile.push((r * (g.rows() + out_dim)) as u64);
        node += out_dim;
        if li + 1 == layers.len() {
            u = pre;
            s = s_pre;
            g = g_pre;
            break;
        }
        let act = mlp.activation();
        for i in 0..out_dim {
            let (v, d1, d2) = act.eval(pre[i]);
            cost.scalar_mults += act.local_mults();
            cost.transcendental_calls += act.transcendental_calls();
            let row = g_pre.row_mut(i);
            let second = if d1.abs() >= threshold {
                for o in row.iter_mut() {
                    *o = *o * d1;
                }
                let q = gram(row);
                cost.scalar_mults += 2;
                (d2 / (d1 * d1)) * q
            } else {
                let q = gram(row);
                for o in row.iter_mut() {
                    *o = *o * d1;
                }
                cost.fallback_units += 1;
                cost.scalar_mults += 1;
                d2 * q
            };
            cost.tangent_flops += r as u64;
            cost.second_order_pair_flops += r as u64;
            let sv = d1 * s_pre[i] + second;
            cost.scalar_mults += 1;
            if !sv.is_finite() {
                return Err(Error::NonFinite { node: NodeId::internal(node + i), what: "operator channel" });
            }
            pre[i] = v;
            s_pre[i] = sv;
        }
        node += out_dim;
        u = pre;
        s = s_pre;
        g = g_pre;
    }
    cost.finish();
    Ok(DofResult { value: u[0], operator_value: s[0], g_out: g.row(0).to_vec(), cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, OpKind};
    use crate::numerics::SymMat;
    use crate::operator::decompose;

    fn x(k: usize) -> NodeId {
        NodeId::input(k)
    }

    fn run(g: &Graph<f64>, a: SymMat<f64>, point: &[f64]) -> DofResult<f64> {
        let spec = OperatorSpec::second_order(a);
        let dec = decompose(&spec, None).unwrap();
        dof_evaluate(g, &dec, &spec, point).unwrap()
    }

    #[test]
    fn sum_of_squares_laplacian() {
        let g = Graph::new(
            2,
            vec![
                OpKind::Unary { f: Activation::Square, arg: x(0) },
                OpKind::Unary { f: Activation::Square, arg: x(1) },
                OpKind::Affine { weights: vec![(NodeId::internal(0), 1.0), (NodeId::internal(1), 1.0)], bias: 0.0 },
            ],
        )
        .unwrap();
        let res = run(&g, SymMat::identity(2), &[1.0, 2.0]);
        assert_eq!(res.value, 5.0);
        assert_eq!(res.operator_value, 4.0);
    }

    #[test]
    fn mixed_partial_with_swap_matrix() {
        let g = Graph::new(2, vec![OpKind::Mul { lhs: x(0), rhs: x(1) }]).unwrap();
        let a = SymMat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let res = run(&g, a, &[3.0, 5.0]);
        assert!((res.operator_value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn signed_operator() {
        let g = Graph::new(2, vec![OpKind::Unary { f: Activation::Square, arg: x(0) }]).unwrap();
        for p in [[0.3, -1.0], [4.0, 2.0]] {
            assert_eq!(run(&g, SymMat::from_diag(&[-1.0, 1.0]), &p).operator_value, -2.0);
        }
    }

    #[test]
    fn first_order_and_zeroth_order_terms() {
        // φ = tanh(x0) + x1, A = 0, b = (1, 0), c = 2  →  ℒφ = sech²(x0) + 2φ
        let g = Graph::new(
            2,
            vec![
                OpKind::Unary { f: Activation::Tanh, arg: x(0) },
                OpKind::Affine { weights: vec![(NodeId::internal(0), 1.0), (x(1), 1.0)], bias: 0.0 },
            ],
        )
        .unwrap();
        let spec = OperatorSpec::new(SymMat::zeros(2), vec![1.0, 0.0], 2.0).unwrap();
        let dec = decompose(&spec, None).unwrap();
        assert_eq!(dec.rank(), 0);
        let p = [0.4f64, -0.7];
        let res = dof_evaluate(&g, &dec, &spec, &p).unwrap();
        let phi = p[0].tanh() + p[1];
        let expected = 1.0 - p[0].tanh().powi(2) + 2.0 * phi;
        assert!((res.operator_value - expected).abs() < 1e-15);
    }

    #[test]
    fn laplacian_of_norm_squared() {
        let g = Graph::new(3, vec![OpKind::SumProduct { terms: vec![vec![x(0), x(0)], vec![x(1), x(1)], vec![x(2), x(2)]] }])
            .unwrap();
        let res = forward_laplacian(&g, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(res.operator_value, 6.0);
        assert_eq!(res.cost.method, Method::ForwardLaplacian);
    }

    #[test]
    fn laplacian_of_sine_product() {
        let g = Graph::new(
            2,
            vec![
                OpKind::Unary { f: Activation::Sin, arg: x(0) },
                OpKind::Unary { f: Activation::Sin, arg: x(1) },
                OpKind::Mul { lhs: NodeId::internal(0), rhs: NodeId::internal(1) },
            ],
        )
        .unwrap();
        let h = std::f64::consts::FRAC_PI_2;
        let res = forward_laplacian(&g, &[h, h]).unwrap();
        assert!((res.operator_value + 2.0).abs() < 1e-14);
    }

    #[test]
    fn mismatched_spec_rejected() {
        let g = Graph::new(2, vec![OpKind::Mul { lhs: x(0), rhs: x(1) }]).unwrap();
        let spec = OperatorSpec::<f64>::laplacian(2);
        let other = OperatorSpec::second_order(SymMat::from_diag(&[2.0, 1.0]));
        let dec = decompose(&other, None).unwrap();
        assert!(matches!(dof_evaluate(&g, &dec, &spec, &[1.0, 1.0]), Err(Error::DecompositionMismatch { .. })));
        let spec3 = OperatorSpec::<f64>::laplacian(3);
        let dec3 = decompose(&spec3, None).unwrap();
        assert!(matches!(dof_evaluate(&g, &dec3, &spec3, &[1.0, 1.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn nan_reports_node() {
        let g = Graph::new(
            1,
            vec![
                OpKind::Mul { lhs: x(0), rhs: x(0) },
                OpKind::Mul { lhs: NodeId::internal(0), rhs: NodeId::internal(0) },
                OpKind::Mul { lhs: NodeId::internal(1), rhs: NodeId::internal(1) },
            ],
        )
        .unwrap();
        let spec = OperatorSpec::laplacian(1);
        let dec = decompose(&spec, None).unwrap();
        let err = dof_evaluate(&g, &dec, &spec, &[1e120]).unwrap_err();
        assert_eq!(err, Error::NonFinite { node: NodeId::internal(1), what: "value" });
    }

    #[test]
    fn pair_once_and_double_matches_full_double_sum() {
        // SumProduct with shared factors; compare s against an explicit ordered double sum
        let g = Graph::new(
            3,
            vec![OpKind::SumProduct { terms: vec![vec![x(0), x(1), x(2)], vec![x(1), x(1), x(0)]] }],
        )
        .unwrap();
        let spec = OperatorSpec::second_order(
            SymMat::from_rows(&[vec![1.0, 0.3, -0.2], vec![0.3, -2.0, 0.5], vec![-0.2, 0.5, 0.7]]).unwrap(),
        );
        let dec = decompose(&spec, None).unwrap();
        let p = [0.7f64, -1.3, 0.4];
        let res = dof_evaluate(&g, &dec, &spec, &p).unwrap();
        // ∂²φ by hand: φ = x0 x1 x2 + x1² x0
        let h = [
            [0.0, p[2] + 2.0 * p[1], p[1]],
            [p[2] + 2.0 * p[1], 2.0 * p[0], p[0]],
            [p[1], p[0], 0.0],
        ];
        let mut full = 0.0f64;
        for i in 0..3 {
            for l in 0..3 {
                full += spec.a.get(i, l) * h[i][l];
            }
        }
        assert!((res.operator_value - full).abs() < 1e-13, "{} vs {full}", res.operator_value);
    }

    #[test]
    fn liveness_releases_states() {
        let mut nodes = vec![OpKind::Unary { f: Activation::Tanh, arg: x(0) }];
        for j in 1..6 {
            nodes.push(OpKind::Unary { f: Activation::Tanh, arg: NodeId::internal(j - 1) });
        }
        let g = Graph::new(1, nodes).unwrap();
        let res = forward_laplacian(&g, &[0.2]).unwrap();
        assert_eq!(res.cost.profile, vec![2; 6]);
        assert_eq!(res.cost.peak_live_reals, 2);
    }

    #[test]
    fn scratch_reuse_is_bit_identical() {
        let g = Graph::new(
            2,
            vec![
                OpKind::Mul { lhs: x(0), rhs: x(1) },
                OpKind::Unary { f: Activation::Sigmoid, arg: NodeId::internal(0) },
            ],
        )
        .unwrap();
        let spec = OperatorSpec::second_order(SymMat::from_rows(&[vec![1.0, 0.5], vec![0.5, -1.0]]).unwrap());
        let dec = decompose(&spec, None).unwrap();
        let engine = DofEngine::new(&g, &dec, &spec).unwrap();
        let mut scratch = DofScratch::new();
        let a = engine.evaluate(&[0.3, 0.9], &mut scratch).unwrap();
        let _ = engine.evaluate(&[-2.0, 1.0], &mut scratch).unwrap();
        let b = engine.evaluate(&[0.3, 0.9], &mut scratch).unwrap();
        assert_eq!(a, b);
    }
}
