//! Multiplication counters, closed-form FLOP predictions and the live-state
//! memory model.
//!
//! Only multiplications count as FLOPs. `mults` is the headline figure:
//! tangent propagation plus the second-order pair terms. Scalar bookkeeping
//! (node values, the `s`/`t` channels, adjoint scalars) and the final
//! `⟨A, H⟩` contraction are tracked in their own fields.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeStats, Graph};
use crate::operator::Decomposition;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dof,
    DofFused,
    ForwardLaplacian,
    Hessian,
    Hvp,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Dof, Method::DofFused, Method::ForwardLaplacian, Method::Hessian, Method::Hvp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Dof => "dof",
            Method::DofFused => "dof_fused",
            Method::ForwardLaplacian => "forward_laplacian",
            Method::Hessian => "hessian",
            Method::Hvp => "hvp",
        }
    }

    pub fn is_forward(self) -> bool {
        matches!(self, Method::Dof | Method::DofFused | Method::ForwardLaplacian)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub n: usize,
    /// Tangent width: `r` for forward methods and HVP, `N` for the full Hessian.
    pub rank: usize,
    /// Evaluation points folded into this report.
    pub points: u64,
    pub mults: u64,
    pub tangent_flops: u64,
    pub second_order_pair_flops: u64,
    pub scalar_mults: u64,
    pub transcendental_calls: u64,
    pub contraction_flops: u64,
    pub peak_live_reals: u64,
    pub predicted_peak: u64,
    pub profile: Vec<u64>,
    pub e_count: u64,
    pub t_count: u64,
    pub r_count: u64,
    pub r_diag_count: u64,
    /// Fused path only: units that fell back to the generic rule.
    pub fallback_units: u64,
    pub fingerprint: u64,
}

impl CostReport {
    pub(crate) fn new(method: Method, n: usize, rank: usize, stats: &EdgeStats, fingerprint: u64) -> Self {
        Self {
            method,
            n,
            rank,
            points: 1,
            mults: 0,
            tangent_flops: 0,
            second_order_pair_flops: 0,
            scalar_mults: 0,
            transcendental_calls: 0,
            contraction_flops: 0,
            peak_live_reals: 0,
            predicted_peak: 0,
            profile: Vec::new(),
            e_count: stats.e_count,
            t_count: stats.t_count,
            r_count: stats.r_count,
            r_diag_count: stats.r_diag_count,
            fallback_units: 0,
            fingerprint,
        }
    }

    pub(crate) fn finish(&mut self) {
        self.mults = self.tangent_flops + self.second_order_pair_flops;
        self.peak_live_reals = self.profile.iter().copied().max().unwrap_or(0);
    }

    /// Folds another point's report in: counters add, peaks and profiles take
    /// the maximum, fingerprints chain in order.
    pub fn merge(&mut self, other: &CostReport) -> Result<()> {
        if self.method != other.method {
            return Err(Error::FingerprintMismatch { left: self.fingerprint, right: other.fingerprint });
        }
        self.points += other.points;
        self.mults += other.mults;
        self.tangent_flops += other.tangent_flops;
        self.second_order_pair_flops += other.second_order_pair_flops;
        self.scalar_mults += other.scalar_mults;
        self.transcendental_calls += other.transcendental_calls;
        self.contraction_flops += other.contraction_flops;
        self.fallback_units += other.fallback_units;
        self.peak_live_reals = self.peak_live_reals.max(other.peak_live_reals);
        self.predicted_peak = self.predicted_peak.max(other.predicted_peak);
        if self.profile.len() < other.profile.len() {
            self.profile.resize(other.profile.len(), 0);
        }
        for (a, &b) in self.profile.iter_mut().zip(&other.profile) {
            *a = (*a).max(b);
        }
        self.fingerprint = chain_fingerprint(self.fingerprint, other.fingerprint);
        Ok(())
    }

    /// Slack for the half-cost bound: `0.5·|T|` plus the Gram entries `gᵢᵀDgᵢ`
    /// on the diagonal of `R`, which cost `r` each rather than `r/2`.
    pub fn half_cost_slack(&self) -> f64 {
        let per_point = 0.5 * self.t_count as f64 + 0.5 * self.rank as f64 * self.r_diag_count as f64;
        per_point * self.points as f64
    }
}

pub(crate) fn chain_fingerprint(a: u64, b: u64) -> u64 {
    let mut h = DefaultHasher::new();
    a.hash(&mut h);
    b.hash(&mut h);
    h.finish()
}

pub(crate) fn run_fingerprint<T: Scalar>(graph_fp: u64, a_fp: u64, x: &[T]) -> u64 {
    let mut h = DefaultHasher::new();
    graph_fp.hash(&mut h);
    a_fp.hash(&mut h);
    for v in x {
        v.fingerprint_bits().hash(&mut h);
    }
    h.finish()
}

#[inline]
fn half_ceil(twice: u64) -> u64 {
    twice.div_ceil(2)
}

/// Closed-form multiplication counts.
///
/// * forward methods: `0.5·r·|R| + r·|E| + 0.5·|T|`
/// * Hessian: `n·(|R| + 2|E|) + 0.5·|T|`
/// * HVP: `r·(|R| + 2|E|) + 0.5·|T|` (adjoint scalars shared across the `r` passes)
pub fn predict_flops(stats: &EdgeStats, n: usize, r: usize, method: Method) -> u64 {
    let (e, t, rr) = (stats.e_count, stats.t_count, stats.r_count);
    let (n, r) = (n as u64, r as u64);
    match method {
        Method::Dof | Method::DofFused | Method::ForwardLaplacian => half_ceil(r * rr + 2 * r * e + t),
        Method::Hessian => half_ceil(2 * n * (rr + 2 * e) + t),
        Method::Hvp => half_ceil(2 * r * (rr + 2 * e) + t),
    }
}

/// Row indices of `L` each slot's `g` can be nonzero on, from the input
/// columns of `L` and graph reachability.
pub fn tangent_supports<T: Scalar>(graph: &Graph<T>, dec: &Decomposition<T>) -> Vec<BTreeSet<usize>> {
    let n = graph.n_inputs();
    let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(graph.n_slots());
    for m in 0..n {
        sets.push((0..dec.rank()).filter(|&k| dec.l.get(k, m) != T::zero()).collect());
    }
    for j in 0..graph.n_nodes() {
        let mut s = BTreeSet::new();
        for p in graph.parents(j) {
            s.extend(sets[p.slot(n)].iter().copied());
        }
        sets.push(s);
    }
    sets
}

/// Support-aware DOF count: `Σ_{i→j} |Sᵢ| + 0.5·Σ_{(i,l)∈R} |Sᵢ ∩ Sₗ| + 0.5·|T|`.
///
/// Reduces to [`predict_flops`] when every support is full.
pub fn predict_dof_flops_sparse<T: Scalar>(graph: &Graph<T>, dec: &Decomposition<T>) -> u64 {
    let n = graph.n_inputs();
    let sets = tangent_supports(graph, dec);
    let mut twice = 0u64;
    let mut r_set = BTreeSet::new();
    for j in 0..graph.n_nodes() {
        for p in graph.parents(j) {
            twice += 2 * sets[p.slot(n)].len() as u64;
        }
    }
    for (i, l, _) in graph.second_order_triples() {
        twice += 1;
        r_set.insert((i.slot(n), l.slot(n)));
    }
    for (i, l) in r_set {
        twice += sets[i].intersection(&sets[l]).count() as u64;
    }
    half_ceil(twice)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub profile: Vec<u64>,
    pub peak: u64,
}

impl MemoryProfile {
    fn from_profile(profile: Vec<u64>) -> Self {
        let peak = profile.iter().copied().max().unwrap_or(0);
        Self { profile, peak }
    }
}

/// Live tangent reals per step.
///
/// Forward methods: `C(j) = Σ_{i ≤ j ≤ τ(i)} wᵢ` with `wᵢ = r`.
/// Hessian (`r` ignored, width `n`) and HVP (width 1): forward tangents stay
/// live until the reverse sweep no longer reads them; the profile lists the
/// forward steps followed by the reverse steps.
pub fn predict_memory_profile(stats: &EdgeStats, n: usize, r: usize, method: Method) -> MemoryProfile {
    match method {
        Method::Dof | Method::DofFused | Method::ForwardLaplacian => {
            let widths: Vec<u64> = vec![r as u64; stats.tau.len()];
            forward_profile(stats, &widths)
        }
        Method::Hessian => reverse_profile(stats, n as u64),
        Method::Hvp => reverse_profile(stats, 1),
    }
}

/// [`predict_memory_profile`] for forward methods with per-slot support widths.
pub fn predict_forward_profile_sparse(stats: &EdgeStats, widths: &[u64]) -> MemoryProfile {
    forward_profile(stats, widths)
}

fn forward_profile(stats: &EdgeStats, widths: &[u64]) -> MemoryProfile {
    let n = stats.n_inputs;
    let profile = (0..stats.n_nodes)
        .map(|j| {
            (0..=n + j)
                .filter(|&i| stats.tau[i].is_some_and(|t| t >= j))
                .map(|i| widths[i])
                .sum()
        })
        .collect();
    MemoryProfile::from_profile(profile)
}

fn reverse_profile(stats: &EdgeStats, w: u64) -> MemoryProfile {
    let n = stats.n_inputs;
    let slots = stats.tau.len();
    let output = slots - 1;
    let mut profile = Vec::with_capacity(2 * slots);
    let mut live = w * stats.tau[..n].iter().filter(|t| t.is_some()).count() as u64;
    for _ in 0..stats.n_nodes {
        live += w;
        profile.push(live);
    }
    // adjoint tangents first touched at the reverse step of their last consumer
    let mut first_touch = vec![0u64; stats.n_nodes];
    for s in 0..output {
        if let Some(t) = stats.tau[s] {
            first_touch[t] += 1;
        }
    }
    let mut released_at = vec![0u64; slots];
    for s in 0..slots {
        if stats.tau[s].is_some() {
            released_at[stats.tangent_last_use[s]] += 1;
        }
    }
    for s in (0..slots).rev() {
        if stats.tau[s].is_none() {
            continue;
        }
        if s == output {
            live += w;
        }
        if s >= n {
            live += w * first_touch[s - n];
        }
        profile.push(live);
        if s >= n {
            live -= w;
        }
        live -= w * released_at[s];
    }
    MemoryProfile::from_profile(profile)
}

/// DOF-vs-baseline comparison of two reports from the same inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub method: Method,
    pub baseline: Method,
    /// method mults / baseline mults
    pub flop_ratio: f64,
    /// method peak / baseline peak
    pub memory_ratio: f64,
    /// baseline mults / method mults (larger favours the method)
    pub flop_speedup: f64,
    /// baseline peak / method peak
    pub memory_reduction: f64,
    /// `mults <= 0.5·baseline + slack` (see [`CostReport::half_cost_slack`])
    pub half_cost_holds: bool,
    /// `peak < baseline peak`
    pub memory_bound_holds: bool,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

pub fn summarize(cost: &CostReport, base: &CostReport) -> Result<RatioSummary> {
    if cost.fingerprint != base.fingerprint {
        return Err(Error::FingerprintMismatch { left: cost.fingerprint, right: base.fingerprint });
    }
    let bound = 0.5 * base.mults as f64 + cost.half_cost_slack();
    Ok(RatioSummary {
        method: cost.method,
        baseline: base.method,
        flop_ratio: ratio(cost.mults, base.mults),
        memory_ratio: ratio(cost.peak_live_reals, base.peak_live_reals),
        flop_speedup: ratio(base.mults, cost.mults),
        memory_reduction: ratio(base.peak_live_reals, cost.peak_live_reals),
        half_cost_holds: cost.mults as f64 <= bound,
        memory_bound_holds: cost.peak_live_reals < base.peak_live_reals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, NodeId, OpKind};

    fn chain(len: usize) -> Graph<f64> {
        let mut nodes = vec![OpKind::Unary { f: Activation::Tanh, arg: NodeId::input(0) }];
        for j in 1..len {
            nodes.push(OpKind::Unary { f: Activation::Sin, arg: NodeId::internal(j - 1) });
        }
        Graph::new(1, nodes).unwrap()
    }

    #[test]
    fn mul_node_closed_forms() {
        let g = Graph::<f64>::new(2, vec![OpKind::Mul { lhs: NodeId::input(0), rhs: NodeId::input(1) }]).unwrap();
        let s = g.edge_stats();
        assert_eq!(predict_flops(&s, 2, 2, Method::Hessian), 13);
        assert_eq!(predict_flops(&s, 2, 2, Method::Dof), 7);
    }

    #[test]
    fn affine_chain_is_exactly_half() {
        let nodes = (0..5)
            .map(|j| OpKind::Affine {
                weights: vec![(if j == 0 { NodeId::input(0) } else { NodeId::internal(j - 1) }, 2.0)],
                bias: 1.0,
            })
            .collect();
        let g = Graph::<f64>::new(1, nodes).unwrap();
        let s = g.edge_stats();
        for n in [1, 4, 16] {
            assert_eq!(2 * predict_flops(&s, n, n, Method::Dof), predict_flops(&s, n, n, Method::Hessian));
        }
    }

    #[test]
    fn chain_peak_is_two_states() {
        let g = chain(6);
        let s = g.edge_stats();
        for r in [1, 3] {
            let p = predict_memory_profile(&s, 1, r, Method::Dof);
            assert_eq!(p.peak, 2 * r as u64);
        }
    }

    #[test]
    fn hessian_peak_exceeds_n_vertices() {
        let g = chain(6);
        let s = g.edge_stats();
        let p = predict_memory_profile(&s, 3, 3, Method::Hessian);
        assert!(p.peak > 3 * s.n_vertices() as u64);
    }

    #[test]
    fn all_feed_output_reaches_bound() {
        let g = Graph::<f64>::new(
            3,
            vec![OpKind::SumProduct {
                terms: vec![vec![NodeId::input(0), NodeId::input(1)], vec![NodeId::input(2)]],
            }],
        )
        .unwrap();
        let s = g.edge_stats();
        let p = predict_memory_profile(&s, 3, 3, Method::Dof);
        assert_eq!(p.peak, 3 * s.n_vertices() as u64);
    }

    #[test]
    fn summarize_equal_reports() {
        let g = chain(3);
        let s = g.edge_stats();
        let mut r = CostReport::new(Method::Dof, 1, 1, &s, 7);
        r.tangent_flops = 10;
        r.profile = vec![2, 2, 2];
        r.finish();
        let sum = summarize(&r, &r).unwrap();
        assert_eq!((sum.flop_ratio, sum.memory_ratio, sum.flop_speedup, sum.memory_reduction), (1.0, 1.0, 1.0, 1.0));
        assert!(!sum.memory_bound_holds);
    }

    #[test]
    fn summarize_rejects_foreign_reports() {
        let s = chain(2).edge_stats();
        let a = CostReport::new(Method::Dof, 1, 1, &s, 1);
        let b = CostReport::new(Method::Hessian, 1, 1, &s, 2);
        assert!(matches!(summarize(&a, &b), Err(Error::FingerprintMismatch { .. })));
    }
}
