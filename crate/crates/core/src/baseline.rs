//! Hessian-based reference: reverse-mode adjoints, then forward-mode
//! tangents pushed through both the base graph and its adjoint graph.
//!
//! With `∇v` the forward tangent of a node and `∇v̂` the tangent of its
//! adjoint `∂φ/∂v`,
//!
//! ```text
//! ∇v̂ⁱ = Σ_{j,l} ∂²F_j/∂vˡ∂vⁱ · ∂φ/∂vʲ · ∇vˡ + Σ_j ∂F_j/∂vⁱ · ∇v̂ʲ
//! ```
//!
//! and the adjoint tangents of the inputs are the rows of the Hessian. The
//! second-order weights `c_il = Σ_j ∂²F_j/∂vⁱ∂vˡ · ∂φ/∂vʲ` only depend on
//! scalars, so they are formed once and shared by every tangent width.
//!
//! Forward tangents cannot be dropped until the reverse sweep has consumed
//! them, which is what makes this method's peak memory larger.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::costmodel::{self, CostReport, Method};
use crate::error::{Error, Result};
use crate::graph::{EdgeStats, Graph, Local, NodeId};
use crate::numerics::SymMat;
use crate::operator::{apply_to_hessian, contraction_mults, Decomposition, OperatorSpec};
use crate::scalar::Scalar;

/// Reverse-mode gradient graph: one adjoint per base node, fed by the
/// node's consumers.
#[derive(Clone, Debug)]
pub struct AdjointGraph<'a, T> {
    base: &'a Graph<T>,
    /// For each slot, `(consumer j, operand position in j)`.
    incoming: Vec<Vec<(usize, usize)>>,
}

/// Result of a forward evaluation plus one reverse sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointValues<T> {
    pub value: T,
    /// Node values by slot.
    pub values: Vec<T>,
    /// `∂φ/∂vⁱ` by slot.
    pub adjoints: Vec<T>,
}

impl<T: Scalar> AdjointValues<T> {
    pub fn gradient(&self, n_inputs: usize) -> Vec<T> {
        self.adjoints[..n_inputs].to_vec()
    }
}

pub fn build_adjoint<T: Scalar>(g: &Graph<T>) -> AdjointGraph<'_, T> {
    let topo = g.topology();
    let mut incoming = vec![Vec::new(); g.n_slots()];
    for (j, parents) in topo.parents.iter().enumerate() {
        for (a, &p) in parents.iter().enumerate() {
            incoming[p].push((j, a));
        }
    }
    AdjointGraph { base: g, incoming }
}

impl<'a, T: Scalar> AdjointGraph<'a, T> {
    pub fn base(&self) -> &Graph<T> {
        self.base
    }

    /// Number of adjoint nodes; equals the number of base nodes.
    pub fn n_nodes(&self) -> usize {
        self.base.n_nodes()
    }

    /// Consumers feeding the adjoint of `id`.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.incoming[id.slot(self.base.n_inputs())].iter().map(|&(j, _)| NodeId::internal(j)).collect()
    }

    pub fn evaluate(&self, x: &[T]) -> Result<AdjointValues<T>> {
        let sweep = ScalarSweep::run(self.base, x, &[])?;
        Ok(AdjointValues { value: sweep.value(), values: sweep.values, adjoints: sweep.adjoints })
    }

    pub fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.evaluate(x)?.gradient(self.base.n_inputs()))
    }
}

/// Values, local derivatives and adjoints from one forward/reverse scalar pass.
struct ScalarSweep<T> {
    values: Vec<T>,
    locals: Vec<Local<T>>,
    adjoints: Vec<T>,
    /// `c_il` per unordered pair of the engine's pair table.
    pair_weights: Vec<T>,
    scalar_mults: u64,
    transcendental: u64,
    pair_mults: u64,
}

impl<T: Scalar> ScalarSweep<T> {
    fn run(g: &Graph<T>, x: &[T], triple_pair: &[Vec<usize>]) -> Result<Self> {
        g.check_point(x)?;
        let n = g.n_inputs();
        let topo = g.topology();
        let mut values = x.to_vec();
        values.resize(g.n_slots(), T::zero());
        let mut locals = Vec::with_capacity(g.n_nodes());
        let (mut scalar_mults, mut transcendental) = (0, 0);
        for j in 0..g.n_nodes() {
            let mut local = Local::default();
            g.local(j, &values, &mut local);
            if !local.value.is_finite() {
                return Err(Error::NonFinite { node: NodeId::internal(j), what: "value" });
            }
            scalar_mults += local.mults;
            transcendental += local.transcendental;
            values[n + j] = local.value;
            locals.push(local);
        }
        let mut adjoints = vec![T::zero(); g.n_slots()];
        adjoints[g.n_slots() - 1] = T::one();
        for j in (0..g.n_nodes()).rev() {
            let adj = adjoints[n + j];
            if !adj.is_finite() {
                return Err(Error::NonFinite { node: NodeId::internal(j), what: "adjoint" });
            }
            for (a, &p) in topo.parents[j].iter().enumerate() {
                adjoints[p] = adjoints[p] + locals[j].d1[a] * adj;
                scalar_mults += 1;
            }
        }
        let n_pairs = triple_pair.iter().flatten().copied().max().map_or(0, |m| m + 1);
        let mut pair_weights = vec![T::zero(); n_pairs];
        let mut pair_mults = 0;
        for (j, ids) in triple_pair.iter().enumerate() {
            let adj = adjoints[n + j];
            for (k, &id) in ids.iter().enumerate() {
                pair_weights[id] = pair_weights[id] + locals[j].d2[k] * adj;
                pair_mults += 1;
            }
        }
        Ok(Self { values, locals, adjoints, pair_weights, scalar_mults, transcendental, pair_mults })
    }

    fn value(&self) -> T {
        *self.values.last().expect("graph has nodes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct HessianResult<T> {
    pub value: T,
    pub grad: Vec<T>,
    /// Symmetrized Hessian; empty (dimension 0) for the HVP path.
    pub hess: SymMat<T>,
    pub operator_value: Option<T>,
    pub cost: CostReport,
    /// `max |H - Hᵀ|` before symmetrization.
    pub asymmetry: T,
}

/// Reverse-sweep schedule for a fixed graph, reusable across points.
pub struct HessianEngine<'a, T> {
    graph: &'a Graph<T>,
    stats: EdgeStats,
    /// For slot `s`, every `(l, pair id)` with `(s, l) ∈ R`.
    partners: Vec<Vec<(usize, usize)>>,
    triple_pair: Vec<Vec<usize>>,
    /// Slots whose adjoint tangent is first written at internal node `j`.
    first_touch: Vec<Vec<usize>>,
    /// Forward tangents no longer needed after reverse step `s`.
    release_tangent: Vec<Vec<usize>>,
    used_inputs: Vec<usize>,
}

impl<'a, T: Scalar> HessianEngine<'a, T> {
    pub fn new(graph: &'a Graph<T>) -> Self {
        let n = graph.n_inputs();
        let topo = graph.topology();
        let stats = graph.edge_stats();
        let slots = graph.n_slots();
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut partners = vec![Vec::new(); slots];
        let mut triple_pair = Vec::with_capacity(graph.n_nodes());
        for j in 0..graph.n_nodes() {
            let parents = &topo.parents[j];
            let ids = topo.pairs[j]
                .iter()
                .map(|&(a, b)| {
                    let (i, l) = (parents[a].min(parents[b]), parents[a].max(parents[b]));
                    let next = index.len();
                    *index.entry((i, l)).or_insert_with(|| {
                        partners[i].push((l, next));
                        if i != l {
                            partners[l].push((i, next));
                        }
                        next
                    })
                })
                .collect();
            triple_pair.push(ids);
        }
        let output = slots - 1;
        let mut first_touch = vec![Vec::new(); graph.n_nodes()];
        let mut release_tangent = vec![Vec::new(); slots];
        let mut used_inputs = Vec::new();
        for s in 0..slots {
            if let Some(t) = stats.tau[s] {
                if s < n {
                    used_inputs.push(s);
                }
                if s != output {
                    first_touch[t].push(s);
                }
                release_tangent[stats.tangent_last_use[s]].push(s);
            }
        }
        Self { graph, stats, partners, triple_pair, first_touch, release_tangent, used_inputs }
    }

    pub fn edge_stats(&self) -> &EdgeStats {
        &self.stats
    }

    /// One forward-over-reverse pass with `w`-wide tangents seeded at the
    /// inputs by `seed(m)`. Returns the adjoint tangents of the inputs.
    fn tangent_pass(
        &self,
        sweep: &ScalarSweep<T>,
        w: usize,
        seed: impl Fn(usize, &mut [T]),
        cost: &mut CostReport,
    ) -> Result<Vec<Vec<T>>> {
        let g = self.graph;
        let n = g.n_inputs();
        let slots = g.n_slots();
        let topo = g.topology();
        let mut live = 0u64;
        let mut profile = Vec::with_capacity(2 * slots);
        let mut tangent: Vec<Option<Vec<T>>> = vec![None; slots];
        for &m in &self.used_inputs {
            let mut t = vec![T::zero(); w];
            seed(m, &mut t);
            tangent[m] = Some(t);
            live += w as u64;
        }
        for j in 0..g.n_nodes() {
            let mut t = vec![T::zero(); w];
            for (a, &p) in topo.parents[j].iter().enumerate() {
                let d = sweep.locals[j].d1[a];
                let src = tangent[p].as_deref().expect("forward tangent missing");
                for (o, &v) in t.iter_mut().zip(src) {
                    *o = *o + d * v;
                }
                cost.tangent_flops += w as u64;
            }
            tangent[n + j] = Some(t);
            live += w as u64;
            profile.push(live);
        }

        let output = slots - 1;
        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; slots];
        for s in (0..slots).rev() {
            if self.stats.tau[s].is_none() {
                continue;
            }
            if s == output {
                adjoint[s] = Some(vec![T::zero(); w]);
                live += w as u64;
            }
            if s >= n {
                for &p in &self.first_touch[s - n] {
                    adjoint[p] = Some(vec![T::zero(); w]);
                    live += w as u64;
                }
            }
            let mut own = adjoint[s].take().expect("adjoint tangent not yet allocated");
            for &(l, id) in &self.partners[s] {
                let c = sweep.pair_weights[id];
                let src = tangent[l].as_deref().expect("forward tangent released early");
                for (o, &v) in own.iter_mut().zip(src) {
                    *o = *o + c * v;
                }
                cost.second_order_pair_flops += w as u64;
            }
            if s >= n {
                let j = s - n;
                for (a, &p) in topo.parents[j].iter().enumerate() {
                    let d = sweep.locals[j].d1[a];
                    let dst = adjoint[p].as_mut().expect("parent adjoint not allocated");
                    for (o, &v) in dst.iter_mut().zip(&own) {
                        *o = *o + d * v;
                    }
                    cost.tangent_flops += w as u64;
                }
                if own.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { node: NodeId::internal(j), what: "adjoint tangent" });
                }
            }
            profile.push(live);
            if s >= n {
                live -= w as u64;
            } else {
                adjoint[s] = Some(own);
            }
            for &l in &self.release_tangent[s] {
                tangent[l] = None;
                live -= w as u64;
            }
        }
        cost.profile = profile;
        Ok((0..n).map(|m| adjoint[m].take().unwrap_or_else(|| vec![T::zero(); w])).collect())
    }

    /// Full `N×N` Hessian from `N`-wide tangents.
    pub fn hessian(&self, x: &[T]) -> Result<HessianResult<T>> {
        self.hessian_with(x, 0)
    }

    fn hessian_with(&self, x: &[T], a_fp: u64) -> Result<HessianResult<T>> {
        let g = self.graph;
        let n = g.n_inputs();
        let sweep = ScalarSweep::run(g, x, &self.triple_pair)?;
        let fp = costmodel::run_fingerprint(g.fingerprint(), a_fp, x);
        let mut cost = CostReport::new(Method::Hessian, n, n, &self.stats, fp);
        cost.predicted_peak = costmodel::predict_memory_profile(&self.stats, n, n, Method::Hessian).peak;
        cost.scalar_mults += sweep.scalar_mults;
        cost.transcendental_calls += sweep.transcendental;
        cost.second_order_pair_flops += sweep.pair_mults;
        let rows = self.tangent_pass(&sweep, n, |m, t| t[m] = T::one(), &mut cost)?;
        let mut asymmetry = T::zero();
        for i in 0..n {
            for k in 0..i {
                asymmetry = asymmetry.max((rows[i][k] - rows[k][i]).abs());
            }
        }
        let half = T::lit(0.5);
        let hess = SymMat::from_fn(n, |i, k| if i == k { rows[i][i] } else { half * (rows[i][k] + rows[k][i]) });
        cost.finish();
        Ok(HessianResult {
            value: sweep.value(),
            grad: sweep.adjoints[..n].to_vec(),
            hess,
            operator_value: None,
            cost,
            asymmetry,
        })
    }

    /// `Σ aᵢⱼ Hᵢⱼ + b·∇φ + cφ` via the full Hessian.
    pub fn operator(&self, spec: &OperatorSpec<T>, x: &[T]) -> Result<HessianResult<T>> {
        check_dims(self.graph, spec)?;
        let mut res = self.hessian_with(x, spec.a_fingerprint())?;
        res.operator_value = Some(apply_to_hessian(spec, &res.hess, &res.grad, res.value)?);
        res.cost.contraction_flops = contraction_mults(spec);
        Ok(res)
    }

    /// `Σ_k d_k · l_kᵀ H l_k + b·∇φ + cφ` from `r` single-tangent passes.
    pub fn operator_hvp(&self, dec: &Decomposition<T>, spec: &OperatorSpec<T>, x: &[T]) -> Result<HessianResult<T>> {
        check_dims(self.graph, spec)?;
        dec.check_against(spec)?;
        let g = self.graph;
        let n = g.n_inputs();
        let r = dec.rank();
        let sweep = ScalarSweep::run(g, x, &self.triple_pair)?;
        let fp = costmodel::run_fingerprint(g.fingerprint(), spec.a_fingerprint(), x);
        let mut cost = CostReport::new(Method::Hvp, n, r, &self.stats, fp);
        cost.predicted_peak = costmodel::predict_memory_profile(&self.stats, n, r, Method::Hvp).peak;
        cost.scalar_mults += sweep.scalar_mults;
        cost.transcendental_calls += sweep.transcendental;
        cost.second_order_pair_flops += sweep.pair_mults;
        let mut total = T::zero();
        for k in 0..r {
            let u = dec.l.row(k);
            let hu = self.tangent_pass(&sweep, 1, |m, t| t[0] = u[m], &mut cost)?;
            let quad = u.iter().zip(&hu).fold(T::zero(), |acc, (&a, h)| acc + a * h[0]);
            cost.contraction_flops += n as u64;
            total = if dec.d[k] < 0 { total - quad } else { total + quad };
        }
        let value = sweep.value();
        let grad = sweep.adjoints[..n].to_vec();
        if spec.has_first_order() {
            total = total + spec.b.iter().zip(&grad).fold(T::zero(), |acc, (&b, &gr)| acc + b * gr);
            cost.contraction_flops += n as u64;
        }
        if spec.c != T::zero() {
            total = total + spec.c * value;
            cost.contraction_flops += 1;
        }
        cost.finish();
        Ok(HessianResult {
            value,
            grad,
            hess: SymMat::zeros(0),
            operator_value: Some(total),
            cost,
            asymmetry: T::zero(),
        })
    }
}

fn check_dims<T: Scalar>(g: &Graph<T>, spec: &OperatorSpec<T>) -> Result<()> {
    if g.n_inputs() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: g.n_inputs(), found: spec.dim() });
    }
    Ok(())
}

pub fn hessian_full<T: Scalar>(g: &Graph<T>, x: &[T]) -> Result<HessianResult<T>> {
    HessianEngine::new(g).hessian(x)
}

pub fn operator_via_hessian<T: Scalar>(g: &Graph<T>, spec: &OperatorSpec<T>, x: &[T]) -> Result<HessianResult<T>> {
    HessianEngine::new(g).operator(spec, x)
}

pub fn operator_via_hvp<T: Scalar>(
    g: &Graph<T>,
    dec: &Decomposition<T>,
    spec: &OperatorSpec<T>,
    x: &[T],
) -> Result<HessianResult<T>> {
    HessianEngine::new(g).operator_hvp(dec, spec, x)
}

/// `H·u` for an arbitrary direction.
pub fn hvp<T: Scalar>(g: &Graph<T>, x: &[T], u: &[T]) -> Result<Vec<T>> {
    if u.len() != g.n_inputs() {
        return Err(Error::DimensionMismatch { expected: g.n_inputs(), found: u.len() });
    }
    let engine = HessianEngine::new(g);
    let sweep = ScalarSweep::run(g, x, &engine.triple_pair)?;
    let mut cost = CostReport::new(Method::Hvp, g.n_inputs(), 1, &engine.stats, 0);
    let rows = engine.tangent_pass(&sweep, 1, |m, t| t[0] = u[m], &mut cost)?;
    Ok(rows.into_iter().map(|r| r[0]).collect())
}
