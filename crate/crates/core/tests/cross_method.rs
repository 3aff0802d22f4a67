use dof_core::baseline::{build_adjoint, hessian_full, hvp, operator_via_hessian, operator_via_hvp, HessianEngine};
use dof_core::dof::{dof_evaluate, dof_evaluate_field, dof_evaluate_mlp_fused, forward_laplacian, DofEngine, DofScratch};
use dof_core::networks::{build_block_mlp, random_graph, BlockMlpSpec, Mlp, MlpSpec, WeightInit};
use dof_core::operator::{decompose, make_coefficients, make_coefficients_with_block, CoefficientKind, OperatorSpec, Structure};
use dof_core::verify::{fd_gradient, fd_hessian, fd_operator, oracle_chain, relative_diff, FdConfig};
use dof_core::{Activation, NodeId, SymMat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn mlp(widths: &[usize], act: Activation, seed: u64) -> Mlp<f64> {
    Mlp::from_spec(&MlpSpec::new(widths.to_vec(), act, seed)).unwrap()
}

#[test]
fn mlp_against_fd_hessian() {
    let m = mlp(&[4, 8, 8, 1], Activation::Tanh, 3);
    let spec = make_coefficients::<f64>(CoefficientKind::Elliptic, Structure::Dense, 4, 11).unwrap();
    let dec = decompose(&spec, None).unwrap();
    let x = point(4, 5);
    let dof = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
    let fd = fd_operator(m.graph(), &spec, &x, &FdConfig::default()).unwrap();
    assert!(relative_diff(dof.operator_value, fd) < 1e-5, "{} vs {fd}", dof.operator_value);
}

#[test]
fn first_order_channel_against_fd() {
    let m = mlp(&[3, 6, 1], Activation::Tanh, 8);
    let mut b = vec![0.0; 3];
    b[0] = 1.0;
    let spec = OperatorSpec::new(SymMat::zeros(3), b, 2.0).unwrap();
    let dec = decompose(&spec, None).unwrap();
    let x = point(3, 1);
    let dof = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
    let grad = fd_gradient(m.graph(), &x, &FdConfig::default()).unwrap();
    let want = grad[0] + 2.0 * m.graph().evaluate(&x).unwrap();
    assert!(relative_diff(dof.operator_value, want) < 1e-8);
}

#[test]
fn random_triples_agree() {
    let kinds = [CoefficientKind::Elliptic, CoefficientKind::LowRank, CoefficientKind::General];
    let mut worst_exact: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for case in 0..36u64 {
        let n = [2, 4, 8][case as usize % 3];
        let kind = kinds[(case / 3) as usize % 3];
        let g = random_graph::<f64>(n, 10 + case as usize % 7, 1000 + case).unwrap();
        let spec = make_coefficients::<f64>(kind, Structure::Dense, n, case).unwrap();
        let dec = decompose(&spec, None).unwrap();
        let r = oracle_chain(&g, &spec, &dec, &point(n, case), &FdConfig::default()).unwrap();
        worst_exact = worst_exact.max(r.exact_err);
        worst_fd = worst_fd.max(r.fd_err);
    }
    assert!(worst_exact < 1e-10, "exact disagreement {worst_exact:e}");
    assert!(worst_fd < 1e-4, "fd disagreement {worst_fd:e}");
}

#[test]
fn gradient_channel_recovers_gradient() {
    let m = mlp(&[5, 7, 7, 1], Activation::Sin, 2);
    let spec = make_coefficients::<f64>(CoefficientKind::General, Structure::Dense, 5, 4).unwrap();
    let dec = decompose(&spec, None).unwrap();
    let x = point(5, 9);
    let dof = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
    let grad = dec.recover_gradient(&dof.g_out).unwrap();
    let fd = fd_gradient(m.graph(), &x, &FdConfig::default()).unwrap();
    for (a, b) in grad.iter().zip(&fd) {
        if b.abs() > 1e-8 {
            assert!((a - b).abs() / b.abs() < 1e-6);
        }
    }
}

#[test]
fn adjoint_gradient_matches_fd() {
    let m = mlp(&[4, 9, 9, 1], Activation::Sigmoid, 6);
    let x = point(4, 2);
    let grad = build_adjoint(m.graph()).gradient(&x).unwrap();
    let fd = fd_gradient(m.graph(), &x, &FdConfig::default()).unwrap();
    for (a, b) in grad.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn hessian_matches_fd_and_is_symmetric() {
    let m = mlp(&[4, 8, 8, 8, 1], Activation::Tanh, 12);
    let x = point(4, 3);
    let h = hessian_full(m.graph(), &x).unwrap();
    let fd = fd_hessian(m.graph(), &x, &FdConfig::default()).unwrap();
    let err = h.hess.sub(&fd).unwrap().frobenius() / h.hess.frobenius();
    assert!(err < 1e-5, "frobenius error {err:e}");
    assert!(h.asymmetry < 1e-10);
}

#[test]
fn hvp_paths() {
    let m = mlp(&[6, 10, 10, 1], Activation::Tanh, 21);
    let x = point(6, 4);
    let low = make_coefficients::<f64>(CoefficientKind::LowRank, Structure::Dense, 6, 3).unwrap();
    let dec = decompose(&low, None).unwrap();
    assert_eq!(dec.rank(), 3);
    let a = operator_via_hvp(m.graph(), &dec, &low, &x).unwrap().operator_value.unwrap();
    let b = operator_via_hessian(m.graph(), &low, &x).unwrap().operator_value.unwrap();
    assert!(relative_diff(a, b) < 1e-10);

    // linearity in the direction
    let (u, v) = (point(6, 30), point(6, 31));
    let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
    let (hu, hv, hs) =
        (hvp(m.graph(), &x, &u).unwrap(), hvp(m.graph(), &x, &v).unwrap(), hvp(m.graph(), &x, &sum).unwrap());
    for k in 0..6 {
        assert!((hs[k] - hu[k] - hv[k]).abs() < 1e-10);
    }

    // full rank: HVP and full Hessian spend about the same
    let ell = make_coefficients::<f64>(CoefficientKind::Elliptic, Structure::Dense, 6, 3).unwrap();
    let dec = decompose(&ell, None).unwrap();
    let engine = HessianEngine::new(m.graph());
    let ha = engine.operator_hvp(&dec, &ell, &x).unwrap();
    let hb = engine.operator(&ell, &x).unwrap();
    assert!(relative_diff(ha.operator_value.unwrap(), hb.operator_value.unwrap()) < 1e-10);
    let ratio = ha.cost.mults as f64 / hb.cost.mults as f64;
    assert!((ratio - 1.0).abs() < 0.1, "hvp/hessian {ratio}");
}

#[test]
fn fused_matches_generic() {
    for (seed, act) in [(1u64, Activation::Tanh), (2, Activation::Sin), (3, Activation::Sigmoid)] {
        let m = mlp(&[6, 12, 12, 12, 1], act, seed);
        for kind in [CoefficientKind::Elliptic, CoefficientKind::General, CoefficientKind::LowRank] {
            let spec = make_coefficients::<f64>(kind, Structure::Dense, 6, seed).unwrap();
            let dec = decompose(&spec, None).unwrap();
            let x = point(6, seed + 40);
            let generic = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
            let fused = dof_evaluate_mlp_fused(&m, &dec, &x).unwrap();
            assert!(relative_diff(fused.operator_value, generic.operator_value) < 1e-12);
            assert_eq!(fused.value, generic.value);
            assert_eq!(fused.cost.second_order_pair_flops, (dec.rank() * 36) as u64);
        }
    }
}

#[test]
fn fused_single_unit_closed_form() {
    // φ(x) = 0.8·tanh(0.8x - 0.1) - 0.1,  φ'' = 0.8·0.64·(-2t(1 - t²))
    let spec = MlpSpec {
        widths: vec![1, 1, 1],
        activation: Activation::Tanh,
        weight_init: WeightInit::Constant { weight: 0.8, bias: -0.1 },
        seed: 0,
    };
    let m = Mlp::<f64>::from_spec(&spec).unwrap();
    let op = OperatorSpec::laplacian(1);
    let dec = decompose(&op, None).unwrap();
    let x = [0.7];
    let t = (0.8f64 * 0.7 - 0.1).tanh();
    let want = 0.8 * 0.64 * (-2.0 * t * (1.0 - t * t));
    let fused = dof_evaluate_mlp_fused(&m, &dec, &x).unwrap();
    let generic = dof_evaluate(m.graph(), &dec, &op, &x).unwrap();
    assert!((fused.operator_value - want).abs() < 1e-14);
    assert!((generic.operator_value - want).abs() < 1e-14);
}

#[test]
fn fused_with_identity_equals_laplacian() {
    let m = mlp(&[5, 9, 9, 1], Activation::Tanh, 77);
    let dec = decompose(&OperatorSpec::laplacian(5), None).unwrap();
    let x = point(5, 7);
    let fused = dof_evaluate_mlp_fused(&m, &dec, &x).unwrap();
    let fl = forward_laplacian(m.graph(), &x).unwrap();
    assert!(relative_diff(fused.operator_value, fl.operator_value) < 1e-12);
}

#[test]
fn identity_operator_states_are_forward_laplacian_states() {
    let m = mlp(&[4, 8, 8, 1], Activation::Tanh, 5);
    let x = point(4, 8);
    let spec = OperatorSpec::laplacian(4);
    let dec = decompose(&spec, None).unwrap();
    let (a, sa) = DofEngine::new(m.graph(), &dec, &spec).unwrap().evaluate_traced(&x).unwrap();
    let fl = dof_core::dof::ForwardLaplacian::new(4);
    let (b, sb) = fl.engine(m.graph()).unwrap().evaluate_traced(&x).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.operator_value, b.operator_value);
}

#[test]
fn field_coefficients_frozen_at_point() {
    let m = mlp(&[2, 5, 1], Activation::Tanh, 4);
    let x = point(2, 2);
    let field = |p: &[f64]| {
        let s = 1.0 + p[0] * p[0];
        OperatorSpec::second_order(SymMat::from_rows(&[vec![s, 0.2], vec![0.2, 1.0]]).unwrap())
    };
    let a = dof_evaluate_field(m.graph(), field, &x).unwrap();
    let spec = field(&x);
    let b = operator_via_hessian(m.graph(), &spec, &x).unwrap();
    assert!(relative_diff(a.operator_value, b.operator_value.unwrap()) < 1e-12);
}

#[test]
fn block_mlp_agrees_with_hessian() {
    let spec = BlockMlpSpec {
        n_blocks: 3,
        block_input_dim: 2,
        widths: vec![6, 6],
        block_output_dim: 2,
        activation: Activation::Tanh,
        weight_init: WeightInit::NormalFanIn,
        seed: 5,
    };
    let g = build_block_mlp::<f64>(&spec).unwrap();
    for kind in [CoefficientKind::Elliptic, CoefficientKind::General] {
        let op = make_coefficients_with_block::<f64>(kind, Structure::Block, 6, 3, 2).unwrap();
        let dec = decompose(&op, None).unwrap();
        let x = point(6, 1);
        let a = dof_evaluate(&g, &dec, &op, &x).unwrap();
        let b = operator_via_hessian(&g, &op, &x).unwrap();
        assert!(relative_diff(a.operator_value, b.operator_value.unwrap()) < 1e-10);
    }
}

#[test]
fn block_inputs_stay_in_their_block() {
    let spec = BlockMlpSpec {
        n_blocks: 2,
        block_input_dim: 3,
        widths: vec![4],
        block_output_dim: 2,
        activation: Activation::Tanh,
        weight_init: WeightInit::NormalFanIn,
        seed: 9,
    };
    let g = build_block_mlp::<f64>(&spec).unwrap();
    let x = point(6, 3);
    let mut zeroed = x.clone();
    zeroed[..3].fill(0.0);
    let (a, b) = (g.evaluate_all(&x).unwrap(), g.evaluate_all(&zeroed).unwrap());
    let per = spec.nodes_per_block();
    let n = g.n_inputs();
    for j in per..2 * per {
        assert_eq!(a[n + j], b[n + j], "block 1 node {j} changed");
    }
    // pre-head tangents are zero on the other block's coordinates
    let (_, states) = dof_core::dof::ForwardLaplacian::new(6).engine(&g).unwrap().evaluate_traced(&x).unwrap();
    for (j, st) in states[n..n + 2 * per].iter().enumerate() {
        let other = if j < per { 3..6 } else { 0..3 };
        assert!(other.clone().all(|k| st.g[k] == 0.0), "node {j} leaks across blocks");
    }
    assert_eq!(g.output(), NodeId::internal(g.n_nodes() - 1));
}

#[test]
fn fd_error_is_second_order() {
    let m = mlp(&[3, 8, 8, 1], Activation::Tanh, 17);
    let x = point(3, 4);
    let exact = hessian_full(m.graph(), &x).unwrap().hess;
    let err = |h: f64| {
        let cfg = FdConfig { richardson: false, ..FdConfig::with_h(h) };
        fd_hessian(m.graph(), &x, &cfg).unwrap().sub(&exact).unwrap().frobenius()
    };
    let ratio = err(2e-3) / err(1e-3);
    assert!((3.0..5.0).contains(&ratio), "halving h shrank the error by {ratio}");
}

#[test]
fn engines_are_reusable_across_points() {
    let m = mlp(&[4, 8, 1], Activation::Tanh, 1);
    let spec = make_coefficients::<f64>(CoefficientKind::General, Structure::Dense, 4, 1).unwrap();
    let dec = decompose(&spec, None).unwrap();
    let engine = DofEngine::new(m.graph(), &dec, &spec).unwrap();
    let mut scratch = DofScratch::new();
    for s in 0..5 {
        let x = point(4, s);
        let a = engine.evaluate(&x, &mut scratch).unwrap();
        let b = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn single_precision_path() {
    let m = Mlp::<f32>::from_spec(&MlpSpec::new(vec![3, 6, 1], Activation::Tanh, 2)).unwrap();
    let spec = OperatorSpec::<f32>::laplacian(3);
    let dec = decompose(&spec, None).unwrap();
    let x = [0.1f32, -0.3, 0.5];
    let a = dof_evaluate(m.graph(), &dec, &spec, &x).unwrap();
    let b = operator_via_hessian(m.graph(), &spec, &x).unwrap();
    assert!((a.operator_value - b.operator_value.unwrap()).abs() < 1e-5);
}
