use dof_core::operator::{make_coefficients, CoefficientKind, Structure};
use dof_core::{decompose, Activation, DofEngine, DofScratch, Mlp, MlpSpec};

fn main() -> dof_core::Result<()> {
    let mlp = Mlp::<f64>::from_spec(&MlpSpec::uniform(16, 64, 4, Activation::Tanh, 7))?;
    let spec = make_coefficients::<f64>(CoefficientKind::Elliptic, Structure::Dense, 16, 1)?;
    let dec = decompose(&spec, None)?;
    let engine = DofEngine::new(mlp.graph(), &dec, &spec)?;
    let mut scratch = DofScratch::new();
    let out = engine.evaluate(&[0.1; 16], &mut scratch)?;
    println!("Lφ = {}, {} mults, peak {} live reals", out.operator_value, out.cost.mults, out.cost.peak_live_reals);
    Ok(())
}
