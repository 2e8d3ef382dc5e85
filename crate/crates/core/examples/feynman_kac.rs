//! Linear, source and combined Monte Carlo representations.

use std::sync::Arc;

use meanfield::calculus::catalog::from_ids;
use meanfield::dynamics::{CoefficientField, Constant};
use meanfield::feynman_kac::{pde_residual, McSettings, McSolution, PdeKind, Probe, ResidualSubject};
use meanfield::functionals::FnScalar;
use meanfield::EmpiricalMeasure;

fn main() -> meanfield::Result<()> {
    let coeff: Arc<dyn CoefficientField> = Arc::new(Constant::brownian(1, 1.0, 0.0));
    let phi = from_ids(&[], "x_squared", 1, None)?;
    let settings = McSettings::new(50_000, 200, 0.01, 5)?;
    let mu = EmpiricalMeasure::gaussian_sample(&[0.0], 1.0, 200, 50)?;

    let heat = McSolution::linear(coeff.clone(), phi.clone(), 1.0, settings)?;
    for (t, x) in [(0.0, -1.0), (0.0, 0.0), (0.5, 1.0)] {
        let e = heat.evaluate(t, &[x], &mu)?;
        println!("V({t}, {x}) = {:.4} +- {:.4}, closed form {:.4}", e.value, e.std_error, x * x + 1.0 - t);
    }

    let source = Arc::new(FnScalar(|_t, x: &[f64]| x[0]));
    let combined = McSolution::combined(coeff.clone(), phi, source, 1.0, settings)?;
    let parts = combined.evaluate_parts(0.0, &[1.0], &mu)?;
    println!(
        "combined {:.4} = linear {:.4} + source {:.4}",
        parts.combined.value, parts.linear.value, parts.source.value
    );

    let v = from_ids(&[], "heat_quadratic", 1, Some(1.0))?;
    let probes: Vec<Probe> = [-1.0, 0.0, 1.0]
        .iter()
        .map(|&x| Probe {
            t: 0.25,
            x: vec![x],
            mu: mu.clone(),
        })
        .collect();
    let table = pde_residual(ResidualSubject::Exact(&v), coeff.as_ref(), &PdeKind::Linear, &probes)?;
    println!("exact heat solution: max |residual| = {:.1e}, {}", table.max_abs_residual(), table.verdict);
    Ok(())
}
