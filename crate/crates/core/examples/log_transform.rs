//! Log-transform solution of the nonlinear equation and its residual.

use std::sync::Arc;

use meanfield::calculus::catalog::from_ids;
use meanfield::dynamics::{CoefficientField, Constant};
use meanfield::feynman_kac::{pde_residual, McSettings, McSolution, PdeKind, Probe, ResidualSubject};
use meanfield::EmpiricalMeasure;

fn main() -> meanfield::Result<()> {
    let coeff: Arc<dyn CoefficientField> = Arc::new(Constant::brownian(1, 1.0, 0.0));
    // Phi(x) = exp(-x^2 / 4)
    let phi = from_ids(&[], "gaussian", 1, Some(0.25))?;
    let beta = 1.0;
    let sol = McSolution::log_transform(coeff.clone(), phi, 0.0, beta, 1.0, McSettings::new(40_000, 200, 0.01, 5)?)?;
    let mu = EmpiricalMeasure::gaussian_sample(&[0.0], 1.0, 200, 50)?;

    for (t, x) in [(0.0_f64, 0.0_f64), (0.0, 1.0), (0.5, -1.0)] {
        let tau = 1.0 - t;
        let closed = -beta * ((1.0 + tau / 2.0).powf(-0.5) * (-x * x / (4.0 + 2.0 * tau)).exp()).ln();
        let e = sol.evaluate(t, &[x], &mu)?;
        println!("V({t}, {x}) = {:.5} +- {:.5}, closed form {closed:.5}", e.value, e.std_error);
    }

    let probes = vec![Probe {
        t: 0.0,
        x: vec![0.5],
        mu,
    }];
    let table = pde_residual(ResidualSubject::MonteCarlo(&sol), coeff.as_ref(), &PdeKind::Nonlinear { beta }, &probes)?;
    let row = &table.rows[0];
    println!(
        "nonlinear residual at (0, 0.5): {:.3e}, budget {:.3e} (truncation {:.1e}, se {:.1e}) {}",
        row.residual, row.budget, row.truncation, row.std_error, row.verdict
    );
    Ok(())
}
