//! Discrete Itô formula for a measure-dependent function along particles.

use meanfield::calculus::catalog::from_ids;
use meanfield::dynamics::{simulate_mckean_vlasov, Affine, InitialLaw, TimeGrid};
use meanfield::generator::{apply_l_sigma_b, ito_residual_ensemble};

fn main() -> meanfield::Result<()> {
    let coeff = Affine::mean_reverting(1, 1.0, 1.0);
    // f(t, x, mu) = x^2 + mu(|.|^2)
    let f = from_ids(&["quadratic"], "x_squared_plus_mean", 1, None)?;
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    let flow = simulate_mckean_vlasov(&coeff, &init, 1000, TimeGrid::new(0.0, 1.0, 1e-3)?, 2)?;

    let g = apply_l_sigma_b(&coeff, &f, 0.0, &[0.5], flow.snapshot(0))?;
    println!("L f at x = 0.5, t = 0: {:.6} ({:?})", g.total, g.parts);

    let report = ito_residual_ensemble(&coeff, &f, &flow)?;
    let r = report.mean_residual;
    println!("mean residual = {:.3e} (se {:.3e})", r.mean, r.std_error);
    println!(
        "quadratic variation: realized {:.4}, expected {:.4}, relative error {:.4}",
        report.realized_qv,
        report.expected_qv,
        report.qv_relative_error()
    );
    Ok(())
}
