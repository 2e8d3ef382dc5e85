//! L-derivatives of cylindrical functions against the pushforward quotient.

use meanfield::calculus::catalog::from_ids;
use meanfield::calculus::{directional_l_derivative, l_derivative, l_derivative_fd_oracle};
use meanfield::EmpiricalMeasure;

fn main() -> meanfield::Result<()> {
    // f(t, x, mu) = exp(mu(bump))
    let f = from_ids(&["bump"], "exp_of_mean", 2, None)?;
    let mu = EmpiricalMeasure::gaussian_sample(&[0.2, -0.1], 0.8, 100, 3)?;
    let (t, x) = (0.5, [0.1, 0.4]);

    let at = [0.3, 0.3];
    let grad = l_derivative(&f, t, &x, &mu, &at)?;
    println!("{} at y = {at:?}: d_mu f = [{:.6}, {:.6}]", f.label(), grad[0], grad[1]);

    let phi = |y: &[f64], out: &mut [f64]| {
        out[0] = 1.0 + 0.5 * y[1];
        out[1] = -0.3 * y[0];
    };
    let exact = directional_l_derivative(&f, t, &x, &mu, phi)?;
    println!("mu(<d_mu f, phi>) = {exact:.8}");
    for eps in [1e-2, 1e-3, 1e-4] {
        let fd = l_derivative_fd_oracle(&f, t, &x, &mu, phi, eps)?;
        println!("  eps = {eps:.0e}: quotient = {fd:.8}, error = {:.2e}", (fd - exact).abs());
    }
    Ok(())
}
