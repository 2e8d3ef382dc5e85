//! Interacting particles, the nonlinear semigroup and its flow property.

use meanfield::dynamics::{semigroup_apply, simulate_mckean_vlasov, Affine, InitialLaw, TimeGrid};
use meanfield::measure::wasserstein2;
use meanfield::EmpiricalMeasure;

fn main() -> meanfield::Result<()> {
    // b(x, mu) = mu(Id) - x, sigma = 1
    let coeff = Affine::mean_reverting(1, 1.0, 1.0);
    let init = InitialLaw::Gaussian {
        mean: vec![2.0],
        std: 0.5,
    };
    let flow = simulate_mckean_vlasov(&coeff, &init, 2000, TimeGrid::new(0.0, 1.0, 0.01)?, 7)?;
    for k in [0, 25, 50, 100] {
        let mu = flow.snapshot(k);
        println!("t = {:.2}: mean = {:.4}, second moment = {:.4}", flow.time(k), mu.mean()[0], mu.second_moment());
    }

    let n = 4000;
    let mu = EmpiricalMeasure::gaussian_sample(&[1.0], 0.5, n, 40)?;
    let half = semigroup_apply(&coeff, &mu, 0.0, 0.5, n, 0.01, 41)?;
    let composed = semigroup_apply(&coeff, &half, 0.5, 1.0, n, 0.01, 42)?;
    let direct = semigroup_apply(&coeff, &mu, 0.0, 1.0, n, 0.01, 43)?;
    println!("W2(P_(0.5,1) P_(0,0.5) mu, P_(0,1) mu) = {:.4}", wasserstein2(&composed, &direct)?);
    Ok(())
}
