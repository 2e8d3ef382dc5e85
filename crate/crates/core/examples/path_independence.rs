//! Path independence of the additive functional built from V, and its
//! failure when the integrand is perturbed.

use std::sync::Arc;

use meanfield::calculus::catalog::from_ids;
use meanfield::dynamics::{simulate_mckean_vlasov, CoefficientField, Constant, InitialLaw, TimeGrid};
use meanfield::functionals::{build_pair_from_v, verify_path_independence, Shifted};

fn main() -> meanfield::Result<()> {
    let coeff: Arc<dyn CoefficientField> = Arc::new(Constant::brownian(1, 1.0, 0.0));
    let v = from_ids(&[], "x_squared", 1, None)?;
    let (f, g) = build_pair_from_v(coeff.clone(), v.clone());
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    let flows = [1e-2, 5e-3, 2.5e-3]
        .iter()
        .map(|&dt| simulate_mckean_vlasov(coeff.as_ref(), &init, 4000, TimeGrid::new(0.0, 1.0, dt)?, 3))
        .collect::<meanfield::Result<Vec<_>>>()?;

    let report = verify_path_independence(&v, &f, &g, &flows, 0.0, 1.0)?;
    for r in &report.rows {
        println!("dt = {:<7} rms defect = {:.4e} {}", r.dt, r.rms_defect, r.verdict);
    }
    println!("verdict: {}", report.verdict);

    let perturbed = Shifted {
        base: Arc::new(g),
        shift: vec![0.1],
    };
    let report = verify_path_independence(&v, &f, &perturbed, &flows, 0.0, 1.0)?;
    println!("with g + 0.1: verdict {}, rms ratios {:?}", report.verdict, report.rms_ratios());
    Ok(())
}
