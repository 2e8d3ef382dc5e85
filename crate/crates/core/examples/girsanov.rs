//! Removing a constant drift by a change of measure.

use std::sync::Arc;

use meanfield::dynamics::{simulate_decoupled, simulate_mckean_vlasov, Constant, InitialLaw, TimeGrid, Trajectory};
use meanfield::functionals::{girsanov_records, novikov_estimate, reweighted, weight_mass, ConstantVector, VectorField};
use meanfield::stats::SampleSummary;

fn main() -> meanfield::Result<()> {
    let coeff = Constant::brownian(1, 1.0, 0.5);
    let dt = 0.02;
    let flow = simulate_mckean_vlasov(&coeff, &InitialLaw::Dirac(vec![0.0]), 100, TimeGrid::new(0.0, 1.0, dt)?, 8)?;
    let mut records = simulate_decoupled(&coeff, &[0.0], &flow, 0.0, 1.0, dt, 50_000, 9)?;
    let g: Arc<dyn VectorField> = Arc::new(ConstantVector(vec![0.5]));
    girsanov_records(g.clone(), &mut records, &flow, 1.0, 0.0, 1.0)?;

    let mass = weight_mass(&records);
    let p_drift = SampleSummary::from_samples(
        &records.iter().map(|r| r.terminal()[0] - r.state(0)[0]).collect::<Vec<_>>(),
    );
    let drift = reweighted(&records, |r| r.terminal()[0] - r.state(0)[0]);
    println!("E[w] = {:.5} (se {:.1e})", mass.mean, mass.std_error);
    println!("E_P[X_T - X_0] = {:.5} (se {:.1e})", p_drift.mean, p_drift.std_error);
    println!("E_Q[X_T - X_0] = {:.5} (se {:.1e})", drift.mean, drift.std_error);
    let novikov = novikov_estimate(g, &records, &flow, 0.0, 1.0)?;
    println!(
        "E exp(|g|^2 T / 2) = {:.12} (exp(0.125) = {:.12}), tail {:?}",
        novikov.estimate.mean,
        0.125_f64.exp(),
        novikov.tail_flag
    );
    Ok(())
}
