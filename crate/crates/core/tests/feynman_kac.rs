//! Statistical properties of the Monte Carlo representations.

use std::sync::Arc;

use meanfield::calculus::{CylindricalFunction, Inner, Outer};
use meanfield::dynamics::{simulate_decoupled, simulate_mckean_vlasov, Affine, CoefficientField, Constant, InitialLaw, TimeGrid};
use meanfield::feynman_kac::{McSettings, McSolution};
use meanfield::functionals::{accumulate_records, ConstantVector, ParabolicField};
use meanfield::stats::SampleSummary;
use meanfield::EmpiricalMeasure;

/// `V(T, X_T, mu_T) - V(t, x, mu_t) - int_t^T (d_t + L) V dr` along decoupled
/// paths has mean zero.
#[test]
fn compensated_value_is_a_martingale() {
    let coeff: Arc<dyn CoefficientField> = Arc::new(Affine::mean_reverting(1, 1.0, 1.0));
    let v = CylindricalFunction::from_parts(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1))
        .unwrap();
    let (t, end, dt) = (0.0, 1.0, 0.02);
    let x0 = [0.4];
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    let flow = simulate_mckean_vlasov(coeff.as_ref(), &init, 50_000, TimeGrid::new(t, end, dt).unwrap(), 21).unwrap();
    let mut records = simulate_decoupled(coeff.as_ref(), &x0, &flow, t, end, dt, 20_000, 22).unwrap();
    let f = ParabolicField {
        coeff: coeff.clone(),
        v: v.clone(),
    };
    accumulate_records(&f, &ConstantVector(vec![0.0]), &mut records, &flow, t, end).unwrap();
    let start = v.value(t, &x0, flow.snapshot(0)).unwrap();
    let increments: Vec<f64> = records
        .iter()
        .map(|r| v.value(end, r.terminal(), flow.terminal()).unwrap() - start - r.accumulator)
        .collect();
    let s = SampleSummary::from_samples(&increments);
    assert!(s.within(0.0, 3.0), "mean {} se {}", s.mean, s.std_error);
}

fn heat_solution(paths: usize) -> McSolution {
    let phi = CylindricalFunction::from_parts(vec![], Outer::squared_norm(1, 0)).unwrap();
    McSolution::linear(
        Arc::new(Constant::brownian(1, 1.0, 0.0)),
        phi,
        1.0,
        McSettings::new(paths, 50, 0.05, 31).unwrap(),
    )
    .unwrap()
}

#[test]
fn quadrupling_paths_halves_the_error() {
    let mu = EmpiricalMeasure::from_scalars(&[-0.5, 0.5]).unwrap();
    let small = heat_solution(5_000).evaluate(0.0, &[0.5], &mu).unwrap();
    let large = heat_solution(20_000).evaluate(0.0, &[0.5], &mu).unwrap();
    assert_eq!((small.samples, large.samples), (5_000, 20_000));
    let ratio = small.std_error / large.std_error;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn log_transform_inverts_to_the_plain_mean() {
    let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
    let coeff: Arc<dyn CoefficientField> = Arc::new(Constant::brownian(1, 1.0, 0.0));
    let settings = McSettings::new(4_000, 50, 0.05, 41).unwrap();
    let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
    let beta = 0.7;
    let log = McSolution::log_transform(coeff.clone(), phi.clone(), 0.0, beta, 1.0, settings).unwrap();
    let plain = McSolution::linear(coeff, phi, 1.0, settings).unwrap();
    for x in [-1.0, 0.3, 2.0] {
        let v = log.evaluate(0.25, &[x], &mu).unwrap().value;
        let m = plain.evaluate(0.25, &[x], &mu).unwrap().value;
        assert!(((-v / beta).exp() - m).abs() <= 1e-12, "x = {x}");
    }
}
