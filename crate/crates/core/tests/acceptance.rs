//! Acceptance suite. Runs every criterion, prints one verdict line each and
//! exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meanfield::calculus::catalog::reference_functions;
use meanfield::calculus::{directional_l_derivative, l_derivative_fd_oracle, CylindricalFunction, Inner, Outer};
use meanfield::dynamics::{
    semigroup_apply, simulate_decoupled, simulate_mckean_vlasov, Affine, CoefficientField, Constant, GradientDrift,
    InitialLaw, Modulated, ParticleFlow, TimeGrid, Trajectory,
};
use meanfield::feynman_kac::{pde_residual, McSettings, McSolution, PdeKind, Probe, ResidualSubject};
use meanfield::functionals::{
    build_pair_from_v, girsanov_records, novikov_estimate, reweighted, verify_path_independence, weight_mass,
    ConstantVector, Shifted, VectorField,
};
use meanfield::generator::{drift_identity_defect, ito_residual_ensemble};
use meanfield::measure::wasserstein2;
use meanfield::EmpiricalMeasure;

const LDERIV_TOLERANCE: f64 = 1e-3;
const LDERIV_EPSILONS: [f64; 3] = [1e-2, 1e-3, 1e-4];
const LDERIV_SLOPE_RANGE: (f64, f64) = (0.8, 1.2);
/// Instances whose error at the largest step is below this carry no
/// measurable first-order term, so their slope is not fitted.
const LDERIV_SLOPE_FLOOR: f64 = 1e-6;
const SE_MULTIPLIER: f64 = 3.0;
const QV_TOLERANCE: f64 = 0.10;
const DEFECT_RATIO_RANGE: (f64, f64) = (1.5, 2.8);
const FALSIFIED_RATIO_RANGE: (f64, f64) = (0.9, 1.1);
const FLOW_W2_TOLERANCE: f64 = 0.05;
const NOVIKOV_TOLERANCE: f64 = 1e-10;
const W2_TOLERANCE: f64 = 1e-12;
const IDENTITY_TOLERANCE: f64 = 1e-10;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

fn brownian() -> Arc<dyn CoefficientField> {
    Arc::new(Constant::brownian(1, 1.0, 0.0))
}

fn gaussian_measure(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EmpiricalMeasure {
    let centre: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spread = rng.random_range(0.3..1.5);
    EmpiricalMeasure::gaussian_sample(&centre, spread, n, rng.random()).unwrap()
}

/// Fits the log-log slope of `errors` against `LDERIV_EPSILONS`.
fn fitted_slope(errors: &[f64]) -> f64 {
    let xs: Vec<f64> = LDERIV_EPSILONS.iter().map(|e| e.log10()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.log10()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut min_slope, mut max_slope, mut fitted, mut checked) = (0.0_f64, f64::MAX, f64::MIN, 0, 0);
    for d in 1..=3 {
        for f in reference_functions(d) {
            for _ in 0..20 {
                let mu = EmpiricalMeasure::gaussian_sample(&vec![0.0; d], 1.0, 100, rng.random()).unwrap();
                let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
                let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let phi = |y: &[f64], out: &mut [f64]| {
                    for r in 0..d {
                        out[r] = c[r] + (0..d).map(|k| a[r * d + k] * y[k]).sum::<f64>();
                    }
                };
                let t = rng.random_range(0.0..1.0);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let exact = directional_l_derivative(&f, t, &x, &mu, phi).unwrap();
                let errors: Vec<f64> = LDERIV_EPSILONS
                    .iter()
                    .map(|&eps| (l_derivative_fd_oracle(&f, t, &x, &mu, phi, eps).unwrap() - exact).abs())
                    .collect();
                worst = worst.max(errors[2]);
                checked += 1;
                if errors[0] > LDERIV_SLOPE_FLOOR {
                    let s = fitted_slope(&errors);
                    min_slope = min_slope.min(s);
                    max_slope = max_slope.max(s);
                    fitted += 1;
                }
            }
        }
    }
    let slopes_ok = fitted > 0 && min_slope >= LDERIV_SLOPE_RANGE.0 && max_slope <= LDERIV_SLOPE_RANGE.1;
    outcome(
        worst <= LDERIV_TOLERANCE && slopes_ok,
        format!(
            "instances={checked} max_err(eps=1e-4)={worst:.3e} slope_fits={fitted} slope_range=[{min_slope:.3}, {max_slope:.3}]"
        ),
    )
}

fn criterion_2() -> Outcome {
    let coeff = Affine::mean_reverting(1, 1.0, 1.0);
    let f = CylindricalFunction::from_parts(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1))
        .unwrap();
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    let flow = simulate_mckean_vlasov(&coeff, &init, 1000, TimeGrid::new(0.0, 1.0, 1e-3).unwrap(), 2).unwrap();
    let report = ito_residual_ensemble(&coeff, &f, &flow).unwrap();
    let r = report.mean_residual;
    let qv = report.qv_relative_error();
    outcome(
        r.within(0.0, SE_MULTIPLIER) && qv <= QV_TOLERANCE,
        format!(
            "mean_residual={:.3e} se={:.3e} qv_rel_err={qv:.4}",
            r.mean, r.std_error
        ),
    )
}

fn brownian_flows(n: usize, seed: u64, dts: &[f64]) -> Vec<ParticleFlow> {
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    dts.iter()
        .map(|&dt| {
            simulate_mckean_vlasov(brownian().as_ref(), &init, n, TimeGrid::new(0.0, 1.0, dt).unwrap(), seed).unwrap()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let v = CylindricalFunction::from_parts(vec![], Outer::squared_norm(1, 0)).unwrap();
    let (f, g) = build_pair_from_v(brownian(), v.clone());
    let flows = brownian_flows(4000, 3, &[1e-2, 5e-3, 2.5e-3]);
    let forward = verify_path_independence(&v, &f, &g, &flows, 0.0, 1.0).unwrap();
    let ratio = forward.rows[0].rms_defect / forward.rows[2].rms_defect;
    let perturbed = Shifted {
        base: Arc::new(g),
        shift: vec![0.1],
    };
    let falsified = verify_path_independence(&v, &f, &perturbed, &flows, 0.0, 1.0).unwrap();
    let falsified_ratio = falsified.rows[0].rms_defect / falsified.rows[2].rms_defect;
    let forward_ok = forward.verdict.passed() && in_range(ratio, DEFECT_RATIO_RANGE);
    let falsified_ok = !falsified.verdict.passed() && in_range(falsified_ratio, FALSIFIED_RATIO_RANGE);
    outcome(
        forward_ok && falsified_ok,
        format!(
            "rms(dt=1e-2)={:.4e} ratio={ratio:.3} verdict={} | perturbed ratio={falsified_ratio:.3} verdict={}",
            forward.rows[0].rms_defect, forward.verdict, falsified.verdict
        ),
    )
}

fn criterion_4() -> Outcome {
    let coeff = Affine::mean_reverting(1, 1.0, 1.0);
    let n = 4000;
    let mu = EmpiricalMeasure::gaussian_sample(&[1.0], 0.5, n, 40).unwrap();
    let dt = 0.01;
    let half = semigroup_apply(&coeff, &mu, 0.0, 0.5, n, dt, 41).unwrap();
    let composed = semigroup_apply(&coeff, &half, 0.5, 1.0, n, dt, 42).unwrap();
    let direct = semigroup_apply(&coeff, &mu, 0.0, 1.0, n, dt, 43).unwrap();
    let w2 = wasserstein2(&composed, &direct).unwrap();
    outcome(w2 <= FLOW_W2_TOLERANCE, format!("w2={w2:.4e}"))
}

fn heat_probes() -> Vec<(f64, f64)> {
    [0.0, 0.5]
        .iter()
        .flat_map(|&t| [-1.0, 0.0, 1.0].map(|x| (t, x)))
        .collect()
}

fn fk_settings() -> McSettings {
    McSettings::new(100_000, 200, 0.01, 5).unwrap()
}

fn fk_measure() -> EmpiricalMeasure {
    EmpiricalMeasure::gaussian_sample(&[0.0], 1.0, 200, 50).unwrap()
}

fn criterion_5() -> Outcome {
    let phi = CylindricalFunction::from_parts(vec![], Outer::squared_norm(1, 0)).unwrap();
    let sol = McSolution::linear(brownian(), phi, 1.0, fk_settings()).unwrap();
    let mu = fk_measure();
    let (mut all, mut worst) = (true, 0.0_f64);
    for t in [0.0, 0.5] {
        let xs = vec![vec![-1.0], vec![0.0], vec![1.0]];
        for (x, e) in xs.iter().zip(sol.evaluate_many(t, &xs, &mu).unwrap()) {
            let exact = x[0] * x[0] + (1.0 - t);
            all &= e.within(exact, SE_MULTIPLIER);
            worst = worst.max((e.value - exact).abs() / e.std_error);
        }
    }
    outcome(all, format!("probes=6 max|err|/se={worst:.3}"))
}

fn log_transform_solution() -> McSolution {
    let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
    McSolution::log_transform(brownian(), phi, 0.0, 1.0, 1.0, fk_settings()).unwrap()
}

fn criterion_6() -> Outcome {
    let sol = log_transform_solution();
    let mu = fk_measure();
    let beta = 1.0;
    let (mut all, mut worst) = (true, 0.0_f64);
    for t in [0.0, 0.5] {
        let tau: f64 = 1.0 - t;
        let xs = vec![vec![-1.0], vec![0.0], vec![1.0]];
        for (x, e) in xs.iter().zip(sol.evaluate_many(t, &xs, &mu).unwrap()) {
            let closed = (1.0 + tau / 2.0).powf(-0.5) * (-x[0] * x[0] / (4.0 + 2.0 * tau)).exp();
            let gap = (e.value + beta * closed.ln()).abs();
            all &= gap <= SE_MULTIPLIER * e.std_error;
            worst = worst.max(gap / e.std_error);
        }
    }
    outcome(all, format!("probes=6 max|err|/se={worst:.3}"))
}

fn criterion_7() -> Outcome {
    let sol = log_transform_solution();
    let mu = fk_measure();
    let probes: Vec<Probe> = heat_probes()
        .into_iter()
        .map(|(t, x)| Probe {
            t,
            x: vec![x],
            mu: mu.clone(),
        })
        .collect();
    let table = pde_residual(
        ResidualSubject::MonteCarlo(&sol),
        brownian().as_ref(),
        &PdeKind::Nonlinear { beta: 1.0 },
        &probes,
    )
    .unwrap();
    let worst = table
        .rows
        .iter()
        .map(|r| r.residual.abs() / r.budget)
        .fold(0.0_f64, f64::max);
    outcome(
        table.verdict.passed(),
        format!(
            "pass_fraction={:.3} max|res|/budget={worst:.3} max|res|={:.3e}",
            table.pass_fraction,
            table.max_abs_residual()
        ),
    )
}

fn criterion_8() -> Outcome {
    let coeff = Constant::brownian(1, 1.0, 0.5);
    let dt = 0.02;
    let m = 100_000;
    let flow = simulate_mckean_vlasov(&coeff, &InitialLaw::Dirac(vec![0.0]), 100, TimeGrid::new(0.0, 1.0, dt).unwrap(), 8)
        .unwrap();
    let mut records = simulate_decoupled(&coeff, &[0.0], &flow, 0.0, 1.0, dt, m, 9).unwrap();
    let g: Arc<dyn VectorField> = Arc::new(ConstantVector(vec![0.5]));
    girsanov_records(g.clone(), &mut records, &flow, 1.0, 0.0, 1.0).unwrap();
    let mass = weight_mass(&records);
    let drift = reweighted(&records, |r| r.terminal()[0] - r.state(0)[0]);
    let novikov = novikov_estimate(g, &records, &flow, 0.0, 1.0).unwrap();
    let novikov_gap = (novikov.estimate.mean - 0.125_f64.exp()).abs();
    outcome(
        mass.within(1.0, SE_MULTIPLIER) && drift.within(0.0, SE_MULTIPLIER) && novikov_gap <= NOVIKOV_TOLERANCE,
        format!(
            "E[w]={:.5} (se {:.2e}) E_Q[X_T-X_0]={:.3e} (se {:.2e}) novikov_gap={novikov_gap:.2e}",
            mass.mean, mass.std_error, drift.mean, drift.std_error
        ),
    )
}

/// Minimum over all permutations of the mean squared matching cost.
fn permutation_oracle(a: &[f64], b: &[f64], n: usize, d: usize) -> f64 {
    fn recurse(k: usize, perm: &mut Vec<usize>, a: &[f64], b: &[f64], d: usize, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let c: f64 = (0..n)
                .map(|i| (0..d).map(|r| (a[i * d + r] - b[perm[i] * d + r]).powi(2)).sum::<f64>())
                .sum();
            *best = best.min(c);
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            recurse(k + 1, perm, a, b, d, best);
            perm.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    recurse(0, &mut (0..n).collect(), a, b, d, &mut best);
    (best / n as f64).sqrt()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=3);
        let a: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu = EmpiricalMeasure::uniform(d, a.clone()).unwrap();
        let nu = EmpiricalMeasure::uniform(d, b.clone()).unwrap();
        let solver = wasserstein2(&mu, &nu).unwrap();
        worst = worst.max((solver - permutation_oracle(&a, &b, n, d)).abs());
    }
    outcome(worst <= W2_TOLERANCE, format!("instances=200 max_gap={worst:.2e}"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst = 0.0_f64;
    for probe in 0..50 {
        let d = 1 + probe % 2;
        let fields: Vec<Arc<dyn CoefficientField>> = vec![
            Arc::new(Constant::brownian(d, 1.3, 0.2)),
            Arc::new(Affine::mean_reverting(d, 0.7, 0.9)),
            Arc::new(Modulated {
                d,
                m: d,
                theta: 0.5,
                amp: 0.8,
                sigma: 1.1,
            }),
        ];
        let functions = reference_functions(d);
        let coeff = fields[rng.random_range(0..fields.len())].clone();
        let v = functions[rng.random_range(0..functions.len())].clone();
        let gradient = GradientDrift::new(coeff.clone(), v.clone()).unwrap();
        let mu = gaussian_measure(&mut rng, d, 30);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let t = rng.random_range(0.0..1.0);
        let defect = drift_identity_defect(coeff.as_ref(), &gradient, &v, t, &x, &mu).unwrap();
        worst = worst.max(defect);
    }
    outcome(worst <= IDENTITY_TOLERANCE, format!("probes=50 max_defect={worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("l-derivative", criterion_1),
        ("ito-formula", criterion_2),
        ("path-independence", criterion_3),
        ("flow-property", criterion_4),
        ("feynman-kac-linear", criterion_5),
        ("log-transform", criterion_6),
        ("nonlinear-pde-residual", criterion_7),
        ("girsanov", criterion_8),
        ("w2-exactness", criterion_9),
        ("drift-identity", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {name:<24} {verdict} [{:.1}s] {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
