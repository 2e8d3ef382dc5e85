//! Invariants checked on random inputs.

use std::sync::Arc;

use proptest::prelude::*;

use meanfield::calculus::{CylindricalFunction, Inner, Outer};
use meanfield::dynamics::{simulate_mckean_vlasov, Affine, CoefficientField, Constant, InitialLaw, Modulated, TimeGrid};
use meanfield::functionals::{accumulate_flow, build_pair_from_v, ConstantScalar, ConstantVector, Shifted};
use meanfield::generator::apply_l_sigma_b;
use meanfield::measure::{brute_force_assignment_cost, wasserstein2};
use meanfield::EmpiricalMeasure;

fn cloud(max_atoms: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=3usize, 1..=max_atoms).prop_flat_map(|(d, n)| (Just(d), prop::collection::vec(-3.0..3.0f64, n * d)))
}

/// Two clouds of equal size and dimension.
fn pair(max_atoms: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1..=3usize, 1..=max_atoms).prop_flat_map(|(d, n)| {
        (
            Just(d),
            prop::collection::vec(-3.0..3.0f64, n * d),
            prop::collection::vec(-3.0..3.0f64, n * d),
        )
    })
}

fn triple(max_atoms: usize) -> impl Strategy<Value = (usize, [Vec<f64>; 3])> {
    (1..=3usize, 1..=max_atoms).prop_flat_map(|(d, n)| {
        let v = || prop::collection::vec(-3.0..3.0f64, n * d);
        (Just(d), [v(), v(), v()])
    })
}

fn uniform(d: usize, points: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(d, points).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn w2_is_symmetric((d, a, b) in pair(12)) {
        let (mu, nu) = (uniform(d, a), uniform(d, b));
        let (x, y) = (wasserstein2(&mu, &nu).unwrap(), wasserstein2(&nu, &mu).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x));
    }

    #[test]
    fn w2_vanishes_on_itself((d, a) in cloud(12)) {
        let mu = uniform(d, a);
        prop_assert!(wasserstein2(&mu, &mu).unwrap() <= 1e-12);
    }

    #[test]
    fn w2_triangle_inequality((d, [a, b, c]) in triple(10)) {
        let (x, y, z) = (uniform(d, a), uniform(d, b), uniform(d, c));
        let xz = wasserstein2(&x, &z).unwrap();
        let bound = wasserstein2(&x, &y).unwrap() + wasserstein2(&y, &z).unwrap();
        prop_assert!(xz <= bound + 1e-10);
    }

    #[test]
    fn w2_matches_brute_force((d, a, b) in pair(6)) {
        let n = a.len() / d;
        let (mu, nu) = (uniform(d, a), uniform(d, b));
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| sq_dist(mu.point(i), nu.point(j)))
            .collect();
        let brute = (brute_force_assignment_cost(&cost, n) / n as f64).sqrt();
        prop_assert!((wasserstein2(&mu, &nu).unwrap() - brute).abs() <= 1e-12);
    }

    #[test]
    fn w2_of_translation_is_shift_length((d, a) in cloud(10), shift in prop::collection::vec(-2.0..2.0f64, 3)) {
        let mu = uniform(d, a);
        let nu = mu.pushforward(|_, out| out.copy_from_slice(&shift[..d])).unwrap();
        let expect = shift[..d].iter().map(|s| s * s).sum::<f64>().sqrt();
        prop_assert!((wasserstein2(&mu, &nu).unwrap() - expect).abs() <= 1e-9);
    }

    #[test]
    fn pushforward_integrates_composition((d, a) in cloud(10), scale in -2.0..2.0f64) {
        let mu = uniform(d, a);
        let nu = mu.pushforward(|y, out| {
            for (o, v) in out.iter_mut().zip(y) {
                *o = scale * v.sin();
            }
        }).unwrap();
        let h = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>();
        let direct = nu.integrate(h).unwrap();
        let composed = mu
            .integrate(|y| h(&y.iter().map(|v| v + scale * v.sin()).collect::<Vec<_>>()))
            .unwrap();
        prop_assert!((direct - composed).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn measures_are_permutation_invariant((d, a) in cloud(8), key in any::<u64>()) {
        let mu = uniform(d, a);
        let n = mu.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut k = key;
        for i in (1..n).rev() {
            perm.swap(i, (k % (i as u64 + 1)) as usize);
            k = k.rotate_left(7) ^ 0x9e37_79b9_7f4a_7c15;
        }
        let nu = mu.permuted(&perm);
        prop_assert!(wasserstein2(&mu, &nu).unwrap() <= 1e-12);
        let h = |y: &[f64]| y.iter().map(|v| v.cos()).sum::<f64>();
        prop_assert!((mu.integrate(h).unwrap() - nu.integrate(h).unwrap()).abs() <= 1e-12);
        let f = CylindricalFunction::from_parts(vec![Inner::Bump { dim: d }], Outer::exp_of_mean(d)).unwrap();
        let x = vec![0.1; d];
        let (fm, fn_) = (f.value(0.3, &x, &mu).unwrap(), f.value(0.3, &x, &nu).unwrap());
        prop_assert!((fm - fn_).abs() <= 1e-12);
    }

    #[test]
    fn generator_is_linear(
        (d, a) in cloud(8),
        x in prop::collection::vec(-2.0..2.0f64, 3),
        t in 0.0..1.0f64,
        which in 0..3usize,
    ) {
        let mu = uniform(d, a);
        let x = &x[..d];
        let coeff: Box<dyn CoefficientField> = match which {
            0 => Box::new(Constant::brownian(d, 0.8, 0.3)),
            1 => Box::new(Affine::mean_reverting(d, 0.7, 1.1)),
            _ => Box::new(Modulated { d, m: d, theta: 0.4, amp: 0.6, sigma: 0.9 }),
        };
        let h1 = Inner::Bump { dim: d };
        let h2 = Inner::SquaredNorm { dim: d };
        let sum = CylindricalFunction::from_parts(vec![h1.clone(), h2.clone()], Outer::mean_sum(d, 2)).unwrap();
        let one = |h: Inner| CylindricalFunction::from_parts(vec![h], Outer::mean_sum(d, 1)).unwrap();
        let l = |f: &CylindricalFunction| apply_l_sigma_b(coeff.as_ref(), f, t, x, &mu).unwrap().total;
        let (lhs, rhs) = (l(&sum), l(&one(h1)) + l(&one(h2)));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn additive_functionals_are_additive(seed in any::<u64>(), split in 1..9usize, shift in -1.0..1.0f64) {
        let coeff: Arc<dyn CoefficientField> = Arc::new(Affine::mean_reverting(1, 1.0, 0.8));
        let init = InitialLaw::Gaussian { mean: vec![0.2], std: 0.7 };
        let flow = simulate_mckean_vlasov(coeff.as_ref(), &init, 64, TimeGrid::new(0.0, 1.0, 0.1).unwrap(), seed).unwrap();
        let v = CylindricalFunction::from_parts(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1)).unwrap();
        let (f, g) = build_pair_from_v(coeff, v);
        let g = Shifted { base: Arc::new(g), shift: vec![shift] };
        let mid = split as f64 / 10.0;
        let whole = accumulate_flow(&f, &g, &flow, 0.0, 1.0).unwrap();
        let left = accumulate_flow(&f, &g, &flow, 0.0, mid).unwrap();
        let right = accumulate_flow(&f, &g, &flow, mid, 1.0).unwrap();
        for ((w, l), r) in whole.iter().zip(&left).zip(&right) {
            prop_assert!((w - (l + r)).abs() <= 1e-12 * (1.0 + w.abs()));
        }
        let empty = accumulate_flow(&ConstantScalar(3.0), &ConstantVector(vec![0.0]), &flow, mid, mid).unwrap();
        prop_assert!(empty.iter().all(|a| *a == 0.0));
    }
}
