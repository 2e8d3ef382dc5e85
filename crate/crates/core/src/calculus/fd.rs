//! Central finite differences used to cross-check closed-form partials.

use nalgebra::{DMatrix, DVector};

use super::{derivative_bundle, CylindricalFunction};
use crate::error::Result;
use crate::measure::EmpiricalMeasure;

/// Central-difference step for an argument of the given size.
pub fn step(arg: f64) -> f64 {
    1e-5 * (1.0 + arg.abs())
}

pub fn central_derivative(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    let h = step(at);
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// Central-difference Jacobian of `f: R^k -> R^p`, `p x k`.
pub fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(x.len());
    let mut p = 0;
    let mut z = x.to_vec();
    for k in 0..x.len() {
        let h = step(x[k]);
        z[k] = x[k] + h;
        let up = f(&z);
        z[k] = x[k] - h;
        let down = f(&z);
        z[k] = x[k];
        p = up.len();
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    DMatrix::from_fn(p, x.len(), |i, k| cols[k][i])
}

pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let j = central_jacobian(|z| vec![f(z)], x);
    DVector::from_iterator(x.len(), j.row(0).iter().copied())
}

/// Largest scaled discrepancy `|closed - fd| / (1 + |fd|)` per partial.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BundleCheck {
    pub dt: f64,
    pub dx: f64,
    pub dxx: f64,
    pub dmu: f64,
    pub dy_dmu: f64,
    pub symmetry: f64,
}

impl BundleCheck {
    pub fn worst(&self) -> f64 {
        [self.dt, self.dx, self.dxx, self.dmu, self.dy_dmu, self.symmetry]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn discrepancy(closed: &[f64], fd: &[f64]) -> f64 {
    closed
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

/// Compares every closed-form partial of `f` at `(t, x, mu)` with central
/// differences.
///
/// * `dt`, `dx` against differences of the value;
/// * `dxx` against differences of the closed-form `dx`;
/// * `dmu` at each atom `y_j` against `(d / d y_j) f / w_j`, i.e. moving a
///   single atom of the empirical measure;
/// * `dy_dmu` against differences of the closed-form `dmu` in `y`, at the
///   atoms and at the extra `probes`.
///
/// At most `max_atoms` atoms are moved individually.
pub fn check_bundle(
    f: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    probes: &[Vec<f64>],
    max_atoms: usize,
) -> Result<BundleCheck> {
    let b = derivative_bundle(f, t, x, mu)?;
    let r = f.moments(mu)?;
    let d = f.dim();
    let mut check = BundleCheck::default();

    let dt_fd = central_derivative(|s| f.value_at(s, x, &r), t);
    check.dt = discrepancy(&[b.dt], &[dt_fd]);

    let dx_fd = central_gradient(|z| f.value_at(t, z, &r), x);
    check.dx = discrepancy(b.dx.as_slice(), dx_fd.as_slice());

    let dxx_fd = central_jacobian(
        |z| f.dx_at(t, z, &r).map(|v| v.as_slice().to_vec()).unwrap_or_default(),
        x,
    );
    check.dxx = discrepancy(b.dxx.as_slice(), dxx_fd.as_slice());
    check.symmetry = (&b.dxx - b.dxx.transpose()).amax();

    let points = mu.points().to_vec();
    for j in 0..mu.len().min(max_atoms) {
        let w = mu.weight(j);
        if w <= 0.0 {
            continue;
        }
        let yj = mu.point(j).to_vec();
        let moved = |z: &[f64]| {
            let mut p = points.clone();
            p[j * d..(j + 1) * d].copy_from_slice(z);
            let nu = mu.with_points(p).expect("same layout");
            f.value(t, x, &nu).expect("validated shape")
        };
        let fd = central_gradient(moved, &yj) / w;
        check.dmu = check.dmu.max(discrepancy((b.dmu)(&yj).as_slice(), fd.as_slice()));
    }

    let mut ys: Vec<Vec<f64>> = (0..mu.len().min(max_atoms)).map(|j| mu.point(j).to_vec()).collect();
    ys.extend(probes.iter().cloned());
    for y in &ys {
        let fd = central_jacobian(|z| (b.dmu)(z).as_slice().to_vec(), y);
        check.dy_dmu = check
            .dy_dmu
            .max(discrepancy((b.dy_dmu)(y).as_slice(), fd.as_slice()));
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::catalog::reference_functions;

    #[test]
    fn catalog_partials_match_differences() {
        for d in [1, 2, 3] {
            let pts: Vec<f64> = (0..5 * d).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect();
            let mu = EmpiricalMeasure::uniform(d, pts).unwrap();
            let x: Vec<f64> = (0..d).map(|k| 0.3 - 0.4 * k as f64).collect();
            let probes = vec![vec![0.7; d], vec![-1.9; d]];
            for f in reference_functions(d) {
                let c = check_bundle(&f, 0.4, &x, &mu, &probes, 8).unwrap();
                assert!(c.worst() <= 1e-6, "{} (d={d}): {c:?}", f.label());
                assert!(c.symmetry <= 1e-12);
            }
        }
    }
}
