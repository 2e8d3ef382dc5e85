//! Coefficient fields `b(t, x, mu)` and `sigma(t, x, mu)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::calculus::CylindricalFunction;
use crate::error::{Error, Result};
use crate::measure::{wasserstein2, EmpiricalMeasure};
use crate::rng::{NoiseStream, StreamDomain};

/// The finitely many statistics of a measure that a coefficient field reads.
///
/// Computing them once per time step is the synchronization barrier of the
/// particle scheme; evaluating the coefficients at a point is then cheap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeanField(pub Vec<f64>);

/// Drift `b: [0,T] x R^d x P_2 -> R^d` and diffusion `sigma -> R^{d x m}`.
pub trait CoefficientField: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn label(&self) -> String;

    /// Declared Lipschitz constant `K(t)` in `|x - y| + W_2(mu, nu)`.
    fn lipschitz_bound(&self, t: f64) -> f64;

    fn depends_on_measure(&self) -> bool;

    fn mean_field(&self, t: f64, mu: &EmpiricalMeasure) -> Result<MeanField>;

    fn drift_into(&self, t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]);

    /// Writes `sigma` row-major (`d` rows, `m` columns).
    fn diffusion_into(&self, t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]);

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<DVector<f64>> {
        let mf = self.mean_field(t, mu)?;
        let mut out = vec![0.0; self.state_dim()];
        self.drift_into(t, x, &mf, &mut out);
        Ok(DVector::from_vec(out))
    }

    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<DMatrix<f64>> {
        let mf = self.mean_field(t, mu)?;
        Ok(diffusion_matrix(self, t, x, &mf))
    }
}

pub(crate) fn diffusion_matrix<C: CoefficientField + ?Sized>(
    coeff: &C,
    t: f64,
    x: &[f64],
    mf: &MeanField,
) -> DMatrix<f64> {
    let (d, m) = (coeff.state_dim(), coeff.noise_dim());
    let mut buf = vec![0.0; d * m];
    coeff.diffusion_into(t, x, mf, &mut buf);
    DMatrix::from_row_slice(d, m, &buf)
}

fn mean_of(mu: &EmpiricalMeasure) -> MeanField {
    MeanField(mu.mean())
}

/// Constant drift vector and diffusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Constant {
    d: usize,
    m: usize,
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl Constant {
    pub fn new(drift: Vec<f64>, m: usize, sigma_row_major: Vec<f64>) -> Result<Self> {
        let d = drift.len();
        if sigma_row_major.len() != d * m {
            return Err(Error::DimensionMismatch {
                context: "Constant diffusion entries",
                expected: d * m,
                found: sigma_row_major.len(),
            });
        }
        Ok(Self {
            d,
            m,
            drift,
            sigma: sigma_row_major,
        })
    }

    pub fn zero(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            drift: vec![0.0; d],
            sigma: vec![0.0; d * m],
        }
    }

    /// `b = drift * 1`, `sigma = s I_d`.
    pub fn brownian(d: usize, s: f64, drift: f64) -> Self {
        let mut sigma = vec![0.0; d * d];
        for k in 0..d {
            sigma[k * d + k] = s;
        }
        Self {
            d,
            m: d,
            drift: vec![drift; d],
            sigma,
        }
    }
}

impl CoefficientField for Constant {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn label(&self) -> String {
        "constant".into()
    }
    fn lipschitz_bound(&self, _t: f64) -> f64 {
        0.0
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn mean_field(&self, _t: f64, _mu: &EmpiricalMeasure) -> Result<MeanField> {
        Ok(MeanField::default())
    }
    fn drift_into(&self, _t: f64, _x: &[f64], _mf: &MeanField, out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }
    fn diffusion_into(&self, _t: f64, _x: &[f64], _mf: &MeanField, out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
}

/// `b = c + a x + k mu(Id)`, `sigma = s I_{d x m}` (rectangular identity).
///
/// `a = -theta, k = theta` gives the mean-reverting Ornstein-Uhlenbeck type
/// interaction `theta (mu(Id) - x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub d: usize,
    pub m: usize,
    pub constant: f64,
    pub self_rate: f64,
    pub mean_rate: f64,
    pub sigma: f64,
}

impl Affine {
    pub fn mean_reverting(d: usize, theta: f64, sigma: f64) -> Self {
        Self {
            d,
            m: d,
            constant: 0.0,
            self_rate: -theta,
            mean_rate: theta,
            sigma,
        }
    }

    /// `b = -theta x`
    pub fn ornstein_uhlenbeck(d: usize, theta: f64, sigma: f64) -> Self {
        Self {
            d,
            m: d,
            constant: 0.0,
            self_rate: -theta,
            mean_rate: 0.0,
            sigma,
        }
    }
}

fn rectangular_identity(d: usize, m: usize, s: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..d.min(m) {
        out[k * m + k] = s;
    }
}

impl CoefficientField for Affine {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn label(&self) -> String {
        "affine".into()
    }
    fn lipschitz_bound(&self, _t: f64) -> f64 {
        self.self_rate.abs().max(self.mean_rate.abs())
    }
    fn depends_on_measure(&self) -> bool {
        self.mean_rate != 0.0
    }
    fn mean_field(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<MeanField> {
        if mu.dim() != self.d {
            return Err(Error::DimensionMismatch {
                context: "Affine measure argument",
                expected: self.d,
                found: mu.dim(),
            });
        }
        Ok(if self.mean_rate != 0.0 {
            mean_of(mu)
        } else {
            MeanField::default()
        })
    }
    fn drift_into(&self, _t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]) {
        for k in 0..self.d {
            let mean = mf.0.get(k).copied().unwrap_or(0.0);
            out[k] = self.constant + self.self_rate * x[k] + self.mean_rate * mean;
        }
    }
    fn diffusion_into(&self, _t: f64, _x: &[f64], _mf: &MeanField, out: &mut [f64]) {
        rectangular_identity(self.d, self.m, self.sigma, out);
    }
}

/// A nonlinear field with state-, time- and measure-dependent diffusion:
///
/// ```text
/// b_k   = theta (mu(Id)_k - x_k) + amp sin(x_k)
/// sigma = s (1 + amp cos(x_1 + t) / 2) (1 + tanh(mu(Id)_1) / 10) I_{d x m}
/// ```
///
/// With `amp < 2` the diffusion never degenerates.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulated {
    pub d: usize,
    pub m: usize,
    pub theta: f64,
    pub amp: f64,
    pub sigma: f64,
}

impl Modulated {
    fn scale(&self, t: f64, x: &[f64], mf: &MeanField) -> f64 {
        self.sigma * (1.0 + 0.5 * self.amp * (x[0] + t).cos()) * (1.0 + 0.1 * mf.0[0].tanh())
    }
}

impl CoefficientField for Modulated {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn label(&self) -> String {
        "modulated".into()
    }
    fn lipschitz_bound(&self, _t: f64) -> f64 {
        let rank = (self.d.min(self.m) as f64).sqrt();
        let a = self.amp.abs();
        let sigma_x = self.sigma.abs() * 0.5 * a * 1.1 * rank;
        let sigma_mu = self.sigma.abs() * (1.0 + 0.5 * a) * 0.1 * rank;
        (self.theta.abs() + a + sigma_x).max(self.theta.abs() + sigma_mu)
    }
    fn depends_on_measure(&self) -> bool {
        true
    }
    fn mean_field(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<MeanField> {
        if mu.dim() != self.d {
            return Err(Error::DimensionMismatch {
                context: "Modulated measure argument",
                expected: self.d,
                found: mu.dim(),
            });
        }
        Ok(mean_of(mu))
    }
    fn drift_into(&self, _t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]) {
        for k in 0..self.d {
            out[k] = self.theta * (mf.0[k] - x[k]) + self.amp * x[k].sin();
        }
    }
    fn diffusion_into(&self, t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]) {
        rectangular_identity(self.d, self.m, self.scale(t, x, mf), out);
    }
}

/// Keeps the diffusion of `base` and replaces the drift by
/// `b = sigma sigma^T d_x V`.
#[derive(Debug, Clone)]
pub struct GradientDrift {
    base: Arc<dyn CoefficientField>,
    potential: CylindricalFunction,
}

impl GradientDrift {
    pub fn new(base: Arc<dyn CoefficientField>, potential: CylindricalFunction) -> Result<Self> {
        if potential.dim() != base.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "GradientDrift potential",
                expected: base.state_dim(),
                found: potential.dim(),
            });
        }
        Ok(Self { base, potential })
    }

    pub fn base(&self) -> &Arc<dyn CoefficientField> {
        &self.base
    }

    pub fn potential(&self) -> &CylindricalFunction {
        &self.potential
    }

    fn split<'a>(&self, mf: &'a MeanField) -> (MeanField, &'a [f64]) {
        let n = self.potential.arity();
        let cut = mf.0.len() - n;
        (MeanField(mf.0[..cut].to_vec()), &mf.0[cut..])
    }
}

impl CoefficientField for GradientDrift {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }
    fn label(&self) -> String {
        format!("gradient_drift({})", self.potential.label())
    }
    fn lipschitz_bound(&self, _t: f64) -> f64 {
        f64::INFINITY
    }
    fn depends_on_measure(&self) -> bool {
        self.base.depends_on_measure() || self.potential.depends_on_measure()
    }
    fn mean_field(&self, t: f64, mu: &EmpiricalMeasure) -> Result<MeanField> {
        let mut mf = self.base.mean_field(t, mu)?;
        mf.0.extend(self.potential.moments(mu)?);
        Ok(mf)
    }
    fn drift_into(&self, t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]) {
        let (base_mf, r) = self.split(mf);
        let sigma = diffusion_matrix(self.base.as_ref(), t, x, &base_mf);
        let grad = self
            .potential
            .dx_at(t, x, r)
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN));
        let b = &sigma * (sigma.transpose() * grad);
        out.copy_from_slice(b.as_slice());
    }
    fn diffusion_into(&self, t: f64, x: &[f64], mf: &MeanField, out: &mut [f64]) {
        let (base_mf, _) = self.split(mf);
        self.base.diffusion_into(t, x, &base_mf, out);
    }
}

/// Outcome of [`lipschitz_spot_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    /// Largest observed `(|b - b'| + ||sigma - sigma'||_F) / (K (|x - y| + W_2))`.
    pub max_ratio: f64,
    pub trials: usize,
}

impl LipschitzCheck {
    /// Within the declared bound up to 5% slack.
    pub fn passed(&self) -> bool {
        self.max_ratio <= 1.05
    }
}

/// Samples random pairs `(x, mu)`, `(y, nu)` and compares coefficient
/// increments with the declared Lipschitz bound at time `t`.
pub fn lipschitz_spot_check(
    coeff: &dyn CoefficientField,
    t: f64,
    trials: usize,
    seed: u64,
) -> Result<LipschitzCheck> {
    let d = coeff.state_dim();
    let k = coeff.lipschitz_bound(t);
    let mut rng = NoiseStream::new(seed, StreamDomain::Directions, u64::MAX, d);
    let mut normal = vec![0.0; d];
    let mut draw = |scale: f64| -> Vec<f64> {
        rng.standard_normals(&mut normal);
        normal.iter().map(|v| v * scale).collect()
    };
    let mut max_ratio: f64 = 0.0;
    for trial in 0..trials {
        let x = draw(2.0);
        let y = if trial % 3 == 0 { x.clone() } else { draw(2.0) };
        let shift = draw(1.0);
        let mu = EmpiricalMeasure::gaussian_sample(&shift, 1.0, 6, seed ^ (2 * trial as u64))?;
        let nu = if trial % 3 == 1 {
            mu.clone()
        } else {
            let other = draw(1.0);
            EmpiricalMeasure::gaussian_sample(&other, 1.5, 6, seed ^ (2 * trial as u64 + 1))?
        };
        let db = coeff.drift(t, &x, &mu)? - coeff.drift(t, &y, &nu)?;
        let ds = coeff.diffusion(t, &x, &mu)? - coeff.diffusion(t, &y, &nu)?;
        let lhs = db.norm() + ds.norm();
        let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            + wasserstein2(&mu, &nu)?;
        if dist == 0.0 {
            continue;
        }
        max_ratio = max_ratio.max(lhs / (k * dist));
    }
    Ok(LipschitzCheck { max_ratio, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_drift_and_bounds() {
        let c = Affine::mean_reverting(1, 2.0, 0.5);
        let mu = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert_eq!(c.drift(0.0, &[0.0], &mu).unwrap()[0], 4.0);
        assert_eq!(c.diffusion(0.0, &[0.0], &mu).unwrap()[(0, 0)], 0.5);
        assert_eq!(c.lipschitz_bound(0.0), 2.0);
    }

    #[test]
    fn catalog_fields_respect_declared_lipschitz_bounds() {
        let fields: Vec<Box<dyn CoefficientField>> = vec![
            Box::new(Affine::mean_reverting(2, 1.5, 1.0)),
            Box::new(Affine {
                d: 1,
                m: 1,
                constant: 0.3,
                self_rate: -0.5,
                mean_rate: 2.0,
                sigma: 1.0,
            }),
            Box::new(Modulated {
                d: 2,
                m: 2,
                theta: 1.0,
                amp: 0.5,
                sigma: 0.8,
            }),
            Box::new(Modulated {
                d: 1,
                m: 1,
                theta: 0.3,
                amp: 1.0,
                sigma: 1.0,
            }),
        ];
        for c in &fields {
            let check = lipschitz_spot_check(c.as_ref(), 0.4, 300, 11).unwrap();
            assert!(check.passed(), "{}: {check:?}", c.label());
        }
    }

    #[test]
    fn gradient_drift_matches_hand_computation() {
        use crate::calculus::{Inner, Outer};
        // V = x * mu(Id), sigma = 2 -> b = 4 mu(Id)
        let v = CylindricalFunction::from_parts(
            vec![Inner::Coordinate { dim: 1, index: 0 }],
            Outer::state_times_mean(1),
        )
        .unwrap();
        let g = GradientDrift::new(Arc::new(Constant::brownian(1, 2.0, 0.0)), v).unwrap();
        let mu = EmpiricalMeasure::from_scalars(&[1.0, 2.0]).unwrap();
        assert_eq!(g.drift(0.0, &[5.0], &mu).unwrap()[0], 6.0);
        assert_eq!(g.diffusion(0.0, &[5.0], &mu).unwrap()[(0, 0)], 2.0);
    }
}
