//! The mean-field generators on cylindrical functions and the Itô residual.
//!
//! For `a = sigma sigma^T` the drift-diffusion generator is
//!
//! ```text
//! L_{sigma,b} V(t,x,mu) = 1/2 tr(a(x) d_x^2 V) + <b(x), d_x V>
//!     + int [ 1/2 tr(a(y) d_y d_mu V(y)) + <b(y), d_mu V(y)> ] mu(dy)
//! ```
//!
//! and the drift-free operator replaces both drift terms:
//!
//! ```text
//! L_sigma V(t,x,mu) = 1/2 tr(a(x) d_x^2 V) + 1/2 |sigma^T(x) d_x V|^2
//!     + int [ 1/2 tr(a(y) d_y d_mu V(y)) + <a(y) d_x V(t,y,mu), d_mu V(y)> ] mu(dy)
//! ```
//!
//! Since `d_mu V(t,x,mu)(y) = sum_i d_{r_i}F(t,x,r) grad h_i(y)`, each
//! mu-integral factors as `sum_i d_{r_i}F(t,x,r) G_i` with `G_i` independent
//! of `x`. [`BoundGenerator`] computes the `G_i` once per `(t, mu)` as exact
//! weighted sums over the atoms, after which evaluation at a point is cheap.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::calculus::CylindricalFunction;
use crate::dynamics::coefficients::diffusion_matrix;
use crate::dynamics::{CoefficientField, MeanField, ParticleFlow, ParticlePath, Trajectory};
use crate::error::{contract, Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::stats::{pairwise_sum, SampleSummary};

/// Term-by-term value of a generator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorParts {
    /// `1/2 tr(a d_x^2 V)`
    pub trace_x: f64,
    /// `<b, d_x V>`; zero for `L_sigma`.
    pub drift_x: f64,
    /// `int 1/2 tr(a(y) d_y d_mu V(y)) mu(dy)`
    pub trace_mu: f64,
    /// `int <b(y), d_mu V(y)> mu(dy)`, or `int <a(y) d_x V(y), d_mu V(y)> mu(dy)` for `L_sigma`.
    pub drift_mu: f64,
    /// `1/2 |sigma^T d_x V|^2`; only for `L_sigma`.
    pub nonlinear_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorValue {
    pub total: f64,
    pub parts: GeneratorParts,
}

impl GeneratorValue {
    fn from_parts(parts: GeneratorParts) -> Self {
        let p = &parts;
        Self {
            total: p.trace_x + p.drift_x + p.trace_mu + p.drift_mu + p.nonlinear_sq,
            parts,
        }
    }
}

/// Which operator a [`BoundGenerator`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// `L_{sigma,b}`
    DriftDiffusion,
    /// `L_sigma`
    DiffusionOnly,
}

fn labelled(term: &str, e: Error) -> Error {
    match e {
        Error::MissingPartial(p) => Error::MissingPartial(format!("{p} (in {term})")),
        other => other,
    }
}

/// A generator bound to `(coeff, V, t, mu)`, ready to evaluate at any `x`.
#[derive(Debug)]
pub struct BoundGenerator<'a> {
    kind: GeneratorKind,
    coeff: &'a dyn CoefficientField,
    v: &'a CylindricalFunction,
    t: f64,
    mean_field: MeanField,
    moments: Vec<f64>,
    trace_mu: Vec<f64>,
    drift_mu: Vec<f64>,
}

impl<'a> BoundGenerator<'a> {
    pub fn new(
        kind: GeneratorKind,
        coeff: &'a dyn CoefficientField,
        v: &'a CylindricalFunction,
        t: f64,
        mu: &EmpiricalMeasure,
    ) -> Result<Self> {
        let d = coeff.state_dim();
        if v.dim() != d || mu.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "generator arguments",
                expected: d,
                found: if v.dim() != d { v.dim() } else { mu.dim() },
            });
        }
        let mean_field = coeff.mean_field(t, mu)?;
        let moments = v.moments(mu)?;
        let n = v.arity();
        let mut trace_terms = vec![Vec::with_capacity(mu.len()); n];
        let mut drift_terms = vec![Vec::with_capacity(mu.len()); n];
        let mut b = vec![0.0; d];
        for (y, w) in mu.atoms() {
            if n == 0 {
                break;
            }
            let a = {
                let s = diffusion_matrix(coeff, t, y, &mean_field);
                &s * s.transpose()
            };
            let push_vec = match kind {
                GeneratorKind::DriftDiffusion => {
                    coeff.drift_into(t, y, &mean_field, &mut b);
                    DVector::from_column_slice(&b)
                }
                GeneratorKind::DiffusionOnly => {
                    let gx = v.dx_at(t, y, &moments).map_err(|e| labelled("drift_mu", e))?;
                    &a * gx
                }
            };
            for i in 0..n {
                let hess = v.inner_hessian(i, y).map_err(|e| labelled("trace_mu", e))?;
                let grad = v.inner_gradient(i, y).map_err(|e| labelled("drift_mu", e))?;
                trace_terms[i].push(w * 0.5 * (&a * hess).trace());
                drift_terms[i].push(w * push_vec.dot(&grad));
            }
        }
        Ok(Self {
            kind,
            coeff,
            v,
            t,
            mean_field,
            trace_mu: trace_terms.iter().map(|v| pairwise_sum(v)).collect(),
            drift_mu: drift_terms.iter().map(|v| pairwise_sum(v)).collect(),
            moments,
        })
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    pub fn mean_field(&self) -> &MeanField {
        &self.mean_field
    }

    fn sigma(&self, x: &[f64]) -> DMatrix<f64> {
        diffusion_matrix(self.coeff, self.t, x, &self.mean_field)
    }

    pub fn eval(&self, x: &[f64]) -> Result<GeneratorValue> {
        Ok(self.eval_with_dt(x)?.0)
    }

    /// The generator value together with `d_t V` at the same point.
    pub fn eval_with_dt(&self, x: &[f64]) -> Result<(GeneratorValue, f64)> {
        let t = self.t;
        let r = &self.moments;
        let dx = self.v.dx_at(t, x, r).map_err(|e| labelled("drift_x", e))?;
        let dxx = self.v.dxx_at(t, x, r).map_err(|e| labelled("trace_x", e))?;
        let dr = self.v.dr_at(t, x, r).map_err(|e| labelled("drift_mu", e))?;
        let dt = self.v.dt_at(t, x, r).map_err(|e| labelled("d_t", e))?;
        let sigma = self.sigma(x);
        let a = &sigma * sigma.transpose();
        let mut parts = GeneratorParts {
            trace_x: 0.5 * (&a * &dxx).trace(),
            trace_mu: dr.iter().zip(&self.trace_mu).map(|(c, g)| c * g).sum(),
            drift_mu: dr.iter().zip(&self.drift_mu).map(|(c, g)| c * g).sum(),
            ..GeneratorParts::default()
        };
        match self.kind {
            GeneratorKind::DriftDiffusion => {
                let mut b = vec![0.0; x.len()];
                self.coeff.drift_into(t, x, &self.mean_field, &mut b);
                parts.drift_x = DVector::from_vec(b).dot(&dx);
            }
            GeneratorKind::DiffusionOnly => {
                parts.nonlinear_sq = 0.5 * (sigma.transpose() * &dx).norm_squared();
            }
        }
        Ok((GeneratorValue::from_parts(parts), dt))
    }

    /// `(d_t + L) V` at `x`.
    pub fn parabolic(&self, x: &[f64]) -> Result<f64> {
        let (g, dt) = self.eval_with_dt(x)?;
        Ok(dt + g.total)
    }

    /// `sigma^T d_x V` at `x`, the integrand of the martingale part.
    pub fn martingale_coefficient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let dx = self.v.dx_at(self.t, x, &self.moments)?;
        Ok(self.sigma(x).transpose() * dx)
    }
}

pub fn apply_l_sigma_b(
    coeff: &dyn CoefficientField,
    v: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<GeneratorValue> {
    BoundGenerator::new(GeneratorKind::DriftDiffusion, coeff, v, t, mu)?.eval(x)
}

/// `L_sigma V`; the drift of `coeff` is ignored.
pub fn apply_l_sigma(
    coeff: &dyn CoefficientField,
    v: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<GeneratorValue> {
    BoundGenerator::new(GeneratorKind::DiffusionOnly, coeff, v, t, mu)?.eval(x)
}

/// `|L_sigma V - ((d_t + L_{sigma,b}) V - d_t V - 1/2 |sigma^T d_x V|^2)|` with
/// `b := sigma sigma^T d_x V` supplied by `gradient_coeff`, whose diffusion
/// must agree with that of `coeff`.
pub fn drift_identity_defect(
    coeff: &dyn CoefficientField,
    gradient_coeff: &dyn CoefficientField,
    v: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<f64> {
    let lhs = apply_l_sigma(coeff, v, t, x, mu)?.total;
    let bound = BoundGenerator::new(GeneratorKind::DriftDiffusion, gradient_coeff, v, t, mu)?;
    let (g, dt) = bound.eval_with_dt(x)?;
    let parabolic = dt + g.total;
    let half_sq = 0.5 * bound.martingale_coefficient(x)?.norm_squared();
    Ok((lhs - (parabolic - dt - half_sq)).abs())
}

/// One step of the Itô residual series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStep {
    pub step: usize,
    pub time: f64,
    pub residual: f64,
    pub martingale_increment: f64,
}

/// Residuals of the discrete Itô formula along particle `i`:
///
/// ```text
/// r_k = f(t_{k+1}, X_{k+1}, mu_{k+1}) - f(t_k, X_k, mu_k)
///       - (d_t + L_{sigma,b}) f(t_k, X_k, mu_k) dt - <sigma^T d_x f, dW_k>
/// ```
pub fn ito_residual(
    coeff: &dyn CoefficientField,
    f: &CylindricalFunction,
    flow: &ParticleFlow,
    i: usize,
) -> Result<Vec<ResidualStep>> {
    check_flow(coeff, flow)?;
    let path = ParticlePath::new(flow, i)?;
    let steps = flow.steps();
    let values = (0..=steps)
        .map(|k| f.value(flow.time(k), path.state(k), flow.snapshot(k)))
        .collect::<Result<Vec<_>>>()?;
    (0..steps)
        .map(|k| {
            let bound = BoundGenerator::new(
                GeneratorKind::DriftDiffusion,
                coeff,
                f,
                flow.time(k),
                flow.snapshot(k),
            )?;
            residual_at(&bound, flow, k, path.state(k), path.increment(k), values[k], values[k + 1])
        })
        .collect()
}

fn residual_at(
    bound: &BoundGenerator<'_>,
    flow: &ParticleFlow,
    k: usize,
    x: &[f64],
    dw: &[f64],
    before: f64,
    after: f64,
) -> Result<ResidualStep> {
    let drift = bound.parabolic(x)? * flow.grid().dt();
    let mart: f64 = bound
        .martingale_coefficient(x)?
        .iter()
        .zip(dw)
        .map(|(g, w)| g * w)
        .sum();
    Ok(ResidualStep {
        step: k,
        time: flow.time(k),
        residual: after - before - drift - mart,
        martingale_increment: mart,
    })
}

/// Aggregate Itô residual statistics over every particle of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoReport {
    /// Mean residual over particles and steps. Its standard error is taken
    /// from the per-step particle means, because the measure argument is
    /// shared by all particles within a step.
    pub mean_residual: SampleSummary,
    /// `sum_k <sigma^T d_x f, dW_k>^2`, summed over particles.
    pub realized_qv: f64,
    /// `sum_k |sigma^T d_x f|^2 dt`, summed over particles.
    pub expected_qv: f64,
    /// Per-step means over particles.
    pub steps: Vec<ResidualStep>,
}

impl ItoReport {
    pub fn qv_relative_error(&self) -> f64 {
        (self.realized_qv - self.expected_qv).abs() / self.expected_qv.abs()
    }
}

pub fn ito_residual_ensemble(
    coeff: &dyn CoefficientField,
    f: &CylindricalFunction,
    flow: &ParticleFlow,
) -> Result<ItoReport> {
    check_flow(coeff, flow)?;
    let n = flow.particles();
    let dt = flow.grid().dt();
    let per_step = (0..flow.steps())
        .into_par_iter()
        .map(|k| {
            let (t0, t1) = (flow.time(k), flow.time(k + 1));
            let (mu0, mu1) = (flow.snapshot(k), flow.snapshot(k + 1));
            let bound = BoundGenerator::new(GeneratorKind::DriftDiffusion, coeff, f, t0, mu0)?;
            let r1 = f.moments(mu1)?;
            let mut res = Vec::with_capacity(n);
            let mut mart = Vec::with_capacity(n);
            let mut qv = Vec::with_capacity(n);
            let mut eqv = Vec::with_capacity(n);
            for i in 0..n {
                let x = flow.state(k, i);
                let before = f.value_at(t0, x, bound.moments());
                let after = f.value_at(t1, flow.state(k + 1, i), &r1);
                let step = residual_at(&bound, flow, k, x, flow.increment(k, i), before, after)?;
                res.push(step.residual);
                mart.push(step.martingale_increment);
                qv.push(step.martingale_increment * step.martingale_increment);
                eqv.push(bound.martingale_coefficient(x)?.norm_squared() * dt);
            }
            Ok((
                ResidualStep {
                    step: k,
                    time: t0,
                    residual: pairwise_sum(&res) / n as f64,
                    martingale_increment: pairwise_sum(&mart) / n as f64,
                },
                pairwise_sum(&qv),
                pairwise_sum(&eqv),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = per_step.iter().map(|(s, _, _)| s.residual).collect();
    let qv: Vec<f64> = per_step.iter().map(|(_, q, _)| *q).collect();
    let eqv: Vec<f64> = per_step.iter().map(|(_, _, e)| *e).collect();
    Ok(ItoReport {
        mean_residual: SampleSummary::from_samples(&means),
        realized_qv: pairwise_sum(&qv),
        expected_qv: pairwise_sum(&eqv),
        steps: per_step.into_iter().map(|(s, _, _)| s).collect(),
    })
}

/// CSV with columns `step,time,residual,martingale_increment`.
pub fn write_residual_csv<W: Write>(steps: &[ResidualStep], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "time", "residual", "martingale_increment"])?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            s.time.to_string(),
            s.residual.to_string(),
            s.martingale_increment.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fails unless `flow` has the dimensions of `coeff`.
pub fn check_flow(coeff: &dyn CoefficientField, flow: &ParticleFlow) -> Result<()> {
    if flow.state_dim() != coeff.state_dim() || flow.noise_dim() != coeff.noise_dim() {
        return Err(contract("flow dimensions differ from the coefficient field"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Inner, Outer};
    use crate::dynamics::{simulate_mckean_vlasov, Affine, Constant, InitialLaw, TimeGrid};

    fn func(inners: Vec<Inner>, outer: Outer) -> CylindricalFunction {
        CylindricalFunction::from_parts(inners, outer).unwrap()
    }

    fn check_parts(g: &GeneratorValue) {
        let p = g.parts;
        let sum = p.trace_x + p.drift_x + p.trace_mu + p.drift_mu + p.nonlinear_sq;
        assert!((g.total - sum).abs() <= 1e-12);
    }

    #[test]
    fn coordinate_without_drift_vanishes() {
        let v = func(vec![], Outer::coordinate(1, 0, 0));
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 2.0]).unwrap();
        let c = Constant::brownian(1, 3.0, 0.0);
        let g = apply_l_sigma_b(&c, &v, 0.0, &[1.3], &mu).unwrap();
        assert_eq!(g.total, 0.0);
    }

    #[test]
    fn second_moment_under_constant_diffusion() {
        let s = 1.7;
        let v = func(vec![Inner::SquaredNorm { dim: 1 }], Outer::mean_sum(1, 1));
        let mu = EmpiricalMeasure::from_scalars(&[-1.0, 0.5, 4.0]).unwrap();
        let g = apply_l_sigma_b(&Constant::brownian(1, s, 0.0), &v, 0.0, &[0.0], &mu).unwrap();
        assert!((g.total - s * s).abs() <= 1e-14);
        assert!((g.parts.trace_mu - s * s).abs() <= 1e-14);
        check_parts(&g);
    }

    #[test]
    fn state_times_mean_expansion() {
        // V = x mu(Id), sigma = 1, b = -x, mu = {1}: drift_x = -x, drift_mu = -x
        let v = func(vec![Inner::Coordinate { dim: 1, index: 0 }], Outer::state_times_mean(1));
        let mu = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let c = Affine::ornstein_uhlenbeck(1, 1.0, 1.0);
        let g = apply_l_sigma_b(&c, &v, 0.0, &[1.0], &mu).unwrap();
        assert_eq!(g.parts.drift_x, -1.0);
        assert_eq!(g.parts.drift_mu, -1.0);
        assert_eq!(g.total, -2.0);
        check_parts(&g);
    }

    #[test]
    fn l_sigma_examples() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        let c = Constant::brownian(1, 1.0, 0.0);
        let konst = func(vec![], Outer::constant(1, 4.0));
        assert_eq!(apply_l_sigma(&c, &konst, 0.0, &[2.0], &mu).unwrap().total, 0.0);
        let x = func(vec![], Outer::coordinate(1, 0, 0));
        let g = apply_l_sigma(&c, &x, 0.0, &[2.0], &mu).unwrap();
        assert_eq!(g.total, 0.5);
        assert_eq!(g.parts.nonlinear_sq, 0.5);
        check_parts(&g);
    }

    #[test]
    fn measure_free_functions_get_the_classical_generator() {
        let c = Affine::mean_reverting(1, 0.7, 1.3);
        let v = func(vec![], Outer::squared_norm(1, 0));
        let mu = EmpiricalMeasure::from_scalars(&[2.0, 3.0]).unwrap();
        let x = 0.4;
        let g = apply_l_sigma_b(&c, &v, 0.0, &[x], &mu).unwrap();
        let b = 0.7 * (2.5 - x);
        assert!((g.total - (1.3f64 * 1.3 + 2.0 * x * b)).abs() <= 1e-14);
        assert_eq!(g.parts.trace_mu, 0.0);
        assert_eq!(g.parts.drift_mu, 0.0);
    }

    #[test]
    fn residual_trivial_cases() {
        // a power-of-two step keeps grid times and their differences exact
        let grid = TimeGrid::new(0.0, 0.5, 0.0625).unwrap();
        let init = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 1.0,
        };
        let c = Affine::mean_reverting(1, 1.0, 1.0);
        let flow = simulate_mckean_vlasov(&c, &init, 20, grid, 3).unwrap();
        let t = func(vec![], Outer::time(1));
        for s in ito_residual(&c, &t, &flow, 4).unwrap() {
            assert_eq!(s.residual, 0.0);
        }
        let z = Constant::zero(1, 1);
        let still = simulate_mckean_vlasov(&z, &init, 20, grid, 3).unwrap();
        let f = func(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1));
        for s in ito_residual(&z, &f, &still, 7).unwrap() {
            assert_eq!(s.residual, 0.0);
        }
        assert!(matches!(ito_residual(&z, &f, &still, 20), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_residual_is_first_order() {
        // sigma = 0: the residual is the Euler defect b^2 dt^2 per step, so its
        // sum over a fixed horizon halves with dt
        let c = Affine::mean_reverting(1, 1.0, 0.0);
        let f = func(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1));
        let init = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 1.0,
        };
        let total = |dt: f64| -> f64 {
            let flow = simulate_mckean_vlasov(&c, &init, 50, TimeGrid::new(0.0, 1.0, dt).unwrap(), 2).unwrap();
            ito_residual(&c, &f, &flow, 0).unwrap().iter().map(|s| s.residual).sum()
        };
        let ratio = total(0.02) / total(0.01);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn squared_state_quadratic_variation() {
        let c = Constant::brownian(1, 1.0, 0.0);
        let f = func(vec![], Outer::squared_norm(1, 0));
        let flow = simulate_mckean_vlasov(
            &c,
            &InitialLaw::Dirac(vec![0.5]),
            200,
            TimeGrid::new(0.0, 1.0, 1e-3).unwrap(),
            8,
        )
        .unwrap();
        let report = ito_residual_ensemble(&c, &f, &flow).unwrap();
        assert!(report.mean_residual.within(0.0, 3.0), "{:?}", report.mean_residual);
        assert!(report.qv_relative_error() <= 0.1);
    }

    #[test]
    fn residual_csv_header() {
        let mut buf = Vec::new();
        write_residual_csv(
            &[ResidualStep {
                step: 0,
                time: 0.0,
                residual: 1.5,
                martingale_increment: -0.25,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,time,residual,martingale_increment\n0,0,1.5,-0.25\n");
    }
}
