//! Cylindrical functions on `[0,T] x R^d x P_2(R^d)` and their L-derivatives.
//!
//! A [`CylindricalFunction`] has the form
//!
//! ```text
//! V(t, x, mu) = F(t, x, mu(h_1), ..., mu(h_n))
//! ```
//!
//! with smooth inner functions `h_i: R^d -> R` (bounded Hessians) and an outer
//! function `F`. Its L-derivative is available in closed form,
//!
//! ```text
//! d_mu V(t, x, mu)(y)     = sum_i d_{r_i} F(t, x, r) grad h_i(y)
//! d_y d_mu V(t, x, mu)(y) = sum_i d_{r_i} F(t, x, r) hess h_i(y)
//! ```
//!
//! where `r = (mu(h_1), ..., mu(h_n))`, so every operator in the crate works
//! with exact derivatives. The [`fd`] module holds the finite-difference
//! oracles that check these formulas.

pub mod catalog;
pub mod fd;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::stats::pairwise_sum;

pub use catalog::{Inner, Link, Outer, QuadraticForm};

/// A test function `h: R^d -> R` integrated against the measure argument.
pub trait InnerFunction: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn label(&self) -> String;
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, _y: &[f64]) -> Option<DVector<f64>> {
        None
    }
    fn hessian(&self, _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    /// Declared bound on the operator norm of the Hessian, if finite.
    fn hessian_bound(&self) -> Option<f64> {
        None
    }
}

/// The outer function `F(t, x, r)` with `x in R^d`, `r in R^n`.
///
/// Partials return `None` when not provided; callers that need one report a
/// [`Error::MissingPartial`].
pub trait OuterFunction: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn arity(&self) -> usize;
    fn label(&self) -> String;
    fn value(&self, t: f64, x: &[f64], r: &[f64]) -> f64;
    fn dt(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<f64> {
        None
    }
    fn dx(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<DVector<f64>> {
        None
    }
    fn dxx(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    fn dr(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<DVector<f64>> {
        None
    }
    fn drr(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    /// Mixed partials, `d x n`.
    fn dxdr(&self, _t: f64, _x: &[f64], _r: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// First and second order partials of `V` in `(t, x)` plus `d_r F`, all
/// evaluated at one `(t, x, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub dt: f64,
    pub dx: DVector<f64>,
    pub dxx: DMatrix<f64>,
    pub dr: DVector<f64>,
}

#[derive(Clone)]
pub struct CylindricalFunction {
    dim: usize,
    inners: Vec<Arc<dyn InnerFunction>>,
    outer: Arc<dyn OuterFunction>,
}

impl fmt::Debug for CylindricalFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylindricalFunction")
            .field("label", &self.label())
            .finish()
    }
}

impl CylindricalFunction {
    pub fn new(inners: Vec<Arc<dyn InnerFunction>>, outer: Arc<dyn OuterFunction>) -> Result<Self> {
        let dim = outer.state_dim();
        if outer.arity() != inners.len() {
            return Err(Error::DimensionMismatch {
                context: "CylindricalFunction outer arity",
                expected: inners.len(),
                found: outer.arity(),
            });
        }
        if let Some(h) = inners.iter().find(|h| h.dim() != dim) {
            return Err(Error::DimensionMismatch {
                context: "CylindricalFunction inner dimension",
                expected: dim,
                found: h.dim(),
            });
        }
        Ok(Self { dim, inners, outer })
    }

    /// Convenience constructor from catalog parts.
    pub fn from_parts(inners: Vec<Inner>, outer: Outer) -> Result<Self> {
        let inners = inners
            .into_iter()
            .map(|h| Arc::new(h) as Arc<dyn InnerFunction>)
            .collect();
        Self::new(inners, Arc::new(outer))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arity(&self) -> usize {
        self.inners.len()
    }

    pub fn inners(&self) -> &[Arc<dyn InnerFunction>] {
        &self.inners
    }

    pub fn outer(&self) -> &Arc<dyn OuterFunction> {
        &self.outer
    }

    pub fn label(&self) -> String {
        let inner: Vec<String> = self.inners.iter().map(|h| h.label()).collect();
        if inner.is_empty() {
            self.outer.label()
        } else {
            format!("{}[{}]", self.outer.label(), inner.join(","))
        }
    }

    /// False when the function ignores its measure argument.
    pub fn depends_on_measure(&self) -> bool {
        !self.inners.is_empty()
    }

    /// The finitely many statistics `r_i = mu(h_i)` the function reads.
    pub fn moments(&self, mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        if mu.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "CylindricalFunction::moments",
                expected: self.dim,
                found: mu.dim(),
            });
        }
        self.inners
            .iter()
            .map(|h| mu.integrate(|y| h.value(y)))
            .collect()
    }

    pub fn value_at(&self, t: f64, x: &[f64], r: &[f64]) -> f64 {
        self.outer.value(t, x, r)
    }

    pub fn value(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<f64> {
        self.check_state(x)?;
        let r = self.moments(mu)?;
        Ok(self.value_at(t, x, &r))
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "CylindricalFunction state",
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn dt_at(&self, t: f64, x: &[f64], r: &[f64]) -> Result<f64> {
        self.outer
            .dt(t, x, r)
            .ok_or_else(|| Error::MissingPartial("d_t F".into()))
    }

    pub fn dx_at(&self, t: f64, x: &[f64], r: &[f64]) -> Result<DVector<f64>> {
        self.outer
            .dx(t, x, r)
            .ok_or_else(|| Error::MissingPartial("d_x F".into()))
    }

    pub fn dxx_at(&self, t: f64, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
        self.outer
            .dxx(t, x, r)
            .ok_or_else(|| Error::MissingPartial("d_x^2 F".into()))
    }

    pub fn dr_at(&self, t: f64, x: &[f64], r: &[f64]) -> Result<DVector<f64>> {
        if self.inners.is_empty() {
            return Ok(DVector::zeros(0));
        }
        self.outer
            .dr(t, x, r)
            .ok_or_else(|| Error::MissingPartial("d_r F".into()))
    }

    pub fn jet_at(&self, t: f64, x: &[f64], r: &[f64]) -> Result<Jet> {
        Ok(Jet {
            value: self.value_at(t, x, r),
            dt: self.dt_at(t, x, r)?,
            dx: self.dx_at(t, x, r)?,
            dxx: self.dxx_at(t, x, r)?,
            dr: self.dr_at(t, x, r)?,
        })
    }

    pub fn inner_gradient(&self, i: usize, y: &[f64]) -> Result<DVector<f64>> {
        self.inners[i]
            .gradient(y)
            .ok_or_else(|| Error::MissingPartial(format!("grad h_{}", i + 1)))
    }

    pub fn inner_hessian(&self, i: usize, y: &[f64]) -> Result<DMatrix<f64>> {
        self.inners[i]
            .hessian(y)
            .ok_or_else(|| Error::MissingPartial(format!("hess h_{}", i + 1)))
    }

    /// `d_mu V(t,x,mu)(y)` given precomputed `d_r F(t, x, r)`.
    pub fn l_derivative_with(&self, dr: &DVector<f64>, y: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        for (i, c) in dr.iter().enumerate() {
            if *c != 0.0 {
                out.axpy(*c, &self.inner_gradient(i, y)?, 1.0);
            }
        }
        Ok(out)
    }

    /// `d_y d_mu V(t,x,mu)(y)` given precomputed `d_r F(t, x, r)`.
    pub fn l_hessian_with(&self, dr: &DVector<f64>, y: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (i, c) in dr.iter().enumerate() {
            if *c != 0.0 {
                out += self.inner_hessian(i, y)? * *c;
            }
        }
        Ok(out)
    }
}

/// The L-derivative `d_mu f(t, x, mu)(y)`.
pub fn l_derivative(
    f: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
) -> Result<DVector<f64>> {
    if y.len() != f.dim() {
        return Err(Error::DimensionMismatch {
            context: "l_derivative point",
            expected: f.dim(),
            found: y.len(),
        });
    }
    let r = f.moments(mu)?;
    let dr = f.dr_at(t, x, &r)?;
    f.l_derivative_with(&dr, y)
}

/// The exact pairing `mu(<d_mu f(t,x,mu), phi>)`.
pub fn directional_l_derivative(
    f: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    phi: impl Fn(&[f64], &mut [f64]),
) -> Result<f64> {
    let r = f.moments(mu)?;
    let dr = f.dr_at(t, x, &r)?;
    let mut disp = vec![0.0; f.dim()];
    let mut terms = Vec::with_capacity(mu.len());
    for (y, w) in mu.atoms() {
        disp.iter_mut().for_each(|v| *v = 0.0);
        phi(y, &mut disp);
        let grad = f.l_derivative_with(&dr, y)?;
        let dot: f64 = grad.iter().zip(&disp).map(|(a, b)| a * b).sum();
        terms.push(w * dot);
    }
    Ok(pairwise_sum(&terms))
}

/// Forward difference quotient `[f(t,x, mu o (Id + eps phi)^{-1}) - f(t,x,mu)] / eps`.
///
/// As `eps -> 0` this converges to [`directional_l_derivative`]; the gap is
/// `O(eps mu(|phi|^2))` for catalog functions.
pub fn l_derivative_fd_oracle(
    f: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    phi: impl Fn(&[f64], &mut [f64]),
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(crate::error::contract("finite-difference step must be positive"));
    }
    let moved = mu.pushforward(|y, d| {
        phi(y, d);
        d.iter_mut().for_each(|v| *v *= eps);
    })?;
    let base = f.value(t, x, mu)?;
    let shifted = f.value(t, x, &moved)?;
    Ok((shifted - base) / eps)
}

type PointMap<T> = Box<dyn Fn(&[f64]) -> T + Send + Sync>;

/// Every partial of `f` at `(t, x, mu)`, from closed forms only.
pub struct DerivativeBundle {
    pub value: f64,
    pub dt: f64,
    pub dx: DVector<f64>,
    pub dxx: DMatrix<f64>,
    /// `y -> d_mu f(t,x,mu)(y)`
    pub dmu: PointMap<DVector<f64>>,
    /// `y -> d_y d_mu f(t,x,mu)(y)`
    pub dy_dmu: PointMap<DMatrix<f64>>,
}

impl fmt::Debug for DerivativeBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DerivativeBundle")
            .field("value", &self.value)
            .field("dt", &self.dt)
            .field("dx", &self.dx)
            .field("dxx", &self.dxx)
            .finish_non_exhaustive()
    }
}

pub fn derivative_bundle(
    f: &CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<DerivativeBundle> {
    f.check_state(x)?;
    let r = f.moments(mu)?;
    let jet = f.jet_at(t, x, &r)?;
    // probe capabilities once so the closures below never need to fail
    let probe = mu.point(0);
    for i in 0..f.arity() {
        f.inner_gradient(i, probe)?;
        f.inner_hessian(i, probe)?;
    }
    let g = f.clone();
    let dr = jet.dr.clone();
    let dmu: PointMap<DVector<f64>> = Box::new(move |y| {
        g.l_derivative_with(&dr, y)
            .unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN))
    });
    let h = f.clone();
    let dr = jet.dr.clone();
    let dy_dmu: PointMap<DMatrix<f64>> = Box::new(move |y| {
        h.l_hessian_with(&dr, y)
            .unwrap_or_else(|_| DMatrix::from_element(y.len(), y.len(), f64::NAN))
    });
    Ok(DerivativeBundle {
        value: jet.value,
        dt: jet.dt,
        dx: jet.dx,
        dxx: jet.dxx,
        dmu,
        dy_dmu,
    })
}
