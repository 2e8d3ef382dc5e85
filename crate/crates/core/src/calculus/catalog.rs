//! Built-in inner and outer functions, addressable by string identifiers.

use nalgebra::{DMatrix, DVector};

use super::{CylindricalFunction, InnerFunction, OuterFunction};
use crate::error::{Error, Result};

/// Catalog test functions `h: R^d -> R`, all with bounded Hessians.
#[derive(Debug, Clone, PartialEq)]
pub enum Inner {
    /// `<a, y>`
    Linear { direction: Vec<f64> },
    /// `|y|^2`
    SquaredNorm { dim: usize },
    /// `exp(-|y|^2 / 2)`
    Bump { dim: usize },
    /// `y_k`
    Coordinate { dim: usize, index: usize },
    /// `y_i y_j`
    Monomial { dim: usize, i: usize, j: usize },
}

impl Inner {
    /// Identifiers: `linear` (all-ones direction), `quadratic`, `bump`,
    /// `coordinate` / `coordinate:k`, `monomial:i:j`. Indices are zero-based.
    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        let mut parts = id.split(':');
        let head = parts.next().unwrap_or_default().trim();
        let mut index = |name: &str| -> Result<usize> {
            match parts.next() {
                None => Ok(0),
                Some(s) => {
                    let k: usize = s
                        .trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("inner `{id}`: bad {name} index `{s}`")))?;
                    if k >= dim {
                        return Err(Error::Data(format!(
                            "inner `{id}`: {name} index {k} out of range for dimension {dim}"
                        )));
                    }
                    Ok(k)
                }
            }
        };
        let h = match head {
            "linear" | "identity" | "mean" => Inner::Linear {
                direction: vec![1.0; dim],
            },
            "quadratic" | "squared_norm" => Inner::SquaredNorm { dim },
            "bump" => Inner::Bump { dim },
            "coordinate" => Inner::Coordinate {
                dim,
                index: index("coordinate")?,
            },
            "monomial" => {
                let i = index("first")?;
                let j = index("second")?;
                Inner::Monomial { dim, i, j }
            }
            _ => return Err(Error::Data(format!("unknown inner function `{id}`"))),
        };
        Ok(h)
    }
}

impl InnerFunction for Inner {
    fn dim(&self) -> usize {
        match self {
            Inner::Linear { direction } => direction.len(),
            Inner::SquaredNorm { dim }
            | Inner::Bump { dim }
            | Inner::Coordinate { dim, .. }
            | Inner::Monomial { dim, .. } => *dim,
        }
    }

    fn label(&self) -> String {
        match self {
            Inner::Linear { .. } => "linear".into(),
            Inner::SquaredNorm { .. } => "quadratic".into(),
            Inner::Bump { .. } => "bump".into(),
            Inner::Coordinate { index, .. } => format!("coordinate:{index}"),
            Inner::Monomial { i, j, .. } => format!("monomial:{i}:{j}"),
        }
    }

    fn value(&self, y: &[f64]) -> f64 {
        match self {
            Inner::Linear { direction } => direction.iter().zip(y).map(|(a, b)| a * b).sum(),
            Inner::SquaredNorm { .. } => y.iter().map(|v| v * v).sum(),
            Inner::Bump { .. } => (-0.5 * y.iter().map(|v| v * v).sum::<f64>()).exp(),
            Inner::Coordinate { index, .. } => y[*index],
            Inner::Monomial { i, j, .. } => y[*i] * y[*j],
        }
    }

    fn gradient(&self, y: &[f64]) -> Option<DVector<f64>> {
        let d = y.len();
        let g = match self {
            Inner::Linear { direction } => DVector::from_column_slice(direction),
            Inner::SquaredNorm { .. } => DVector::from_iterator(d, y.iter().map(|v| 2.0 * v)),
            Inner::Bump { .. } => {
                let e = self.value(y);
                DVector::from_iterator(d, y.iter().map(|v| -v * e))
            }
            Inner::Coordinate { index, .. } => {
                let mut g = DVector::zeros(d);
                g[*index] = 1.0;
                g
            }
            Inner::Monomial { i, j, .. } => {
                let mut g = DVector::zeros(d);
                g[*i] += y[*j];
                g[*j] += y[*i];
                g
            }
        };
        Some(g)
    }

    fn hessian(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        let d = y.len();
        let h = match self {
            Inner::Linear { .. } | Inner::Coordinate { .. } => DMatrix::zeros(d, d),
            Inner::SquaredNorm { .. } => DMatrix::identity(d, d) * 2.0,
            Inner::Bump { .. } => {
                let e = self.value(y);
                let v = DVector::from_column_slice(y);
                (&v * v.transpose() - DMatrix::identity(d, d)) * e
            }
            Inner::Monomial { i, j, .. } => {
                let mut h = DMatrix::zeros(d, d);
                h[(*i, *j)] += 1.0;
                h[(*j, *i)] += 1.0;
                h
            }
        };
        Some(h)
    }

    fn hessian_bound(&self) -> Option<f64> {
        Some(match self {
            Inner::Linear { .. } | Inner::Coordinate { .. } => 0.0,
            Inner::SquaredNorm { .. } => 2.0,
            Inner::Bump { .. } => 1.0,
            Inner::Monomial { i, j, .. } => {
                if i == j {
                    2.0
                } else {
                    1.0
                }
            }
        })
    }
}

/// `q(z) = c + <g, z> + z^T H z / 2` over `z = (t, x_1..x_d, r_1..r_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    state_dim: usize,
    arity: usize,
    constant: f64,
    linear: Vec<f64>,
    /// row-major symmetric Hessian
    hessian: Vec<f64>,
}

impl QuadraticForm {
    pub fn new(state_dim: usize, arity: usize) -> Self {
        let n = 1 + state_dim + arity;
        Self {
            state_dim,
            arity,
            constant: 0.0,
            linear: vec![0.0; n],
            hessian: vec![0.0; n * n],
        }
    }

    fn vars(&self) -> usize {
        1 + self.state_dim + self.arity
    }

    fn t_var() -> usize {
        0
    }

    fn x_var(&self, k: usize) -> usize {
        assert!(k < self.state_dim, "state index {k} out of range");
        1 + k
    }

    fn r_var(&self, i: usize) -> usize {
        assert!(i < self.arity, "moment index {i} out of range");
        1 + self.state_dim + i
    }

    fn add_linear(mut self, v: usize, c: f64) -> Self {
        self.linear[v] += c;
        self
    }

    /// Adds `c z_a z_b`.
    fn add_product(mut self, a: usize, b: usize, c: f64) -> Self {
        let n = self.vars();
        if a == b {
            self.hessian[a * n + a] += 2.0 * c;
        } else {
            self.hessian[a * n + b] += c;
            self.hessian[b * n + a] += c;
        }
        self
    }

    pub fn constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn time(self, c: f64) -> Self {
        self.add_linear(Self::t_var(), c)
    }

    pub fn state(self, k: usize, c: f64) -> Self {
        let v = self.x_var(k);
        self.add_linear(v, c)
    }

    pub fn moment(self, i: usize, c: f64) -> Self {
        let v = self.r_var(i);
        self.add_linear(v, c)
    }

    pub fn state_state(self, k: usize, l: usize, c: f64) -> Self {
        let (a, b) = (self.x_var(k), self.x_var(l));
        self.add_product(a, b, c)
    }

    pub fn moment_moment(self, i: usize, j: usize, c: f64) -> Self {
        let (a, b) = (self.r_var(i), self.r_var(j));
        self.add_product(a, b, c)
    }

    pub fn time_moment(self, i: usize, c: f64) -> Self {
        let b = self.r_var(i);
        self.add_product(Self::t_var(), b, c)
    }

    pub fn time_state(self, k: usize, c: f64) -> Self {
        let b = self.x_var(k);
        self.add_product(Self::t_var(), b, c)
    }

    pub fn state_moment(self, k: usize, i: usize, c: f64) -> Self {
        let (a, b) = (self.x_var(k), self.r_var(i));
        self.add_product(a, b, c)
    }

    /// Adds `c |x|^2`.
    pub fn squared_state_norm(self, c: f64) -> Self {
        (0..self.state_dim).fold(self, |q, k| q.state_state(k, k, c))
    }

    fn pack(&self, t: f64, x: &[f64], r: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.vars());
        z.push(t);
        z.extend_from_slice(x);
        z.extend_from_slice(r);
        z
    }

    fn eval(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let n = self.vars();
        let mut grad = self.linear.clone();
        let mut quad = 0.0;
        for a in 0..n {
            let row = &self.hessian[a * n..(a + 1) * n];
            let hz: f64 = row.iter().zip(z).map(|(h, v)| h * v).sum();
            grad[a] += hz;
            quad += z[a] * hz;
        }
        let lin: f64 = self.linear.iter().zip(z).map(|(g, v)| g * v).sum();
        (self.constant + lin + 0.5 * quad, grad)
    }
}

/// Scalar link applied to the quadratic form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Exp,
    /// Defined for positive arguments only.
    Log,
}

impl Link {
    /// `(phi(q), phi'(q), phi''(q))`
    fn jet(self, q: f64) -> (f64, f64, f64) {
        match self {
            Link::Identity => (q, 1.0, 0.0),
            Link::Exp => {
                let e = q.exp();
                (e, e, e)
            }
            Link::Log => (q.ln(), 1.0 / q, -1.0 / (q * q)),
        }
    }
}

/// Catalog outer function `F = scale * link(q(t, x, r))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outer {
    label: String,
    scale: f64,
    link: Link,
    form: QuadraticForm,
}

/// Full gradient and Hessian of `F` in `z = (t, x, r)`.
struct FullJet {
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl Outer {
    pub fn new(label: impl Into<String>, scale: f64, link: Link, form: QuadraticForm) -> Self {
        Self {
            label: label.into(),
            scale,
            link,
            form,
        }
    }

    pub fn link(&self) -> Link {
        self.link
    }

    fn full(&self, t: f64, x: &[f64], r: &[f64]) -> FullJet {
        let z = self.form.pack(t, x, r);
        let (q, gq) = self.form.eval(&z);
        let (_, p1, p2) = self.link.jet(q);
        let n = self.form.vars();
        let s = self.scale;
        let grad: Vec<f64> = gq.iter().map(|g| s * p1 * g).collect();
        let mut hess = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                hess[a * n + b] = s * (p2 * gq[a] * gq[b] + p1 * self.form.hessian[a * n + b]);
            }
        }
        FullJet {
            grad,
            hess,
        }
    }

    fn block(&self, hess: &[f64], rows: (usize, usize), cols: (usize, usize)) -> DMatrix<f64> {
        let n = self.form.vars();
        DMatrix::from_fn(rows.1, cols.1, |i, j| hess[(rows.0 + i) * n + cols.0 + j])
    }

    // --- named catalog members -------------------------------------------

    /// `sum_i r_i`
    pub fn mean_sum(d: usize, n: usize) -> Self {
        let q = (0..n).fold(QuadraticForm::new(d, n), |q, i| q.moment(i, 1.0));
        Self::new("mean", 1.0, Link::Identity, q)
    }

    /// `x_k`
    pub fn coordinate(d: usize, n: usize, k: usize) -> Self {
        Self::new("coordinate", 1.0, Link::Identity, QuadraticForm::new(d, n).state(k, 1.0))
    }

    /// `r_1^2`
    pub fn square_of_mean(d: usize) -> Self {
        let q = QuadraticForm::new(d, 1).moment_moment(0, 0, 1.0);
        Self::new("square_of_mean", 1.0, Link::Identity, q)
    }

    /// `r_1 r_2`
    pub fn product_of_means(d: usize) -> Self {
        let q = QuadraticForm::new(d, 2).moment_moment(0, 1, 1.0);
        Self::new("product_of_means", 1.0, Link::Identity, q)
    }

    /// `t r_1`
    pub fn time_times_mean(d: usize) -> Self {
        let q = QuadraticForm::new(d, 1).time_moment(0, 1.0);
        Self::new("time_times_mean", 1.0, Link::Identity, q)
    }

    /// `x_1 r_1`
    pub fn state_times_mean(d: usize) -> Self {
        let q = QuadraticForm::new(d, 1).state_moment(0, 0, 1.0);
        Self::new("state_times_mean", 1.0, Link::Identity, q)
    }

    /// `|x|^2`
    pub fn squared_norm(d: usize, n: usize) -> Self {
        let q = QuadraticForm::new(d, n).squared_state_norm(1.0);
        Self::new("x_squared", 1.0, Link::Identity, q)
    }

    /// `|x|^2 + r_1`
    pub fn squared_norm_plus_mean(d: usize) -> Self {
        let q = QuadraticForm::new(d, 1).squared_state_norm(1.0).moment(0, 1.0);
        Self::new("x_squared_plus_mean", 1.0, Link::Identity, q)
    }

    /// `|x|^2 + c (T - t)`; with `c = d sigma^2` it solves the backward heat
    /// equation for `dX = sigma dW`.
    pub fn heat_quadratic(d: usize, horizon: f64, c: f64) -> Self {
        let q = QuadraticForm::new(d, 0)
            .squared_state_norm(1.0)
            .constant(c * horizon)
            .time(-c);
        Self::new("heat_quadratic", 1.0, Link::Identity, q)
    }

    /// `exp(-a |x|^2)`
    pub fn gaussian(d: usize, a: f64) -> Self {
        let q = QuadraticForm::new(d, 0).squared_state_norm(-a);
        Self::new("gaussian", 1.0, Link::Exp, q)
    }

    /// `exp(r_1)`
    pub fn exp_of_mean(d: usize) -> Self {
        Self::new("exp_of_mean", 1.0, Link::Exp, QuadraticForm::new(d, 1).moment(0, 1.0))
    }

    /// `log(shift + r_1)`, defined where the argument is positive.
    pub fn log_of_mean(d: usize, shift: f64) -> Self {
        let q = QuadraticForm::new(d, 1).constant(shift).moment(0, 1.0);
        Self::new("log_of_mean", 1.0, Link::Log, q)
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self::new("constant", 1.0, Link::Identity, QuadraticForm::new(d, 0).constant(c))
    }

    /// `t`
    pub fn time(d: usize) -> Self {
        Self::new("time", 1.0, Link::Identity, QuadraticForm::new(d, 0).time(1.0))
    }

    /// `scale * F`
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale *= scale;
        self
    }

    /// Looks up an outer function by identifier. `n` is the number of inner
    /// functions supplied alongside it; `param` supplies the single numeric
    /// parameter some members take (horizon, rate or shift).
    pub fn from_id(id: &str, d: usize, n: usize, param: Option<f64>) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if n != k {
                return Err(Error::Data(format!(
                    "outer `{id}` takes {k} inner function(s), got {n}"
                )));
            }
            Ok(())
        };
        let f = match id {
            "mean" | "linear" => Self::mean_sum(d, n),
            "coordinate" | "x1" => Self::coordinate(d, n, 0),
            "x_squared" => Self::squared_norm(d, n),
            "square_of_mean" => {
                need(1)?;
                Self::square_of_mean(d)
            }
            "product_of_means" => {
                need(2)?;
                Self::product_of_means(d)
            }
            "time_times_mean" => {
                need(1)?;
                Self::time_times_mean(d)
            }
            "state_times_mean" => {
                need(1)?;
                Self::state_times_mean(d)
            }
            "x_squared_plus_mean" => {
                need(1)?;
                Self::squared_norm_plus_mean(d)
            }
            "exp_of_mean" => {
                need(1)?;
                Self::exp_of_mean(d)
            }
            "log_of_mean" => {
                need(1)?;
                Self::log_of_mean(d, param.unwrap_or(1.0))
            }
            "heat_quadratic" => {
                need(0)?;
                Self::heat_quadratic(d, param.unwrap_or(1.0), d as f64)
            }
            "gaussian" => {
                need(0)?;
                Self::gaussian(d, param.unwrap_or(0.25))
            }
            "constant" => {
                need(0)?;
                Self::constant(d, param.unwrap_or(1.0))
            }
            "time" => {
                need(0)?;
                Self::time(d)
            }
            _ => return Err(Error::Data(format!("unknown outer function `{id}`"))),
        };
        Ok(f)
    }
}

impl OuterFunction for Outer {
    fn state_dim(&self) -> usize {
        self.form.state_dim
    }

    fn arity(&self) -> usize {
        self.form.arity
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, t: f64, x: &[f64], r: &[f64]) -> f64 {
        let z = self.form.pack(t, x, r);
        let (q, _) = self.form.eval(&z);
        self.scale * self.link.jet(q).0
    }

    fn dt(&self, t: f64, x: &[f64], r: &[f64]) -> Option<f64> {
        Some(self.full(t, x, r).grad[0])
    }

    fn dx(&self, t: f64, x: &[f64], r: &[f64]) -> Option<DVector<f64>> {
        let d = self.form.state_dim;
        Some(DVector::from_column_slice(&self.full(t, x, r).grad[1..1 + d]))
    }

    fn dxx(&self, t: f64, x: &[f64], r: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.form.state_dim;
        Some(self.block(&self.full(t, x, r).hess, (1, d), (1, d)))
    }

    fn dr(&self, t: f64, x: &[f64], r: &[f64]) -> Option<DVector<f64>> {
        let d = self.form.state_dim;
        Some(DVector::from_column_slice(&self.full(t, x, r).grad[1 + d..]))
    }

    fn drr(&self, t: f64, x: &[f64], r: &[f64]) -> Option<DMatrix<f64>> {
        let (d, n) = (self.form.state_dim, self.form.arity);
        Some(self.block(&self.full(t, x, r).hess, (1 + d, n), (1 + d, n)))
    }

    fn dxdr(&self, t: f64, x: &[f64], r: &[f64]) -> Option<DMatrix<f64>> {
        let (d, n) = (self.form.state_dim, self.form.arity);
        Some(self.block(&self.full(t, x, r).hess, (1, d), (1 + d, n)))
    }
}

/// Builds a catalog cylindrical function from identifiers.
pub fn from_ids(inner: &[&str], outer: &str, d: usize, param: Option<f64>) -> Result<CylindricalFunction> {
    let inners = inner
        .iter()
        .map(|id| Inner::from_id(id, d))
        .collect::<Result<Vec<_>>>()?;
    let outer = Outer::from_id(outer, d, inners.len(), param)?;
    CylindricalFunction::from_parts(inners, outer)
}

/// A spread of catalog functions exercising every inner and outer member.
pub fn reference_functions(d: usize) -> Vec<CylindricalFunction> {
    let a: Vec<f64> = (0..d).map(|k| 0.5 + 0.25 * k as f64).collect();
    let build = |inners: Vec<Inner>, outer: Outer| {
        CylindricalFunction::from_parts(inners, outer).expect("catalog construction is consistent")
    };
    vec![
        build(vec![Inner::Linear { direction: a.clone() }], Outer::mean_sum(d, 1)),
        build(vec![Inner::SquaredNorm { dim: d }], Outer::mean_sum(d, 1)),
        build(vec![Inner::Coordinate { dim: d, index: 0 }], Outer::square_of_mean(d)),
        build(
            vec![Inner::Coordinate { dim: d, index: 0 }, Inner::Bump { dim: d }],
            Outer::product_of_means(d),
        ),
        build(vec![Inner::Bump { dim: d }], Outer::time_times_mean(d)),
        build(vec![Inner::Coordinate { dim: d, index: 0 }], Outer::state_times_mean(d)),
        build(vec![Inner::SquaredNorm { dim: d }], Outer::squared_norm_plus_mean(d)),
        build(
            vec![Inner::Monomial {
                dim: d,
                i: 0,
                j: d - 1,
            }],
            Outer::exp_of_mean(d).scaled(0.5),
        ),
        build(vec![Inner::Bump { dim: d }], Outer::log_of_mean(d, 1.0)),
        build(vec![], Outer::gaussian(d, 0.25)),
        build(vec![], Outer::heat_quadratic(d, 1.0, d as f64)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_products() {
        let q = QuadraticForm::new(1, 2).moment_moment(0, 1, 3.0).state_state(0, 0, 2.0);
        let z = q.pack(0.0, &[2.0], &[5.0, 7.0]);
        let (v, g) = q.eval(&z);
        assert_eq!(v, 3.0 * 35.0 + 2.0 * 4.0);
        assert_eq!(g, vec![0.0, 8.0, 21.0, 15.0]);
    }

    #[test]
    fn ids_resolve() {
        let f = from_ids(&["coordinate"], "square_of_mean", 1, None).unwrap();
        assert_eq!(f.label(), "square_of_mean[coordinate:0]");
        assert!(from_ids(&["quadratic"], "product_of_means", 1, None).is_err());
        assert!(from_ids(&["nope"], "mean", 1, None).is_err());
        assert!(Inner::from_id("coordinate:3", 2).is_err());
        assert_eq!(Inner::from_id("monomial:0:1", 2).unwrap(), Inner::Monomial { dim: 2, i: 0, j: 1 });
    }

    #[test]
    fn heat_quadratic_value() {
        let f = Outer::heat_quadratic(2, 1.0, 2.0);
        assert_eq!(f.value(0.25, &[1.0, 2.0], &[]), 5.0 + 1.5);
        assert_eq!(f.dt(0.25, &[1.0, 2.0], &[]), Some(-2.0));
    }

    #[test]
    fn hessian_bounds_hold_on_samples() {
        for h in [
            Inner::Bump { dim: 2 },
            Inner::SquaredNorm { dim: 2 },
            Inner::Monomial { dim: 2, i: 0, j: 1 },
        ] {
            let bound = h.hessian_bound().unwrap();
            for k in 0..50 {
                let y = [0.1 * k as f64 - 2.5, 0.07 * k as f64 - 1.0];
                let n = h.hessian(&y).unwrap().symmetric_eigenvalues().amax();
                assert!(n <= bound + 1e-12, "{} at {y:?}: {n}", h.label());
            }
        }
    }
}
