//! Empirical probability measures on `R^d` with finite second moment.
//!
//! An [`EmpiricalMeasure`] is a weighted point cloud `sum_i w_i delta_{x_i}`.
//! It is the concrete stand-in for a law in `P_2(R^d)` everywhere in the
//! crate: initial laws, particle snapshots, and the measure argument of every
//! coefficient and test function.

mod wasserstein;

use std::io::{Read, Write};

use crate::error::{contract, Error, Result};
use crate::rng::{NoiseStream, StreamDomain};
use crate::stats::pairwise_sum;

pub use wasserstein::{
    assignment, brute_force_assignment_cost, transport_cost, wasserstein2, wasserstein2_with_method,
    W2Method, MAX_TRANSPORT_ATOMS,
};

/// Weights must sum to one within this tolerance.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Row-major `len x dim`.
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    /// Builds a measure from row-major points and explicit weights.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(contract("measure dimension must be at least 1"));
        }
        if points.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch {
                context: "EmpiricalMeasure::new points",
                expected: dim * weights.len(),
                found: points.len(),
            });
        }
        if weights.is_empty() {
            return Err(contract("a measure needs at least one atom"));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "atom coordinate".into(),
                index: i / dim,
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite {
                what: "weight (must be finite and nonnegative)".into(),
                index: i,
            });
        }
        let total = pairwise_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(contract(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dim,
            points,
            weights,
            uniform: false,
        })
    }

    /// Equal weights `1/N` on the given row-major points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(contract(format!(
                "cannot split {} coordinates into atoms of dimension {dim}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "atom coordinate".into(),
                index: i / dim,
            });
        }
        let n = points.len() / dim;
        Ok(Self {
            dim,
            points,
            weights: vec![1.0 / n as f64; n],
            uniform: true,
        })
    }

    /// Normalizes nonnegative masses to a probability vector.
    pub fn from_masses(dim: usize, points: Vec<f64>, masses: &[f64]) -> Result<Self> {
        let total = pairwise_sum(masses);
        if !(total > 0.0) {
            return Err(contract("total mass must be positive"));
        }
        let weights = masses.iter().map(|m| m / total).collect();
        let mut mu = Self::new(dim, points, weights)?;
        mu.uniform = masses.windows(2).all(|w| w[0] == w[1]);
        Ok(mu)
    }

    /// One-dimensional uniform measure on the given values.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::uniform(1, values.to_vec())
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::uniform(point.len(), point.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True when every atom carries weight `1/N`.
    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// `mu(h) = sum_i w_i h(x_i)` for a scalar test function.
    pub fn integrate(&self, h: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let terms = self
            .atoms()
            .enumerate()
            .map(|(i, (x, w))| {
                let v = h(x);
                if v.is_finite() {
                    Ok(w * v)
                } else {
                    Err(Error::NonFinite {
                        what: "integrand".into(),
                        index: i,
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(pairwise_sum(&terms))
    }

    /// Componentwise `mu(h)` for a vector-valued test function writing into
    /// its second argument.
    pub fn integrate_vector(
        &self,
        out_dim: usize,
        h: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Vec<f64>> {
        let mut columns = vec![Vec::with_capacity(self.len()); out_dim];
        let mut buf = vec![0.0; out_dim];
        for (i, (x, w)) in self.atoms().enumerate() {
            buf.iter_mut().for_each(|b| *b = 0.0);
            h(x, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "integrand".into(),
                    index: i,
                });
            }
            for (col, v) in columns.iter_mut().zip(&buf) {
                col.push(w * v);
            }
        }
        Ok(columns.iter().map(|c| pairwise_sum(c)).collect())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, slot) in out.iter_mut().enumerate() {
            let terms: Vec<f64> = self.atoms().map(|(x, w)| w * x[k]).collect();
            *slot = pairwise_sum(&terms);
        }
        out
    }

    /// `mu(|.|^2)`.
    pub fn second_moment(&self) -> f64 {
        let terms: Vec<f64> = self
            .atoms()
            .map(|(x, w)| w * x.iter().map(|v| v * v).sum::<f64>())
            .collect();
        pairwise_sum(&terms)
    }

    /// `mu o (Id + phi)^{-1}`: every atom moves to `x + phi(x)`, weights stay.
    ///
    /// `phi` writes the displacement of its first argument into the second.
    pub fn pushforward(&self, phi: impl Fn(&[f64], &mut [f64])) -> Result<Self> {
        let mut points = self.points.clone();
        let mut disp = vec![0.0; self.dim];
        for (i, x) in points.chunks_exact_mut(self.dim).enumerate() {
            disp.iter_mut().for_each(|d| *d = 0.0);
            phi(x, &mut disp);
            for (xi, di) in x.iter_mut().zip(&disp) {
                *xi += di;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "displaced atom".into(),
                    index: i,
                });
            }
        }
        Ok(Self {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
            uniform: self.uniform,
        })
    }

    /// Same weights, new atom positions.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                context: "EmpiricalMeasure::with_points",
                expected: self.points.len(),
                found: points.len(),
            });
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "atom coordinate".into(),
                index: i / self.dim,
            });
        }
        Ok(Self {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
            uniform: self.uniform,
        })
    }

    /// Reorders atoms by `perm` (atom `i` of the result is atom `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        let mut weights = Vec::with_capacity(self.len());
        for &j in perm {
            points.extend_from_slice(self.point(j));
            weights.push(self.weights[j]);
        }
        Self {
            dim: self.dim,
            points,
            weights,
            uniform: self.uniform,
        }
    }

    /// `n` i.i.d. draws from this measure, returned as a uniform measure.
    pub fn resample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(contract("cannot resample zero atoms"));
        }
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let mut stream = NoiseStream::new(seed, StreamDomain::Initial, u64::MAX, 1);
        let mut points = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u = stream.uniform() * acc;
            let j = cumulative.partition_point(|c| *c <= u).min(self.len() - 1);
            points.extend_from_slice(self.point(j));
        }
        Self::uniform(self.dim, points)
    }

    /// `n` i.i.d. Gaussian atoms `mean + std * Z`, uniform weights.
    pub fn gaussian_sample(mean: &[f64], std: f64, n: usize, seed: u64) -> Result<Self> {
        let dim = mean.len();
        if n == 0 || dim == 0 {
            return Err(contract("gaussian sample needs n >= 1 and dim >= 1"));
        }
        let mut points = vec![0.0; n * dim];
        for (i, x) in points.chunks_exact_mut(dim).enumerate() {
            let mut stream = NoiseStream::new(seed, StreamDomain::Initial, i as u64, dim);
            stream.standard_normals(x);
            for (xi, m) in x.iter_mut().zip(mean) {
                *xi = m + std * *xi;
            }
        }
        Self::uniform(dim, points)
    }

    /// Writes `x_1..x_d,weight` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x_{k}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (x, wt) in self.atoms() {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(wt.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`EmpiricalMeasure::write_csv`]. Weights
    /// are renormalized when they sum to one only up to text rounding.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let ncols = header.len();
        if ncols < 2 || header.get(ncols - 1) != Some("weight") {
            return Err(Error::Data(
                "measure CSV needs columns x_1..x_d,weight".into(),
            ));
        }
        let dim = ncols - 1;
        let mut points = Vec::new();
        let mut masses = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for (col, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!("row {}: column {} is not a number", row + 1, col + 1))
                })?;
                if col < dim {
                    points.push(v);
                } else {
                    masses.push(v);
                }
            }
        }
        if masses.is_empty() {
            return Err(Error::Data("measure CSV has no atoms".into()));
        }
        let total = pairwise_sum(&masses);
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("weights sum to {total}, not 1")));
        }
        Self::from_masses(dim, points, &masses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrate_examples() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 2.0]).unwrap();
        assert_eq!(mu.integrate(|x| x[0]).unwrap(), 1.0);

        let dirac = EmpiricalMeasure::dirac(&[0.3, -1.2]).unwrap();
        let h = |x: &[f64]| x[0].sin() + x[1] * x[1];
        assert_eq!(dirac.integrate(h).unwrap(), h(&[0.3, -1.2]));

        let three = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
        let v = three.integrate(|x| x[0] * x[0]).unwrap();
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_reports_offending_atom() {
        let mu = EmpiricalMeasure::from_scalars(&[1.0, 0.0, 2.0]).unwrap();
        let err = mu.integrate(|x| 1.0 / x[0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn pushforward_examples() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        assert_eq!(mu.pushforward(|_, d| d[0] = 0.0).unwrap(), mu);

        let atom = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let moved = atom.pushforward(|_, d| d[0] = 1.5).unwrap();
        assert_eq!(moved.points(), &[1.5]);

        let doubled = mu.pushforward(|x, d| d[0] = x[0]).unwrap();
        assert_eq!(doubled.points(), &[0.0, 2.0]);
        assert_eq!(doubled.weights(), mu.weights());
    }

    #[test]
    fn rejects_bad_weights_and_points() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0, f64::NAN], vec![0.5, 0.5]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 1.0], vec![1.0]).is_ok());
    }

    #[test]
    fn second_moment_and_mean() {
        let mu = EmpiricalMeasure::new(2, vec![1.0, 0.0, 0.0, 2.0], vec![0.25, 0.75]).unwrap();
        assert!((mu.second_moment() - (0.25 + 3.0)).abs() < 1e-15);
        assert_eq!(mu.mean(), vec![0.25, 1.5]);
    }

    #[test]
    fn csv_round_trip() {
        let mu = EmpiricalMeasure::new(2, vec![1.0, -0.5, 3.25, 2.0], vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_1,x_2,weight\n"));
        let back = EmpiricalMeasure::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points(), mu.points());
        assert_eq!(back.weights(), mu.weights());
    }

    #[test]
    fn resample_draws_existing_atoms() {
        let mu = EmpiricalMeasure::new(1, vec![-1.0, 4.0], vec![0.1, 0.9]).unwrap();
        let r = mu.resample(1000, 3).unwrap();
        assert!(r.points().iter().all(|p| *p == -1.0 || *p == 4.0));
        let frac = r.points().iter().filter(|p| **p == 4.0).count() as f64 / 1000.0;
        assert!((frac - 0.9).abs() < 0.05);
    }
}
