//! Additive functionals along simulated paths, the path-independence
//! verifier, and Girsanov weights.
//!
//! Along a trajectory with grid `t_k` and increments `dW_k`,
//!
//! ```text
//! A_{s,t} = sum_k f(t_k, X_k, mu_k) dt + sum_k <g(t_k, X_k, mu_k), dW_k>
//! ```
//!
//! with left endpoints throughout (Itô sums). The measure argument `mu_k`
//! always comes from a [`ParticleFlow`]: the flow the trajectory belongs to,
//! or the frozen flow a decoupled path was generated against.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::calculus::CylindricalFunction;
use crate::dynamics::{CoefficientField, ParticleFlow, ParticlePath, PathRecord, TimeGrid, Trajectory};
use crate::error::{contract, Error, Result};
use crate::generator::{BoundGenerator, GeneratorKind};
use crate::measure::EmpiricalMeasure;
use crate::stats::{pairwise_sum, rms, SampleSummary};

pub type BoundScalar<'a> = Box<dyn Fn(&[f64]) -> Result<f64> + Send + Sync + 'a>;
pub type BoundVector<'a> = Box<dyn Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// A field `f(t, x, mu)` with values in `R`.
///
/// Binding to `(t, mu)` lets implementations precompute everything that
/// depends only on the measure.
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>>;

    fn depends_on_measure(&self) -> bool {
        true
    }

    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<f64> {
        self.bind(t, mu)?(x)
    }
}

/// A field `g(t, x, mu)` with values in `R^m`.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundVector<'a>>;

    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<DVector<f64>> {
        self.bind(t, mu)?(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScalar(pub f64);

impl ScalarField for ConstantScalar {
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn bind<'a>(&'a self, _t: f64, _mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>> {
        let c = self.0;
        Ok(Box::new(move |_| Ok(c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantVector(pub Vec<f64>);

impl VectorField for ConstantVector {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn bind<'a>(&'a self, _t: f64, _mu: &EmpiricalMeasure) -> Result<BoundVector<'a>> {
        Ok(Box::new(move |_| Ok(DVector::from_column_slice(&self.0))))
    }
}

/// A measure-independent scalar field given by a closure `(t, x) -> R`.
pub struct FnScalar<F>(pub F);

impl<F> fmt::Debug for FnScalar<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnScalar")
    }
}

impl<F: Fn(f64, &[f64]) -> f64 + Send + Sync> ScalarField for FnScalar<F> {
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn bind<'a>(&'a self, t: f64, _mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>> {
        Ok(Box::new(move |x| Ok((self.0)(t, x))))
    }
}

/// A measure-independent vector field given by a closure `(t, x) -> R^m`.
pub struct FnVector<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> fmt::Debug for FnVector<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnVector({})", self.dim)
    }
}

impl<F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync> VectorField for FnVector<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn bind<'a>(&'a self, t: f64, _mu: &EmpiricalMeasure) -> Result<BoundVector<'a>> {
        Ok(Box::new(move |x| Ok(DVector::from_vec((self.f)(t, x)))))
    }
}

/// `V(t, x, mu)` itself.
#[derive(Debug, Clone)]
pub struct CylindricalField(pub CylindricalFunction);

impl ScalarField for CylindricalField {
    fn depends_on_measure(&self) -> bool {
        self.0.depends_on_measure()
    }
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>> {
        let r = self.0.moments(mu)?;
        Ok(Box::new(move |x| Ok(self.0.value_at(t, x, &r))))
    }
}

/// `(d_t + L_{sigma,b}) V`.
#[derive(Debug, Clone)]
pub struct ParabolicField {
    pub coeff: Arc<dyn CoefficientField>,
    pub v: CylindricalFunction,
}

impl ScalarField for ParabolicField {
    fn depends_on_measure(&self) -> bool {
        self.coeff.depends_on_measure() || self.v.depends_on_measure()
    }
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>> {
        let g = BoundGenerator::new(GeneratorKind::DriftDiffusion, self.coeff.as_ref(), &self.v, t, mu)?;
        Ok(Box::new(move |x| g.parabolic(x)))
    }
}

/// `sigma^T d_x V`.
#[derive(Debug, Clone)]
pub struct DiffusedGradient {
    pub coeff: Arc<dyn CoefficientField>,
    pub v: CylindricalFunction,
}

impl VectorField for DiffusedGradient {
    fn dim(&self) -> usize {
        self.coeff.noise_dim()
    }
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundVector<'a>> {
        let g = BoundGenerator::new(GeneratorKind::DriftDiffusion, self.coeff.as_ref(), &self.v, t, mu)?;
        Ok(Box::new(move |x| g.martingale_coefficient(x)))
    }
}

/// `g + c`.
#[derive(Debug, Clone)]
pub struct Shifted {
    pub base: Arc<dyn VectorField>,
    pub shift: Vec<f64>,
}

impl VectorField for Shifted {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundVector<'a>> {
        let g = self.base.bind(t, mu)?;
        Ok(Box::new(move |x| Ok(g(x)? + DVector::from_column_slice(&self.shift))))
    }
}

/// `|g|^2 / (2 beta)`.
#[derive(Debug, Clone)]
pub struct HalfSquaredNorm {
    pub g: Arc<dyn VectorField>,
    pub beta: f64,
}

impl ScalarField for HalfSquaredNorm {
    fn bind<'a>(&'a self, t: f64, mu: &EmpiricalMeasure) -> Result<BoundScalar<'a>> {
        let g = self.g.bind(t, mu)?;
        let c = 0.5 / self.beta;
        Ok(Box::new(move |x| Ok(c * g(x)?.norm_squared())))
    }
}

/// The pair `f := (d_t + L_{sigma,b}) V`, `g := sigma^T d_x V`.
pub fn build_pair_from_v(
    coeff: Arc<dyn CoefficientField>,
    v: CylindricalFunction,
) -> (ParabolicField, DiffusedGradient) {
    (
        ParabolicField {
            coeff: coeff.clone(),
            v: v.clone(),
        },
        DiffusedGradient { coeff, v },
    )
}

/// Grid indices of `[s, t]` on a trajectory grid and the flow step matching
/// the trajectory's first grid point.
fn alignment(grid: TimeGrid, flow: &ParticleFlow, s: f64, t: f64) -> Result<(usize, usize, usize)> {
    if (grid.dt() - flow.grid().dt()).abs() > 1e-12 * grid.dt().max(1.0) {
        return Err(contract("trajectory and flow use different time steps"));
    }
    let offset = flow.grid().index_of(grid.start())?;
    let ks = grid.index_of(s)?;
    let kt = grid.index_of(t)?;
    if kt < ks {
        return Err(contract(format!("interval end {t} precedes start {s}")));
    }
    Ok((ks, kt, offset))
}

/// `A^{f,g}_{s,t}` along one trajectory.
pub fn accumulate(
    f: &dyn ScalarField,
    g: &dyn VectorField,
    path: &dyn Trajectory,
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<f64> {
    let grid = path.grid();
    let (ks, kt, offset) = alignment(grid, flow, s, t)?;
    let mut acc = 0.0;
    for k in ks..kt {
        let tk = grid.time(k);
        let mu = flow.snapshot(offset + k);
        acc += increment(&f.bind(tk, mu)?, &g.bind(tk, mu)?, path, k, grid.dt())?;
    }
    Ok(acc)
}

fn increment(
    f: &BoundScalar<'_>,
    g: &BoundVector<'_>,
    path: &(impl Trajectory + ?Sized),
    k: usize,
    dt: f64,
) -> Result<f64> {
    let x = path.state(k);
    let gv = g(x)?;
    let dw = path.increment(k);
    if gv.len() != dw.len() {
        return Err(Error::DimensionMismatch {
            context: "integrand g against the noise",
            expected: dw.len(),
            found: gv.len(),
        });
    }
    let ito: f64 = gv.iter().zip(dw).map(|(a, b)| a * b).sum();
    Ok(f(x)? * dt + ito)
}

/// `A^{f,g}_{s,t}` along every trajectory of a batch sharing one grid; the
/// result for each path equals [`accumulate`] on that path.
pub fn accumulate_many<T: Trajectory + Sync>(
    f: &dyn ScalarField,
    g: &dyn VectorField,
    paths: &[T],
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let Some(first) = paths.first() else {
        return Ok(Vec::new());
    };
    let grid = first.grid();
    if paths.iter().any(|p| p.grid() != grid) {
        return Err(contract("trajectories in a batch must share a grid"));
    }
    let (ks, kt, offset) = alignment(grid, flow, s, t)?;
    let mut acc = vec![0.0; paths.len()];
    for k in ks..kt {
        let tk = grid.time(k);
        let mu = flow.snapshot(offset + k);
        let (bf, bg) = (f.bind(tk, mu)?, g.bind(tk, mu)?);
        acc.par_iter_mut()
            .zip(paths.par_iter())
            .try_for_each(|(a, p)| -> Result<()> {
                *a += increment(&bf, &bg, p, k, grid.dt())?;
                Ok(())
            })?;
    }
    Ok(acc)
}

/// `A^{f,g}_{s,t}` for every particle of `flow`, reading the flow's own
/// empirical measures.
pub fn accumulate_flow(
    f: &dyn ScalarField,
    g: &dyn VectorField,
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let paths = (0..flow.particles())
        .map(|i| ParticlePath::new(flow, i))
        .collect::<Result<Vec<_>>>()?;
    accumulate_many(f, g, &paths, flow, s, t)
}

/// Stores `A^{f,g}_{s,t}` in each record's accumulator.
pub fn accumulate_records(
    f: &dyn ScalarField,
    g: &dyn VectorField,
    records: &mut [PathRecord],
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<()> {
    let values = accumulate_many(f, g, records, flow, s, t)?;
    for (r, a) in records.iter_mut().zip(values) {
        r.accumulator = a;
    }
    Ok(())
}

/// Smallest decay order accepted as convergence: an RMS reduction by 1.5
/// per fourfold refinement of `dt`.
pub fn min_decay_order() -> f64 {
    1.5f64.ln() / 4f64.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

/// Defect statistics at one refinement level.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectRow {
    pub dt: f64,
    /// Particles in the flow.
    pub n: usize,
    /// Paths whose defect was measured.
    pub m: usize,
    pub rms_defect: f64,
    pub max_defect: f64,
    /// RMS of `|V(t) - V(s)|` over the paths.
    pub scale: f64,
    /// `5 (sqrt(dt) + N^{-1/2}) scale`
    pub threshold: f64,
    /// `log(rms_prev / rms) / log(dt_prev / dt)` against the previous level.
    pub decay_order: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathIndependenceReport {
    pub rows: Vec<DefectRow>,
    pub verdict: Verdict,
}

impl PathIndependenceReport {
    /// `rms(level i) / rms(level i + 1)` for consecutive levels.
    pub fn rms_ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| w[0].rms_defect / w[1].rms_defect)
            .collect()
    }

    /// CSV with columns `dt,N,M,rms_defect,max_defect,decay_order,verdict`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dt", "N", "M", "rms_defect", "max_defect", "decay_order", "verdict"])?;
        for r in &self.rows {
            w.write_record([
                r.dt.to_string(),
                r.n.to_string(),
                r.m.to_string(),
                r.rms_defect.to_string(),
                r.max_defect.to_string(),
                r.decay_order.map(|o| o.to_string()).unwrap_or_default(),
                r.verdict.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-particle defects `|A^{f,g}_{s,t} - (V(t, X_t, mu_t) - V(s, X_s, mu_s))|`
/// and the increments of `V`.
pub fn path_defects(
    v: &CylindricalFunction,
    f: &dyn ScalarField,
    g: &dyn VectorField,
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = accumulate_flow(f, g, flow, s, t)?;
    let grid = flow.grid();
    let (ks, kt) = (grid.index_of(s)?, grid.index_of(t)?);
    let (rs, rt) = (v.moments(flow.snapshot(ks))?, v.moments(flow.snapshot(kt))?);
    let dv: Vec<f64> = (0..flow.particles())
        .map(|i| v.value_at(t, flow.state(kt, i), &rt) - v.value_at(s, flow.state(ks, i), &rs))
        .collect();
    let defects = a.iter().zip(&dv).map(|(a, d)| (a - d).abs()).collect();
    Ok((defects, dv))
}

/// Runs the defect measurement on each flow of a refinement ladder (coarse to
/// fine). PASS iff at every level the RMS defect is within
/// `5 (sqrt(dt) + N^{-1/2}) scale(V)` and between consecutive levels the
/// defect either vanishes to rounding or decays with order at least
/// [`min_decay_order`].
pub fn verify_path_independence(
    v: &CylindricalFunction,
    f: &dyn ScalarField,
    g: &dyn VectorField,
    flows: &[ParticleFlow],
    s: f64,
    t: f64,
) -> Result<PathIndependenceReport> {
    let mut rows: Vec<DefectRow> = Vec::with_capacity(flows.len());
    for flow in flows {
        let (defects, dv) = path_defects(v, f, g, flow, s, t)?;
        let n = flow.particles();
        let dt = flow.grid().dt();
        let scale = rms(&dv);
        let rms_defect = rms(&defects);
        let threshold = 5.0 * (dt.sqrt() + 1.0 / (n as f64).sqrt()) * scale;
        let negligible = |r: f64, sc: f64| r <= 1e-12 * sc.max(1.0);
        let decay_order = rows.last().map(|prev| {
            if negligible(prev.rms_defect, prev.scale) && negligible(rms_defect, scale) {
                f64::INFINITY
            } else {
                (prev.rms_defect / rms_defect).ln() / (prev.dt / dt).ln()
            }
        });
        let decays = decay_order.is_none_or(|o| o >= min_decay_order());
        rows.push(DefectRow {
            dt,
            n,
            m: defects.len(),
            rms_defect,
            max_defect: defects.iter().fold(0.0, |m: f64, d| m.max(*d)),
            scale,
            threshold,
            decay_order,
            verdict: Verdict::from_bool(rms_defect <= threshold && decays),
        });
    }
    let verdict = Verdict::from_bool(!rows.is_empty() && rows.iter().all(|r| r.verdict.passed()));
    Ok(PathIndependenceReport { rows, verdict })
}

/// `A^{g;beta}_{s,t} = (1/2beta) sum |g|^2 dt + sum <g, dW>`.
pub fn girsanov_exponent(
    g: Arc<dyn VectorField>,
    path: &dyn Trajectory,
    flow: &ParticleFlow,
    beta: f64,
    s: f64,
    t: f64,
) -> Result<f64> {
    if beta == 0.0 {
        return Err(contract("beta must be nonzero"));
    }
    let f = HalfSquaredNorm { g: g.clone(), beta };
    accumulate(&f, g.as_ref(), path, flow, s, t)
}

/// The density `exp(-A^{g;beta}_{s,t})`.
pub fn girsanov_weight(
    g: Arc<dyn VectorField>,
    path: &dyn Trajectory,
    flow: &ParticleFlow,
    beta: f64,
    s: f64,
    t: f64,
) -> Result<f64> {
    Ok((-girsanov_exponent(g, path, flow, beta, s, t)?).exp())
}

/// Sets `accumulator = A^{g;beta}_{s,t}` and `log_weight = -A` on each record.
pub fn girsanov_records(
    g: Arc<dyn VectorField>,
    records: &mut [PathRecord],
    flow: &ParticleFlow,
    beta: f64,
    s: f64,
    t: f64,
) -> Result<()> {
    if beta == 0.0 {
        return Err(contract("beta must be nonzero"));
    }
    let f = HalfSquaredNorm { g: g.clone(), beta };
    accumulate_records(&f, g.as_ref(), records, flow, s, t)?;
    for r in records.iter_mut() {
        r.log_weight = -r.accumulator;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailFlag {
    Clear,
    /// The top 1% of samples carries more than half of the sum.
    Heavy,
    /// Some sample or the sum overflowed.
    Severe,
}

impl fmt::Display for TailFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailFlag::Clear => "clear",
            TailFlag::Heavy => "heavy",
            TailFlag::Severe => "severe",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NovikovEstimate {
    pub estimate: SampleSummary,
    pub tail_flag: TailFlag,
}

/// Classifies positive samples by how much of their sum the largest 1% holds.
pub fn tail_flag(samples: &[f64]) -> TailFlag {
    if samples.iter().any(|v| !v.is_finite()) {
        return TailFlag::Severe;
    }
    let total = pairwise_sum(samples);
    if !total.is_finite() {
        return TailFlag::Severe;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = samples.len().div_ceil(100);
    if pairwise_sum(&sorted[..top]) > 0.5 * total {
        TailFlag::Heavy
    } else {
        TailFlag::Clear
    }
}

/// Monte Carlo estimate of `E exp(1/2 int_s^t |g|^2 dr)` over the given paths.
pub fn novikov_estimate<T: Trajectory + Sync>(
    g: Arc<dyn VectorField>,
    paths: &[T],
    flow: &ParticleFlow,
    s: f64,
    t: f64,
) -> Result<NovikovEstimate> {
    let f = HalfSquaredNorm { g, beta: 1.0 };
    let zero = ConstantVector(vec![0.0; flow.noise_dim()]);
    let exponents = accumulate_many(&f, &zero, paths, flow, s, t)?;
    let samples: Vec<f64> = exponents.iter().map(|a| a.exp()).collect();
    let flag = tail_flag(&samples);
    let estimate = SampleSummary::from_samples(&samples);
    let estimate = if flag == TailFlag::Severe || !estimate.mean.is_finite() {
        SampleSummary {
            mean: f64::INFINITY,
            std_error: f64::INFINITY,
            samples: samples.len(),
        }
    } else {
        estimate
    };
    Ok(NovikovEstimate {
        estimate,
        tail_flag: if estimate.mean.is_finite() { flag } else { TailFlag::Severe },
    })
}

/// Self-normalization check: the mean of `exp(log_weight)` over records.
pub fn weight_mass(records: &[PathRecord]) -> SampleSummary {
    let w: Vec<f64> = records.iter().map(|r| r.log_weight.exp()).collect();
    SampleSummary::from_samples(&w)
}

/// `sum_j w_j h_j / M` with its standard error.
pub fn reweighted(records: &[PathRecord], h: impl Fn(&PathRecord) -> f64) -> SampleSummary {
    let v: Vec<f64> = records.iter().map(|r| r.log_weight.exp() * h(r)).collect();
    SampleSummary::from_samples(&v)
}
