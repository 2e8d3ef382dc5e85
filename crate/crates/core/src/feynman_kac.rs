//! Monte Carlo representations of parabolic equations on `R^d x P_2(R^d)`
//! and residual checks of those equations.
//!
//! With `X` the decoupled process started at `(t, x)` against the law flow
//! `P*_{t,.} mu`,
//!
//! ```text
//! linear:        V(t, x, mu) = E Phi(X_T, P*_{t,T} mu)
//! source:        V(t, x, mu) = -E int_t^T f(r, X_r, P*_{t,r} mu) dr
//! combined:      V = linear + source
//! log transform: V(t, x, mu) = -beta log E Phi(X_T, P*_{t,T} mu)
//! ```
//!
//! solve `(d_t + L) V = 0`, `= f`, `= f` and `= |sigma^T d_x V|^2 / (2 beta)`
//! respectively, with `V(T) = Phi` (zero for the source term). Each
//! evaluation samples one frozen particle flow of `N` particles and `M`
//! decoupled paths against it.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::calculus::CylindricalFunction;
use crate::dynamics::{simulate_mckean_vlasov, CoefficientField, DecoupledSampler, InitialLaw, TimeGrid};
use crate::error::{contract, Error, Result};
use crate::functionals::{BoundScalar, ScalarField, Verdict};
use crate::generator::{BoundGenerator, GeneratorKind, GeneratorValue};
use crate::measure::EmpiricalMeasure;
use crate::rng::{NoiseStream, StreamDomain};
use crate::stats::{mean, sample_variance, SampleSummary};

/// Fraction of probes that must pass for a residual table to pass.
pub const RESIDUAL_PASS_FRACTION: f64 = 0.95;
/// A probe passes when `|residual| <= RESIDUAL_BUDGET_FACTOR * budget`.
pub const RESIDUAL_BUDGET_FACTOR: f64 = 3.0;
/// Batches used to estimate the Monte Carlo error of a residual.
pub const RESIDUAL_BATCHES: usize = 20;
/// Random direction sets used for the measure trace term.
pub const MEASURE_DIRECTIONS: usize = 8;

const TIME_TOLERANCE: f64 = 1e-12;

/// Which representation a [`McSolution`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Linear,
    Source,
    Combined,
    LogTransform,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Linear => "linear",
            Representation::Source => "source",
            Representation::Combined => "combined",
            Representation::LogTransform => "log_transform",
        })
    }
}

/// Sample sizes, step and seed of a Monte Carlo evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    /// Decoupled paths `M`.
    pub paths: usize,
    /// Particles `N` of the frozen flow.
    pub particles: usize,
    pub dt: f64,
    pub seed: u64,
}

impl McSettings {
    pub fn new(paths: usize, particles: usize, dt: f64, seed: u64) -> Result<Self> {
        if paths == 0 {
            return Err(contract("need at least one path"));
        }
        if particles < 2 {
            return Err(contract(format!("need at least 2 particles, got {particles}")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(contract(format!("time step must be positive, got {dt}")));
        }
        Ok(Self {
            paths,
            particles,
            dt,
            seed,
        })
    }
}

/// A Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// `|value - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Linear part, source part and their sum, all computed on the same paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedEstimate {
    pub linear: McEstimate,
    pub source: McEstimate,
    pub combined: McEstimate,
}

/// Per-path samples for one start point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathValues {
    /// `Phi(X_T, P*_{t,T} mu)` per path, empty without terminal data.
    pub terminal: Vec<f64>,
    /// `-int f dr` per path (left-endpoint rule), empty without a source.
    pub source: Vec<f64>,
}

/// Mean and standard error, computed about the first sample so that
/// identical samples reproduce their common value exactly.
fn summary(values: &[f64]) -> SampleSummary {
    let Some(&pivot) = values.first() else {
        return SampleSummary::from_samples(values);
    };
    let shifted: Vec<f64> = values.iter().map(|v| v - pivot).collect();
    let s = SampleSummary::from_samples(&shifted);
    SampleSummary {
        mean: pivot + s.mean,
        ..s
    }
}

fn shifted_mean(values: &[f64]) -> f64 {
    summary(values).mean
}

/// A Monte Carlo solution `V(t, x, mu)` of one of the four representations.
#[derive(Debug, Clone)]
pub struct McSolution {
    coeff: Arc<dyn CoefficientField>,
    representation: Representation,
    terminal: Option<CylindricalFunction>,
    source: Option<Arc<dyn ScalarField>>,
    beta: Option<f64>,
    lower_bound: f64,
    horizon: f64,
    settings: McSettings,
}

impl McSolution {
    fn build(
        coeff: Arc<dyn CoefficientField>,
        representation: Representation,
        terminal: Option<CylindricalFunction>,
        source: Option<Arc<dyn ScalarField>>,
        horizon: f64,
        settings: McSettings,
    ) -> Result<Self> {
        if let Some(phi) = &terminal {
            if phi.dim() != coeff.state_dim() {
                return Err(Error::DimensionMismatch {
                    context: "terminal data",
                    expected: coeff.state_dim(),
                    found: phi.dim(),
                });
            }
        }
        if !horizon.is_finite() {
            return Err(contract(format!("horizon must be finite, got {horizon}")));
        }
        Ok(Self {
            coeff,
            representation,
            terminal,
            source,
            beta: None,
            lower_bound: 0.0,
            horizon,
            settings,
        })
    }

    /// `E Phi(X_T, P*_{t,T} mu)`.
    pub fn linear(
        coeff: Arc<dyn CoefficientField>,
        phi: CylindricalFunction,
        horizon: f64,
        settings: McSettings,
    ) -> Result<Self> {
        Self::build(coeff, Representation::Linear, Some(phi), None, horizon, settings)
    }

    /// `-E int_t^T f(r, X_r, P*_{t,r} mu) dr`.
    pub fn with_source(
        coeff: Arc<dyn CoefficientField>,
        f: Arc<dyn ScalarField>,
        horizon: f64,
        settings: McSettings,
    ) -> Result<Self> {
        Self::build(coeff, Representation::Source, None, Some(f), horizon, settings)
    }

    /// Linear plus source term on shared paths.
    pub fn combined(
        coeff: Arc<dyn CoefficientField>,
        phi: CylindricalFunction,
        f: Arc<dyn ScalarField>,
        horizon: f64,
        settings: McSettings,
    ) -> Result<Self> {
        Self::build(coeff, Representation::Combined, Some(phi), Some(f), horizon, settings)
    }

    /// `-beta log E Phi(X_T, P*_{t,T} mu)` for terminal data bounded below
    /// by `lower_bound >= 0`. With `lower_bound = 0` only strict positivity
    /// of every sample is required.
    pub fn log_transform(
        coeff: Arc<dyn CoefficientField>,
        phi: CylindricalFunction,
        lower_bound: f64,
        beta: f64,
        horizon: f64,
        settings: McSettings,
    ) -> Result<Self> {
        if beta == 0.0 || !beta.is_finite() {
            return Err(contract(format!("beta must be finite and non-zero, got {beta}")));
        }
        if !(lower_bound >= 0.0) || !lower_bound.is_finite() {
            return Err(contract(format!("lower bound must be finite and non-negative, got {lower_bound}")));
        }
        let mut s = Self::build(coeff, Representation::LogTransform, Some(phi), None, horizon, settings)?;
        s.beta = Some(beta);
        s.lower_bound = lower_bound;
        Ok(s)
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn terminal(&self) -> Option<&CylindricalFunction> {
        self.terminal.as_ref()
    }

    pub fn source(&self) -> Option<&Arc<dyn ScalarField>> {
        self.source.as_ref()
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn settings(&self) -> McSettings {
        self.settings
    }

    pub fn coefficients(&self) -> &Arc<dyn CoefficientField> {
        &self.coeff
    }

    /// The same solution with different sample sizes or seed.
    pub fn with_settings(&self, settings: McSettings) -> Self {
        Self {
            settings,
            ..self.clone()
        }
    }

    /// Whether `V` can depend on its measure argument.
    pub fn depends_on_measure(&self) -> bool {
        self.coeff.depends_on_measure()
            || self.terminal.as_ref().is_some_and(|p| p.depends_on_measure())
            || self.source.as_ref().is_some_and(|f| f.depends_on_measure())
    }

    fn at_horizon(&self, t: f64) -> bool {
        (self.horizon - t).abs() <= TIME_TOLERANCE * self.horizon.abs().max(1.0)
    }

    /// Per-path samples at `(t, x, mu)` for every start point `x`, all
    /// driven by the same frozen flow and the same path noise.
    pub fn sample_paths(&self, t: f64, starts: &[Vec<f64>], mu: &EmpiricalMeasure) -> Result<Vec<PathValues>> {
        let d = self.coeff.state_dim();
        if mu.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "measure argument",
                expected: d,
                found: mu.dim(),
            });
        }
        if let Some(x) = starts.iter().find(|x| x.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "start point",
                expected: d,
                found: x.len(),
            });
        }
        let m_paths = self.settings.paths;
        let values = if self.at_horizon(t) {
            self.terminal_values(starts, mu)?
        } else {
            if t > self.horizon {
                return Err(contract(format!("time {t} lies beyond the horizon {}", self.horizon)));
            }
            self.simulated_values(t, starts, mu)?
        };
        if self.representation == Representation::LogTransform {
            for pv in &values {
                if let Some(&v) = pv.terminal.iter().find(|&&v| !(v > 0.0 && v >= self.lower_bound)) {
                    return Err(Error::Data(format!(
                        "terminal sample {v:e} underflows the declared lower bound {:e}",
                        self.lower_bound
                    )));
                }
            }
        }
        debug_assert!(values
            .iter()
            .all(|pv| pv.terminal.len().max(pv.source.len()) == m_paths));
        Ok(values)
    }

    fn terminal_values(&self, starts: &[Vec<f64>], mu: &EmpiricalMeasure) -> Result<Vec<PathValues>> {
        let m_paths = self.settings.paths;
        let r = self.terminal.as_ref().map(|p| p.moments(mu)).transpose()?;
        starts
            .iter()
            .enumerate()
            .map(|(idx, x)| {
                let terminal = match (&self.terminal, &r) {
                    (Some(phi), Some(r)) => {
                        let v = phi.value_at(self.horizon, x, r);
                        if !v.is_finite() {
                            return Err(Error::NonFinite {
                                what: "terminal data".into(),
                                index: idx,
                            });
                        }
                        vec![v; m_paths]
                    }
                    _ => Vec::new(),
                };
                let source = if self.source.is_some() {
                    vec![0.0; m_paths]
                } else {
                    Vec::new()
                };
                Ok(PathValues { terminal, source })
            })
            .collect()
    }

    fn simulated_values(&self, t: f64, starts: &[Vec<f64>], mu: &EmpiricalMeasure) -> Result<Vec<PathValues>> {
        let McSettings {
            paths,
            particles,
            dt,
            seed,
        } = self.settings;
        let coeff = self.coeff.as_ref();
        let grid = TimeGrid::new(t, self.horizon, dt)?;
        let flow = simulate_mckean_vlasov(coeff, &InitialLaw::Measure(mu.clone()), particles, grid, seed)?;
        let sampler = DecoupledSampler::new(coeff, &flow, grid.start(), grid.end(), dt, seed)?;
        let phi = self
            .terminal
            .as_ref()
            .map(|p| p.moments(flow.terminal()).map(|r| (p, r)))
            .transpose()?;
        let bound: Option<Vec<BoundScalar<'_>>> = self
            .source
            .as_ref()
            .map(|f| {
                (0..grid.steps())
                    .map(|k| f.bind(grid.time(k), flow.snapshot(k)))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let horizon = self.horizon;
        let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|j| {
                let mut sums = vec![0.0; starts.len()];
                let mut failure = None;
                let ends = sampler.walk_many(j, starts, |k, idx, x, _| {
                    if let Some(fs) = &bound {
                        match fs[k](x) {
                            Ok(v) => sums[idx] += v,
                            Err(e) => {
                                failure.get_or_insert(e);
                            }
                        }
                    }
                })?;
                if let Some(e) = failure {
                    return Err(e);
                }
                let terminal = match &phi {
                    Some((p, r)) => ends.iter().map(|x| p.value_at(horizon, x, r)).collect(),
                    None => Vec::new(),
                };
                let source = if bound.is_some() {
                    sums.iter().map(|s| -dt * s).collect()
                } else {
                    Vec::new()
                };
                if let Some(pos) = terminal.iter().chain(&source).position(|v: &f64| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("path functional of path {j}"),
                        index: pos,
                    });
                }
                Ok((terminal, source))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![PathValues::default(); starts.len()];
        for (idx, pv) in out.iter_mut().enumerate() {
            if phi.is_some() {
                pv.terminal = per_path.iter().map(|(a, _)| a[idx]).collect();
            }
            if bound.is_some() {
                pv.source = per_path.iter().map(|(_, b)| b[idx]).collect();
            }
        }
        Ok(out)
    }

    fn combined_samples(values: &PathValues) -> Vec<f64> {
        values.terminal.iter().zip(&values.source).map(|(a, b)| a + b).collect()
    }

    /// The estimate of `V` from per-path samples.
    pub fn estimate(&self, values: &PathValues) -> McEstimate {
        let to_estimate = |s: SampleSummary| McEstimate {
            value: s.mean,
            std_error: s.std_error,
            samples: s.samples,
        };
        match self.representation {
            Representation::Linear => to_estimate(summary(&values.terminal)),
            Representation::Source => to_estimate(summary(&values.source)),
            Representation::Combined => to_estimate(summary(&Self::combined_samples(values))),
            Representation::LogTransform => {
                let beta = self.beta.expect("log transform carries beta");
                let s = summary(&values.terminal);
                McEstimate {
                    value: -beta * s.mean.ln(),
                    std_error: beta.abs() * s.std_error / s.mean,
                    samples: s.samples,
                }
            }
        }
    }

    /// `V` from the paths in `range` only.
    fn value_on(&self, values: &PathValues, range: Range<usize>) -> f64 {
        match self.representation {
            Representation::Linear => shifted_mean(&values.terminal[range]),
            Representation::Source => shifted_mean(&values.source[range]),
            Representation::Combined => {
                let c: Vec<f64> = values.terminal[range.clone()]
                    .iter()
                    .zip(&values.source[range])
                    .map(|(a, b)| a + b)
                    .collect();
                shifted_mean(&c)
            }
            Representation::LogTransform => {
                -self.beta.expect("log transform carries beta") * shifted_mean(&values.terminal[range]).ln()
            }
        }
    }

    /// `V(t, x, mu)`.
    pub fn evaluate(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<McEstimate> {
        Ok(self.evaluate_many(t, &[x.to_vec()], mu)?[0])
    }

    /// `V(t, x, mu)` at several `x`, sharing the flow and the path noise.
    pub fn evaluate_many(&self, t: f64, xs: &[Vec<f64>], mu: &EmpiricalMeasure) -> Result<Vec<McEstimate>> {
        Ok(self
            .sample_paths(t, xs, mu)?
            .iter()
            .map(|pv| self.estimate(pv))
            .collect())
    }

    /// Linear part, source part and their sum on the same paths.
    pub fn evaluate_parts(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<CombinedEstimate> {
        if self.representation != Representation::Combined {
            return Err(contract(format!(
                "parts are only defined for the combined representation, not {}",
                self.representation
            )));
        }
        let pv = self.sample_paths(t, &[x.to_vec()], mu)?.remove(0);
        let linear = self.with_representation(Representation::Linear).estimate(&pv);
        let source = self.with_representation(Representation::Source).estimate(&pv);
        Ok(CombinedEstimate {
            linear,
            source,
            combined: self.estimate(&pv),
        })
    }

    fn with_representation(&self, representation: Representation) -> Self {
        Self {
            representation,
            ..self.clone()
        }
    }
}

/// `V(t, x, mu) = E Phi(X_T, P*_{t,T} mu)` at one point.
pub fn solve_linear(
    coeff: Arc<dyn CoefficientField>,
    phi: CylindricalFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    horizon: f64,
    settings: McSettings,
) -> Result<McEstimate> {
    McSolution::linear(coeff, phi, horizon, settings)?.evaluate(t, x, mu)
}

/// `V_f(t, x, mu) = -E int_t^T f dr` at one point.
pub fn solve_with_source(
    coeff: Arc<dyn CoefficientField>,
    f: Arc<dyn ScalarField>,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    horizon: f64,
    settings: McSettings,
) -> Result<McEstimate> {
    McSolution::with_source(coeff, f, horizon, settings)?.evaluate(t, x, mu)
}

/// Linear and source representations on shared paths, with their sum.
#[allow(clippy::too_many_arguments)]
pub fn solve_combined(
    coeff: Arc<dyn CoefficientField>,
    phi: CylindricalFunction,
    f: Arc<dyn ScalarField>,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    horizon: f64,
    settings: McSettings,
) -> Result<CombinedEstimate> {
    McSolution::combined(coeff, phi, f, horizon, settings)?.evaluate_parts(t, x, mu)
}

/// `V(t, x, mu) = -beta log E Phi(X_T, P*_{t,T} mu)` at one point.
#[allow(clippy::too_many_arguments)]
pub fn solve_log_transform(
    coeff: Arc<dyn CoefficientField>,
    phi: CylindricalFunction,
    lower_bound: f64,
    beta: f64,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    horizon: f64,
    settings: McSettings,
) -> Result<McEstimate> {
    McSolution::log_transform(coeff, phi, lower_bound, beta, horizon, settings)?.evaluate(t, x, mu)
}

/// The equation a residual is measured against.
#[derive(Debug, Clone)]
pub enum PdeKind {
    /// `(d_t + L_{sigma,b}) V = 0`
    Linear,
    /// `(d_t + L_{sigma,b}) V = f`
    Source(Arc<dyn ScalarField>),
    /// `(d_t + L_{sigma,b}) V = |sigma^T d_x V|^2 / (2 beta)`
    Nonlinear { beta: f64 },
    /// `(d_t + L_sigma) V = 0`, the drift being `sigma sigma^T d_x V`.
    DriftCoupled,
}

impl PdeKind {
    pub fn label(&self) -> &'static str {
        match self {
            PdeKind::Linear => "linear",
            PdeKind::Source(_) => "source",
            PdeKind::Nonlinear { .. } => "nonlinear",
            PdeKind::DriftCoupled => "drift_coupled",
        }
    }

    fn generator_kind(&self) -> GeneratorKind {
        match self {
            PdeKind::DriftCoupled => GeneratorKind::DiffusionOnly,
            _ => GeneratorKind::DriftDiffusion,
        }
    }

    fn check(&self) -> Result<()> {
        if let PdeKind::Nonlinear { beta } = self {
            if *beta == 0.0 || !beta.is_finite() {
                return Err(contract(format!("beta must be finite and non-zero, got {beta}")));
            }
        }
        Ok(())
    }
}

/// A point `(t, x, mu)` at which a residual is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<f64>,
    pub mu: EmpiricalMeasure,
}

/// The function whose residual is measured.
#[derive(Debug, Clone, Copy)]
pub enum ResidualSubject<'a> {
    /// Exact derivatives from the closed-form calculus.
    Exact(&'a CylindricalFunction),
    /// Central finite differences with common random numbers.
    MonteCarlo(&'a McSolution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub pde: &'static str,
    pub probe_id: usize,
    pub t: f64,
    pub x: Vec<f64>,
    /// Left-hand side minus right-hand side.
    pub residual: f64,
    /// Finite-difference truncation estimate (rounding scale for exact rows).
    pub truncation: f64,
    /// Monte Carlo standard error of the residual; zero for exact rows.
    pub std_error: f64,
    /// `truncation + 3 std_error`.
    pub budget: f64,
    /// The budget vanished while the residual did not.
    pub structural: bool,
    pub verdict: Verdict,
}

impl ResidualRow {
    fn new(pde: &'static str, probe_id: usize, probe: &Probe, residual: f64, truncation: f64, std_error: f64) -> Self {
        let budget = truncation + 3.0 * std_error;
        let structural = budget == 0.0 && residual != 0.0;
        let passed = residual.is_finite() && residual.abs() <= RESIDUAL_BUDGET_FACTOR * budget;
        Self {
            pde,
            probe_id,
            t: probe.t,
            x: probe.x.clone(),
            residual,
            truncation,
            std_error,
            budget,
            structural,
            verdict: Verdict::from_bool(passed && !structural),
        }
    }

    fn verdict_label(&self) -> &'static str {
        if self.structural {
            "STRUCTURAL_FAIL"
        } else if self.verdict.passed() {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
    pub pass_fraction: f64,
    pub verdict: Verdict,
}

impl ResidualTable {
    fn from_rows(rows: Vec<ResidualRow>) -> Self {
        let passed = rows.iter().filter(|r| r.verdict.passed()).count();
        let pass_fraction = if rows.is_empty() {
            0.0
        } else {
            passed as f64 / rows.len() as f64
        };
        let structural = rows.iter().any(|r| r.structural);
        Self {
            verdict: Verdict::from_bool(!rows.is_empty() && !structural && pass_fraction >= RESIDUAL_PASS_FRACTION),
            pass_fraction,
            rows,
        }
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.rows.iter().fold(0.0_f64, |m, r| m.max(r.residual.abs()))
    }

    /// Columns `pde,t,x,probe_id,residual,budget,verdict`; coordinates of a
    /// multi-dimensional `x` are separated by `;`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pde", "t", "x", "probe_id", "residual", "budget", "verdict"])?;
        for r in &self.rows {
            let x = r.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                r.pde.to_string(),
                r.t.to_string(),
                x,
                r.probe_id.to_string(),
                r.residual.to_string(),
                r.budget.to_string(),
                r.verdict_label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Residual of `pde` for `subject` at every probe.
pub fn pde_residual(
    subject: ResidualSubject<'_>,
    coeff: &dyn CoefficientField,
    pde: &PdeKind,
    probes: &[Probe],
) -> Result<ResidualTable> {
    pde.check()?;
    let rows = probes
        .iter()
        .enumerate()
        .map(|(id, probe)| match subject {
            ResidualSubject::Exact(v) => exact_row(v, coeff, pde, id, probe),
            ResidualSubject::MonteCarlo(sol) => mc_row(sol, coeff, pde, id, probe),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualTable::from_rows(rows))
}

/// Right-hand side given `|sigma^T d_x V|^2`.
fn right_hand_side(pde: &PdeKind, t: f64, x: &[f64], mu: &EmpiricalMeasure, sigma_t_dx_sq: f64) -> Result<f64> {
    Ok(match pde {
        PdeKind::Linear | PdeKind::DriftCoupled => 0.0,
        PdeKind::Source(f) => f.eval(t, x, mu)?,
        PdeKind::Nonlinear { beta } => sigma_t_dx_sq / (2.0 * beta),
    })
}

fn exact_row(v: &CylindricalFunction, coeff: &dyn CoefficientField, pde: &PdeKind, id: usize, probe: &Probe) -> Result<ResidualRow> {
    let g = BoundGenerator::new(pde.generator_kind(), coeff, v, probe.t, &probe.mu)?;
    let (value, dt): (GeneratorValue, f64) = g.eval_with_dt(&probe.x)?;
    let sq = match pde {
        PdeKind::Nonlinear { .. } => g.martingale_coefficient(&probe.x)?.norm_squared(),
        _ => 0.0,
    };
    let rhs = right_hand_side(pde, probe.t, &probe.x, &probe.mu, sq)?;
    let p = value.parts;
    let scale = 1.0
        + dt.abs()
        + p.trace_x.abs()
        + p.drift_x.abs()
        + p.trace_mu.abs()
        + p.drift_mu.abs()
        + p.nonlinear_sq.abs()
        + rhs.abs();
    let residual = dt + value.total - rhs;
    Ok(ResidualRow::new(pde.label(), id, probe, residual, 64.0 * f64::EPSILON * scale, 0.0))
}

/// One group of evaluations sharing `(t, mu)`.
struct Group {
    t: f64,
    mu: EmpiricalMeasure,
    starts: Vec<Vec<f64>>,
}

/// Index of one evaluation: group and start point.
type Slot = (usize, usize);

/// The evaluations behind one finite-difference level.
struct Stencil {
    centre: Slot,
    t_plus: Slot,
    t_minus: Slot,
    /// `(x + h_k e_k, x - h_k e_k)` per coordinate.
    axis: Vec<(Slot, Slot)>,
    /// `(++, +-, -+, --)` per coordinate pair `k < l`.
    mixed: Vec<((usize, usize), [Slot; 4])>,
    /// `(mu pushed by +h b, mu pushed by -h b)`.
    drift_mu: Option<(Slot, Slot)>,
    /// `(mu pushed by +h sigma xi, by -h sigma xi)` per direction set.
    trace_mu: Vec<(Slot, Slot)>,
    h_t: f64,
    h_x: Vec<f64>,
    h_mu: f64,
}

struct StencilBuilder {
    groups: Vec<Group>,
}

impl StencilBuilder {
    fn push_group(&mut self, t: f64, mu: EmpiricalMeasure, x: Vec<f64>) -> Slot {
        self.groups.push(Group {
            t,
            mu,
            starts: vec![x],
        });
        (self.groups.len() - 1, 0)
    }

    fn push_start(&mut self, group: usize, x: Vec<f64>) -> Slot {
        self.groups[group].starts.push(x);
        (group, self.groups[group].starts.len() - 1)
    }
}

fn displaced(mu: &EmpiricalMeasure, shift: impl Fn(usize, &[f64], &mut [f64])) -> Result<EmpiricalMeasure> {
    let d = mu.dim();
    let mut points = mu.points().to_vec();
    let mut disp = vec![0.0; d];
    for (i, y) in points.chunks_mut(d).enumerate() {
        disp.iter_mut().for_each(|v| *v = 0.0);
        shift(i, y, &mut disp);
        for (a, b) in y.iter_mut().zip(&disp) {
            *a += b;
        }
    }
    mu.with_points(points)
}

/// Per-atom displacement fields used for the measure terms.
struct MeasureFields {
    drift: Vec<f64>,
    /// `sigma(y) xi_y` per direction set, `N x d` each.
    diffusion: Vec<Vec<f64>>,
}

fn measure_fields(
    sol: &McSolution,
    coeff: &dyn CoefficientField,
    pde: &PdeKind,
    probe: &Probe,
    probe_id: usize,
) -> Result<Option<MeasureFields>> {
    if !sol.depends_on_measure() {
        return Ok(None);
    }
    if matches!(pde, PdeKind::DriftCoupled) {
        return Err(Error::Unsupported(
            "measure terms of a drift-coupled residual need d_x V at every atom of a Monte Carlo solution".into(),
        ));
    }
    let (d, m) = (coeff.state_dim(), coeff.noise_dim());
    let mf = coeff.mean_field(probe.t, &probe.mu)?;
    let mut drift = vec![0.0; probe.mu.len() * d];
    for (i, (y, _)) in probe.mu.atoms().enumerate() {
        coeff.drift_into(probe.t, y, &mf, &mut drift[i * d..(i + 1) * d]);
    }
    let mut diffusion = Vec::with_capacity(MEASURE_DIRECTIONS);
    let mut xi = vec![0.0; m];
    let mut s = vec![0.0; d * m];
    for k in 0..MEASURE_DIRECTIONS {
        let stream_id = (probe_id * MEASURE_DIRECTIONS + k) as u64;
        let mut stream = NoiseStream::new(sol.settings().seed, StreamDomain::Directions, stream_id, m);
        let mut field = Vec::with_capacity(probe.mu.len() * d);
        for (y, _) in probe.mu.atoms() {
            stream.standard_normals(&mut xi);
            coeff.diffusion_into(probe.t, y, &mf, &mut s);
            for r in 0..d {
                field.push((0..m).map(|c| s[r * m + c] * xi[c]).sum());
            }
        }
        diffusion.push(field);
    }
    Ok(Some(MeasureFields { drift, diffusion }))
}

fn build_stencil(
    builder: &mut StencilBuilder,
    sol: &McSolution,
    probe: &Probe,
    fields: Option<&MeasureFields>,
    level: f64,
) -> Result<Stencil> {
    let d = probe.x.len();
    let h_t = level * 1e-2 * sol.horizon().abs().max(f64::MIN_POSITIVE);
    let h_x: Vec<f64> = probe.x.iter().map(|v| level * 1e-2 * (1.0 + v.abs())).collect();
    let h_mu = level * 1e-2;
    let x = probe.x.clone();
    let shift = |pairs: &[(usize, f64)]| {
        let mut y = x.clone();
        for &(k, s) in pairs {
            y[k] += s;
        }
        y
    };
    let centre = builder.push_group(probe.t, probe.mu.clone(), x.clone());
    let g = centre.0;
    let axis = (0..d)
        .map(|k| {
            (
                builder.push_start(g, shift(&[(k, h_x[k])])),
                builder.push_start(g, shift(&[(k, -h_x[k])])),
            )
        })
        .collect();
    let mut mixed = Vec::new();
    for k in 0..d {
        for l in k + 1..d {
            let slots = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .map(|(a, b)| builder.push_start(g, shift(&[(k, a * h_x[k]), (l, b * h_x[l])])));
            mixed.push(((k, l), slots));
        }
    }
    let t_plus = builder.push_group(probe.t + h_t, probe.mu.clone(), x.clone());
    let t_minus = builder.push_group(probe.t - h_t, probe.mu.clone(), x.clone());
    let mut drift_mu = None;
    let mut trace_mu = Vec::new();
    if let Some(fields) = fields {
        let push = |field: &[f64], s: f64| displaced(&probe.mu, |i, _, out| {
            for (o, v) in out.iter_mut().zip(&field[i * d..(i + 1) * d]) {
                *o = s * v;
            }
        });
        drift_mu = Some((
            builder.push_group(probe.t, push(&fields.drift, h_mu)?, x.clone()),
            builder.push_group(probe.t, push(&fields.drift, -h_mu)?, x.clone()),
        ));
        for field in &fields.diffusion {
            trace_mu.push((
                builder.push_group(probe.t, push(field, h_mu)?, x.clone()),
                builder.push_group(probe.t, push(field, -h_mu)?, x.clone()),
            ));
        }
    }
    Ok(Stencil {
        centre,
        t_plus,
        t_minus,
        axis,
        mixed,
        drift_mu,
        trace_mu,
        h_t,
        h_x,
        h_mu,
    })
}

/// Finite-difference derivatives of `V` from evaluations `v(slot)`.
struct FdJet {
    dt: f64,
    dx: DVector<f64>,
    dxx: DMatrix<f64>,
    drift_mu: f64,
    /// Trace-term estimate per direction set.
    trace_mu: Vec<f64>,
}

fn fd_jet(s: &Stencil, v: &dyn Fn(Slot) -> f64) -> FdJet {
    let d = s.h_x.len();
    let v0 = v(s.centre);
    let mut dx = DVector::zeros(d);
    let mut dxx = DMatrix::zeros(d, d);
    for (k, &(plus, minus)) in s.axis.iter().enumerate() {
        let h = s.h_x[k];
        let (vp, vm) = (v(plus), v(minus));
        dx[k] = (vp - vm) / (2.0 * h);
        dxx[(k, k)] = (vp - 2.0 * v0 + vm) / (h * h);
    }
    for &((k, l), slots) in &s.mixed {
        let [pp, pm, mp, mm] = slots.map(v);
        let c = (pp - pm - mp + mm) / (4.0 * s.h_x[k] * s.h_x[l]);
        dxx[(k, l)] = c;
        dxx[(l, k)] = c;
    }
    FdJet {
        dt: (v(s.t_plus) - v(s.t_minus)) / (2.0 * s.h_t),
        dx,
        dxx,
        drift_mu: s
            .drift_mu
            .map_or(0.0, |(p, m)| (v(p) - v(m)) / (2.0 * s.h_mu)),
        trace_mu: s
            .trace_mu
            .iter()
            .map(|&(p, m)| (v(p) + v(m) - 2.0 * v0) / (2.0 * s.h_mu * s.h_mu))
            .collect(),
    }
}

/// Pointwise data the residual needs besides the jet.
struct ProbeCoefficients {
    sigma: DMatrix<f64>,
    drift: DVector<f64>,
    source: f64,
}

fn residual_from_jet(jet: &FdJet, c: &ProbeCoefficients, pde: &PdeKind) -> f64 {
    let a = &c.sigma * c.sigma.transpose();
    let trace_x = 0.5 * (&a * &jet.dxx).trace();
    let trace_mu = if jet.trace_mu.is_empty() {
        0.0
    } else {
        mean(&jet.trace_mu)
    };
    let sq = (c.sigma.transpose() * &jet.dx).norm_squared();
    match pde {
        PdeKind::DriftCoupled => jet.dt + trace_x + 0.5 * sq + trace_mu,
        _ => {
            let lhs = jet.dt + trace_x + c.drift.dot(&jet.dx) + trace_mu + jet.drift_mu;
            let rhs = match pde {
                PdeKind::Source(_) => c.source,
                PdeKind::Nonlinear { beta } => sq / (2.0 * beta),
                _ => 0.0,
            };
            lhs - rhs
        }
    }
}

fn mc_row(sol: &McSolution, coeff: &dyn CoefficientField, pde: &PdeKind, id: usize, probe: &Probe) -> Result<ResidualRow> {
    let m_paths = sol.settings().paths;
    if m_paths < 2 * RESIDUAL_BATCHES {
        return Err(contract(format!(
            "a Monte Carlo residual needs at least {} paths, got {m_paths}",
            2 * RESIDUAL_BATCHES
        )));
    }
    if probe.t + 2.0 * 1e-2 * sol.horizon().abs() > sol.horizon() + TIME_TOLERANCE {
        return Err(contract(format!(
            "probe time {} leaves no room for the time difference before the horizon {}",
            probe.t,
            sol.horizon()
        )));
    }
    let fields = measure_fields(sol, coeff, pde, probe, id)?;
    let mut builder = StencilBuilder { groups: Vec::new() };
    let fine = build_stencil(&mut builder, sol, probe, fields.as_ref(), 1.0)?;
    let coarse = build_stencil(&mut builder, sol, probe, fields.as_ref(), 2.0)?;
    let samples = builder
        .groups
        .iter()
        .map(|g| sol.sample_paths(g.t, &g.starts, &g.mu))
        .collect::<Result<Vec<_>>>()?;

    let mf = coeff.mean_field(probe.t, &probe.mu)?;
    let (d, m) = (coeff.state_dim(), coeff.noise_dim());
    let mut sigma = vec![0.0; d * m];
    let mut drift = vec![0.0; d];
    coeff.diffusion_into(probe.t, &probe.x, &mf, &mut sigma);
    coeff.drift_into(probe.t, &probe.x, &mf, &mut drift);
    let pc = ProbeCoefficients {
        sigma: DMatrix::from_row_slice(d, m, &sigma),
        drift: DVector::from_vec(drift),
        source: right_hand_side(pde, probe.t, &probe.x, &probe.mu, 0.0)?,
    };
    let samples = &samples;
    let value_on = |range: Range<usize>| move |slot: Slot| sol.value_on(&samples[slot.0][slot.1], range.clone());

    let full = value_on(0..m_paths);
    let fine_jet = fd_jet(&fine, &full);
    let residual = residual_from_jet(&fine_jet, &pc, pde);
    let coarse_residual = residual_from_jet(&fd_jet(&coarse, &full), &pc, pde);
    let truncation = (coarse_residual - residual).abs() / 3.0;

    let batch = m_paths / RESIDUAL_BATCHES;
    let batch_residuals: Vec<f64> = (0..RESIDUAL_BATCHES)
        .map(|b| residual_from_jet(&fd_jet(&fine, &value_on(b * batch..(b + 1) * batch)), &pc, pde))
        .collect();
    let mut variance = sample_variance(&batch_residuals) / RESIDUAL_BATCHES as f64;
    if fine_jet.trace_mu.len() > 1 {
        // Spread over the random direction sets enters as extra noise.
        variance += sample_variance(&fine_jet.trace_mu) / fine_jet.trace_mu.len() as f64;
    }
    Ok(ResidualRow::new(pde.label(), id, probe, residual, truncation, variance.sqrt()))
}

/// Outcome of the drift-coupled fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    /// Iterates that could be computed.
    pub iterations: usize,
    pub converged: bool,
    /// Values of the last computed iterate at the probes.
    pub values: Vec<McEstimate>,
    pub reason: String,
}

/// Picard iteration for `V = -(1/2) log E Phi(X_T)` with `X` driven by the
/// drift `sigma sigma^T d_x V`.
///
/// The first iterate (zero drift) is a plain log-transform solution and is
/// evaluated at the probes. Every later iterate needs `d_x V` of the
/// previous one along every path, which no Monte Carlo construction here
/// provides, so the iteration stops after one step and reports that it has
/// not converged.
pub fn drift_coupled_fixed_point(
    diffusion_only: Arc<dyn CoefficientField>,
    phi: CylindricalFunction,
    lower_bound: f64,
    horizon: f64,
    settings: McSettings,
    probes: &[Probe],
) -> Result<FixedPointReport> {
    let first = McSolution::log_transform(diffusion_only, phi, lower_bound, 2.0, horizon, settings)?;
    let values = probes
        .iter()
        .map(|p| first.evaluate(p.t, &p.x, &p.mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointReport {
        iterations: 1,
        converged: false,
        values,
        reason: "the second iterate needs d_x V of the first along every decoupled path; \
                 no construction is available, so convergence is not established"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Inner, Outer};
    use crate::dynamics::Constant;
    use crate::functionals::{ConstantScalar, FnScalar};

    fn brownian() -> Arc<dyn CoefficientField> {
        Arc::new(Constant::brownian(1, 1.0, 0.0))
    }

    fn settings(paths: usize) -> McSettings {
        McSettings::new(paths, 50, 0.05, 7).unwrap()
    }

    fn mu() -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(&[-0.5, 0.0, 1.0]).unwrap()
    }

    fn square() -> CylindricalFunction {
        CylindricalFunction::from_parts(vec![], Outer::squared_norm(1, 0)).unwrap()
    }

    #[test]
    fn terminal_time_is_exact() {
        let sol = McSolution::linear(brownian(), square(), 1.0, settings(100)).unwrap();
        let e = sol.evaluate(1.0, &[0.3], &mu()).unwrap();
        assert_eq!(e.value, 0.3 * 0.3);
        assert_eq!(e.std_error, 0.0);
        let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
        let log = McSolution::log_transform(brownian(), phi, 0.0, 1.5, 1.0, settings(100)).unwrap();
        let e = log.evaluate(1.0, &[0.7], &mu()).unwrap();
        assert_eq!(e.value, -1.5 * (-0.25 * 0.49_f64).exp().ln());
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn constant_data_is_exact() {
        let c = CylindricalFunction::from_parts(vec![], Outer::constant(1, 0.1)).unwrap();
        let e = solve_linear(brownian(), c.clone(), 0.0, &[0.4], &mu(), 1.0, settings(64)).unwrap();
        assert_eq!((e.value, e.std_error), (0.1, 0.0));
        let one: Arc<dyn ScalarField> = Arc::new(ConstantScalar(1.0));
        let e = solve_with_source(brownian(), one.clone(), 0.0, &[0.4], &mu(), 1.0, settings(64)).unwrap();
        assert_eq!((e.value, e.std_error), (-1.0, 0.0));
        let zero: Arc<dyn ScalarField> = Arc::new(ConstantScalar(0.0));
        let e = solve_with_source(brownian(), zero, 0.0, &[0.4], &mu(), 1.0, settings(64)).unwrap();
        assert_eq!(e.value, 0.0);
        let e = solve_log_transform(brownian(), c, 0.0, 2.0, 0.5, &[0.4], &mu(), 1.0, settings(64)).unwrap();
        assert_eq!(e.value, -2.0 * 0.1_f64.ln());
    }

    #[test]
    fn heat_kernel_quadratic() {
        let sol = McSolution::linear(brownian(), square(), 1.0, settings(20_000)).unwrap();
        for x in [-1.0, 0.0, 1.0] {
            let e = sol.evaluate(0.0, &[x], &mu()).unwrap();
            assert!(e.within(x * x + 1.0, 3.0), "x={x}: {e:?}");
        }
    }

    #[test]
    fn source_linear_in_state() {
        let f: Arc<dyn ScalarField> = Arc::new(FnScalar(|_t, x: &[f64]| x[0]));
        let e = solve_with_source(brownian(), f, 0.25, &[0.8], &mu(), 1.0, settings(20_000)).unwrap();
        assert!(e.within(-0.8 * 0.75, 3.0), "{e:?}");
    }

    #[test]
    fn combined_is_additive_on_shared_paths() {
        let f: Arc<dyn ScalarField> = Arc::new(FnScalar(|t, x: &[f64]| x[0] * x[0] + t));
        let phi = CylindricalFunction::from_parts(vec![Inner::SquaredNorm { dim: 1 }], Outer::squared_norm_plus_mean(1))
            .unwrap();
        let c = solve_combined(brownian(), phi.clone(), f.clone(), 0.0, &[0.2], &mu(), 1.0, settings(500)).unwrap();
        assert!((c.combined.value - (c.linear.value + c.source.value)).abs() <= 1e-12);
        let lin = solve_linear(brownian(), phi.clone(), 0.0, &[0.2], &mu(), 1.0, settings(500)).unwrap();
        assert_eq!(lin.value, c.linear.value);
        let zero: Arc<dyn ScalarField> = Arc::new(ConstantScalar(0.0));
        let c0 = solve_combined(brownian(), phi, zero, 0.0, &[0.2], &mu(), 1.0, settings(500)).unwrap();
        assert_eq!(c0.combined.value, lin.value);
    }

    #[test]
    fn log_transform_matches_mean_of_phi() {
        let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
        let lin = McSolution::linear(brownian(), phi.clone(), 1.0, settings(2000)).unwrap();
        let log = McSolution::log_transform(brownian(), phi, 0.0, 1.0, 1.0, settings(2000)).unwrap();
        let a = lin.evaluate(0.0, &[0.5], &mu()).unwrap();
        let b = log.evaluate(0.0, &[0.5], &mu()).unwrap();
        assert!(((-b.value).exp() - a.value).abs() <= 1e-12 * a.value);
        assert!((b.std_error - a.std_error / a.value).abs() <= 1e-12);
    }

    #[test]
    fn underflow_is_a_data_error() {
        let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
        let log = McSolution::log_transform(brownian(), phi, 0.5, 1.0, 1.0, settings(200)).unwrap();
        assert!(matches!(log.evaluate(0.0, &[3.0], &mu()), Err(Error::Data(_))));
        assert!(McSolution::log_transform(brownian(), square(), 0.0, 0.0, 1.0, settings(10)).is_err());
    }

    #[test]
    fn exact_residuals() {
        let coeff = Constant::brownian(1, 1.0, 0.0);
        let v = CylindricalFunction::from_parts(vec![], Outer::heat_quadratic(1, 1.0, 1.0)).unwrap();
        let probes: Vec<Probe> = [(-1.0, 0.0), (0.3, 0.5), (2.0, 0.9)]
            .iter()
            .map(|&(x, t)| Probe {
                t,
                x: vec![x],
                mu: mu(),
            })
            .collect();
        let table = pde_residual(ResidualSubject::Exact(&v), &coeff, &PdeKind::Linear, &probes).unwrap();
        assert!(table.max_abs_residual() <= 1e-12);
        assert_eq!(table.verdict, Verdict::Pass);
        let c = CylindricalFunction::from_parts(vec![], Outer::constant(1, 3.0)).unwrap();
        let table =
            pde_residual(ResidualSubject::Exact(&c), &coeff, &PdeKind::Nonlinear { beta: 0.7 }, &probes).unwrap();
        assert_eq!(table.max_abs_residual(), 0.0);
        let wrong = pde_residual(ResidualSubject::Exact(&square()), &coeff, &PdeKind::Linear, &probes).unwrap();
        assert_eq!(wrong.verdict, Verdict::Fail);
    }

    #[test]
    fn residual_csv_columns() {
        let coeff = Constant::brownian(1, 1.0, 0.0);
        let v = CylindricalFunction::from_parts(vec![], Outer::heat_quadratic(1, 1.0, 1.0)).unwrap();
        let probe = Probe {
            t: 0.0,
            x: vec![1.0],
            mu: mu(),
        };
        let table = pde_residual(ResidualSubject::Exact(&v), &coeff, &PdeKind::Linear, &[probe]).unwrap();
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("pde,t,x,probe_id,residual,budget,verdict\nlinear,0,1,0,"));
        assert!(text.trim_end().ends_with("PASS"));
    }

    #[test]
    fn fixed_point_reports_non_convergence() {
        let phi = CylindricalFunction::from_parts(vec![], Outer::gaussian(1, 0.25)).unwrap();
        let probe = Probe {
            t: 0.0,
            x: vec![0.0],
            mu: mu(),
        };
        let r = drift_coupled_fixed_point(brownian(), phi, 0.0, 1.0, settings(200), &[probe]).unwrap();
        assert!(!r.converged);
        assert_eq!(r.values.len(), 1);
    }
}
