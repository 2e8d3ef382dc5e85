//! The interacting particle approximation of the McKean-Vlasov SDE.

use std::io::Write;

use rayon::prelude::*;

use super::coefficients::CoefficientField;
use crate::error::{contract, Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{NoiseStream, StreamDomain};

/// States beyond this magnitude abort a simulation.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;

const GRID_TOLERANCE: f64 = 1e-9;

/// A uniform grid `t_k = start + k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    start: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// Fails unless `dt` divides `end - start`.
    pub fn new(start: f64, end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(contract(format!("time step must be positive, got {dt}")));
        }
        if !(end >= start) {
            return Err(contract(format!("horizon end {end} precedes start {start}")));
        }
        let span = end - start;
        let steps = (span / dt).round();
        if (steps * dt - span).abs() > GRID_TOLERANCE * span.max(1.0) {
            return Err(contract(format!("time step {dt} does not divide the horizon {span}")));
        }
        Ok(Self {
            start,
            dt,
            steps: steps as usize,
        })
    }

    pub fn with_steps(start: f64, dt: f64, steps: usize) -> Self {
        Self { start, dt, steps }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    /// The grid index of `t`, which must lie on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = ((t - self.start) / self.dt).round();
        if k < 0.0 || k > self.steps as f64 || (self.time(k as usize) - t).abs() > GRID_TOLERANCE * t.abs().max(1.0) {
            return Err(contract(format!(
                "time {t} is not on the grid [{}, {}] with step {}",
                self.start,
                self.end(),
                self.dt
            )));
        }
        Ok(k as usize)
    }
}

/// How the initial particle cloud is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Use the atoms directly when the count matches and weights are uniform,
    /// otherwise resample.
    Measure(EmpiricalMeasure),
    Gaussian { mean: Vec<f64>, std: f64 },
    Dirac(Vec<f64>),
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Measure(mu) => mu.dim(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Dirac(x) => x.len(),
        }
    }

    pub fn particles(&self, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
        match self {
            InitialLaw::Measure(mu) if mu.len() == n && mu.is_uniform() => Ok(mu.clone()),
            InitialLaw::Measure(mu) => mu.resample(n, seed),
            InitialLaw::Gaussian { mean, std } => EmpiricalMeasure::gaussian_sample(mean, *std, n, seed),
            InitialLaw::Dirac(x) => {
                let points = x.iter().copied().cycle().take(n * x.len()).collect();
                EmpiricalMeasure::uniform(x.len(), points)
            }
        }
    }
}

/// Snapshots of `N` interacting particles on a uniform grid, with the
/// Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFlow {
    grid: TimeGrid,
    seed: u64,
    d: usize,
    m: usize,
    snapshots: Vec<EmpiricalMeasure>,
    /// `increments[k]` holds `N x m` values for the step `t_k -> t_{k+1}`.
    increments: Vec<Vec<f64>>,
}

impl ParticleFlow {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> usize {
        self.snapshots[0].len()
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    pub fn snapshot(&self, k: usize) -> &EmpiricalMeasure {
        &self.snapshots[k]
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.snapshots.last().expect("a flow has at least one snapshot")
    }

    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        self.snapshots[k].point(i)
    }

    pub fn increment(&self, k: usize, i: usize) -> &[f64] {
        &self.increments[k][i * self.m..(i + 1) * self.m]
    }

    /// CSV with columns `step,time,particle,x_1..x_d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "time".into(), "particle".into()];
        header.extend((1..=self.d).map(|k| format!("x_{k}")));
        w.write_record(&header)?;
        for (k, snap) in self.snapshots.iter().enumerate() {
            let t = self.time(k).to_string();
            for i in 0..snap.len() {
                let mut row = vec![k.to_string(), t.clone(), i.to_string()];
                row.extend(snap.point(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Euler-Maruyama for the `N`-particle system
///
/// ```text
/// X^i_{k+1} = X^i_k + b(t_k, X^i_k, mu_k) dt + sigma(t_k, X^i_k, mu_k) dW^i_k
/// ```
///
/// where `mu_k` is the empirical measure of all particles at step `k`. Each
/// particle owns a counter-based noise stream, so the result does not depend
/// on how particles are distributed over threads.
pub fn simulate_mckean_vlasov(
    coeff: &dyn CoefficientField,
    init: &InitialLaw,
    n: usize,
    grid: TimeGrid,
    seed: u64,
) -> Result<ParticleFlow> {
    if n < 2 {
        return Err(contract(format!("need at least 2 particles, got {n}")));
    }
    let d = coeff.state_dim();
    if coeff.noise_dim() == 0 {
        return Err(contract("noise dimension must be at least 1"));
    }
    if init.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "initial law",
            expected: d,
            found: init.dim(),
        });
    }
    let start = init.particles(n, seed)?;
    run_particles(coeff, start, grid, seed)
}

fn run_particles(
    coeff: &dyn CoefficientField,
    start: EmpiricalMeasure,
    grid: TimeGrid,
    seed: u64,
) -> Result<ParticleFlow> {
    let (d, m) = (coeff.state_dim(), coeff.noise_dim());
    let n = start.len();
    let mut streams: Vec<NoiseStream> = (0..n)
        .map(|i| NoiseStream::new(seed, StreamDomain::Particles, i as u64, m))
        .collect();
    let mut snapshots = Vec::with_capacity(grid.steps + 1);
    let mut increments = Vec::with_capacity(grid.steps);
    snapshots.push(start);
    for k in 0..grid.steps {
        let t = grid.time(k);
        let current = &snapshots[k];
        let mf = coeff.mean_field(t, current)?;
        let mut next = current.points().to_vec();
        let mut dw = vec![0.0; n * m];
        let dt = grid.dt;
        next.par_chunks_mut(d)
            .zip(dw.par_chunks_mut(m))
            .zip(streams.par_iter_mut())
            .for_each_init(
                || (vec![0.0; d], vec![0.0; d * m]),
                |(b, sigma), ((x, w), stream)| {
                    stream.increment(dt, &mut w[..m]);
                    coeff.drift_into(t, x, &mf, b);
                    coeff.diffusion_into(t, x, &mf, sigma);
                    for r in 0..d {
                        let row = &sigma[r * m..(r + 1) * m];
                        let noise: f64 = row.iter().zip(w.iter()).map(|(s, z)| s * z).sum();
                        x[r] += b[r] * dt + noise;
                    }
                },
            );
        if let Some(i) = next
            .chunks(d)
            .position(|x| x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD))
        {
            return Err(Error::BlowUp {
                step: k + 1,
                time: grid.time(k + 1),
                particle: i,
            });
        }
        increments.push(dw);
        snapshots.push(EmpiricalMeasure::uniform(d, next)?);
    }
    Ok(ParticleFlow {
        grid,
        seed,
        d,
        m,
        snapshots,
        increments,
    })
}

/// `P*_{s,t} mu`: the terminal empirical measure of the particle system
/// started from `mu` at time `s`.
pub fn semigroup_apply(
    coeff: &dyn CoefficientField,
    mu: &EmpiricalMeasure,
    s: f64,
    t: f64,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    if t == s {
        return Ok(mu.clone());
    }
    let grid = TimeGrid::new(s, t, dt)?;
    let flow = simulate_mckean_vlasov(coeff, &InitialLaw::Measure(mu.clone()), n, grid, seed)?;
    Ok(flow.terminal().clone())
}
