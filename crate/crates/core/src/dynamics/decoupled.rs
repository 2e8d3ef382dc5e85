//! Paths started at a fixed point whose measure argument follows a frozen
//! law flow rather than their own ensemble.

use rayon::prelude::*;

use super::coefficients::{CoefficientField, MeanField};
use super::particles::{ParticleFlow, TimeGrid, BLOW_UP_THRESHOLD};
use crate::error::{contract, Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{NoiseStream, StreamDomain};

/// A discrete trajectory with the Brownian increments that drove it.
pub trait Trajectory {
    fn grid(&self) -> TimeGrid;
    fn state(&self, k: usize) -> &[f64];
    fn increment(&self, k: usize) -> &[f64];
}

/// Particle `i` of a flow viewed as a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct ParticlePath<'a> {
    flow: &'a ParticleFlow,
    index: usize,
}

impl<'a> ParticlePath<'a> {
    pub fn new(flow: &'a ParticleFlow, index: usize) -> Result<Self> {
        if index >= flow.particles() {
            return Err(contract(format!(
                "particle index {index} out of range for {} particles",
                flow.particles()
            )));
        }
        Ok(Self { flow, index })
    }
}

impl Trajectory for ParticlePath<'_> {
    fn grid(&self) -> TimeGrid {
        *self.flow.grid()
    }
    fn state(&self, k: usize) -> &[f64] {
        self.flow.state(k, self.index)
    }
    fn increment(&self, k: usize) -> &[f64] {
        self.flow.increment(k, self.index)
    }
}

/// One decoupled path with its additive-functional bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub index: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    d: usize,
    m: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    /// Running value of the additive functional; zero until accumulated.
    pub accumulator: f64,
    /// Running Girsanov log-weight; zero until accumulated.
    pub log_weight: f64,
}

impl PathRecord {
    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.steps())
    }
}

impl Trajectory for PathRecord {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d..(k + 1) * self.d]
    }
    fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.m..(k + 1) * self.m]
    }
}

/// Generates decoupled paths on `[s, T]` against a frozen flow.
///
/// The mean-field statistics of every frozen snapshot are computed once, so
/// each path costs `O(steps)` coefficient evaluations. Path `j` draws its
/// noise from its own stream, separate from the streams that built the flow,
/// and step `k` of path `j` always sees the same increment whatever the start
/// point or start time: estimates at nearby arguments share their noise.
#[derive(Debug)]
pub struct DecoupledSampler<'a> {
    coeff: &'a dyn CoefficientField,
    flow: &'a ParticleFlow,
    grid: TimeGrid,
    offset: usize,
    mean_fields: Vec<MeanField>,
    seed: u64,
}

impl<'a> DecoupledSampler<'a> {
    pub fn new(
        coeff: &'a dyn CoefficientField,
        flow: &'a ParticleFlow,
        s: f64,
        end: f64,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        if flow.state_dim() != coeff.state_dim() || flow.noise_dim() != coeff.noise_dim() {
            return Err(contract("frozen flow dimensions differ from the coefficient field"));
        }
        let fg = flow.grid();
        if (fg.dt() - dt).abs() > 1e-12 * dt.max(1.0) {
            return Err(contract(format!(
                "decoupled step {dt} differs from the frozen flow step {}",
                fg.dt()
            )));
        }
        let offset = fg.index_of(s)?;
        let last = fg.index_of(end)?;
        if last < offset {
            return Err(contract(format!("horizon end {end} precedes start {s}")));
        }
        let grid = TimeGrid::with_steps(fg.time(offset), fg.dt(), last - offset);
        let mean_fields = (0..grid.steps())
            .map(|k| coeff.mean_field(grid.time(k), flow.snapshot(offset + k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            coeff,
            flow,
            grid,
            offset,
            mean_fields,
            seed,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// The frozen measure at local step `k`.
    pub fn measure(&self, k: usize) -> &EmpiricalMeasure {
        self.flow.snapshot(self.offset + k)
    }

    pub fn coefficients(&self) -> &dyn CoefficientField {
        self.coeff
    }

    fn check_start(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.coeff.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "decoupled start point",
                expected: self.coeff.state_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Runs path `j` from `x`, calling `visit(k, x_k, dW_k)` before each
    /// step, and returns the terminal state.
    pub fn walk(&self, j: usize, x: &[f64], mut visit: impl FnMut(usize, &[f64], &[f64])) -> Result<Vec<f64>> {
        let starts = [x.to_vec()];
        let mut out = self.walk_many(j, &starts, |k, _, x, dw| visit(k, x, dw))?;
        Ok(out.pop().expect("one start point"))
    }

    /// Runs path `j` from every start point on the same noise, calling
    /// `visit(k, start_index, x_k, dW_k)` before each step.
    pub fn walk_many(
        &self,
        j: usize,
        starts: &[Vec<f64>],
        mut visit: impl FnMut(usize, usize, &[f64], &[f64]),
    ) -> Result<Vec<Vec<f64>>> {
        for x in starts {
            self.check_start(x)?;
        }
        let (d, m) = (self.coeff.state_dim(), self.coeff.noise_dim());
        let mut stream = NoiseStream::new(self.seed, StreamDomain::Decoupled, j as u64, m);
        let mut xs: Vec<Vec<f64>> = starts.to_vec();
        let mut b = vec![0.0; d];
        let mut sigma = vec![0.0; d * m];
        let mut dw = vec![0.0; m];
        let dt = self.grid.dt();
        for k in 0..self.grid.steps() {
            let t = self.grid.time(k);
            stream.increment(dt, &mut dw);
            let mf = &self.mean_fields[k];
            for (idx, x) in xs.iter_mut().enumerate() {
                visit(k, idx, x, &dw);
                self.coeff.drift_into(t, x, mf, &mut b);
                self.coeff.diffusion_into(t, x, mf, &mut sigma);
                for r in 0..d {
                    let noise: f64 = sigma[r * m..(r + 1) * m].iter().zip(&dw).map(|(s, z)| s * z).sum();
                    x[r] += b[r] * dt + noise;
                }
                if x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD) {
                    return Err(Error::BlowUp {
                        step: k + 1,
                        time: self.grid.time(k + 1),
                        particle: j,
                    });
                }
            }
        }
        Ok(xs)
    }

    /// Runs path `j` from `x` and keeps the whole trajectory.
    pub fn record(&self, j: usize, x: &[f64]) -> Result<PathRecord> {
        let (d, m) = (self.coeff.state_dim(), self.coeff.noise_dim());
        let steps = self.grid.steps();
        let mut states = Vec::with_capacity((steps + 1) * d);
        let mut increments = Vec::with_capacity(steps * m);
        let last = self.walk(j, x, |_, x, dw| {
            states.extend_from_slice(x);
            increments.extend_from_slice(dw);
        })?;
        states.extend_from_slice(&last);
        Ok(PathRecord {
            index: j,
            seed: self.seed,
            grid: self.grid,
            d,
            m,
            states,
            increments,
            accumulator: 0.0,
            log_weight: 0.0,
        })
    }

    /// Terminal states of paths `0..count` from `x`, in path order.
    pub fn terminals(&self, x: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        (0..count)
            .into_par_iter()
            .map(|j| self.walk(j, x, |_, _, _| {}))
            .collect()
    }
}

/// `M` independent decoupled paths from `x` on `[s, T]`, reading the measure
/// argument from `frozen_flow`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_decoupled(
    coeff: &dyn CoefficientField,
    x: &[f64],
    frozen_flow: &ParticleFlow,
    s: f64,
    end: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<PathRecord>> {
    let sampler = DecoupledSampler::new(coeff, frozen_flow, s, end, dt, seed)?;
    (0..paths).into_par_iter().map(|j| sampler.record(j, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::coefficients::{Affine, Constant};
    use crate::dynamics::particles::{simulate_mckean_vlasov, InitialLaw};
    use crate::stats::{sample_variance, SampleSummary};

    fn flow_for(coeff: &dyn CoefficientField, init: InitialLaw, end: f64, dt: f64) -> ParticleFlow {
        simulate_mckean_vlasov(coeff, &init, 50, TimeGrid::new(0.0, end, dt).unwrap(), 1).unwrap()
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let c = Constant::zero(1, 1);
        let flow = flow_for(&c, InitialLaw::Dirac(vec![0.0]), 1.0, 0.1);
        let paths = simulate_decoupled(&c, &[0.4], &flow, 0.0, 1.0, 0.1, 5, 2).unwrap();
        for p in &paths {
            for k in 0..=10 {
                assert_eq!(p.state(k), &[0.4]);
            }
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let c = Constant::brownian(1, 1.0, 0.0);
        let flow = flow_for(&c, InitialLaw::Dirac(vec![0.0]), 1.0, 0.05);
        let sampler = DecoupledSampler::new(&c, &flow, 0.25, 1.0, 0.05, 4).unwrap();
        let m = 10_000;
        let x: Vec<f64> = sampler.terminals(&[0.0], m).unwrap().into_iter().map(|v| v[0]).collect();
        let var = sample_variance(&x);
        // SE of a Gaussian sample variance is sigma^2 sqrt(2/(M-1))
        let se = 0.75 * (2.0 / (m as f64 - 1.0)).sqrt();
        assert!((var - 0.75).abs() <= 3.0 * se, "{var}");
        assert!(SampleSummary::from_samples(&x).within(0.0, 3.0));
    }

    #[test]
    fn attracted_to_frozen_mean() {
        let c = Affine::mean_reverting(1, 1.0, 0.0);
        let center = 2.0;
        let flow = flow_for(&c, InitialLaw::Dirac(vec![center]), 3.0, 0.01);
        let paths = simulate_decoupled(&c, &[-1.0], &flow, 1.0, 3.0, 0.01, 1, 0).unwrap();
        let gap = (paths[0].terminal()[0] - center).abs();
        assert!(gap <= (-2.0f64).exp() * 3.0 + 0.01, "{gap}");
    }

    #[test]
    fn grid_mismatch_is_contract_error() {
        let c = Constant::brownian(1, 1.0, 0.0);
        let flow = flow_for(&c, InitialLaw::Dirac(vec![0.0]), 1.0, 0.1);
        assert!(matches!(
            simulate_decoupled(&c, &[0.0], &flow, 0.0, 1.0, 0.05, 1, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            simulate_decoupled(&c, &[0.0], &flow, 0.05, 1.0, 0.1, 1, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn noise_is_independent_of_the_flow() {
        let c = Constant::brownian(1, 1.0, 0.0);
        let flow = flow_for(&c, InitialLaw::Dirac(vec![0.0]), 1.0, 0.1);
        let p = simulate_decoupled(&c, &[0.0], &flow, 0.0, 1.0, 0.1, 1, flow.seed()).unwrap();
        assert_ne!(p[0].increment(0), flow.increment(0, 0));
    }
}
