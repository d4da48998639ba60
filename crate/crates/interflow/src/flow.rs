//! Euler-Maruyama stepping of the coupled system: the particle ensemble that
//! carries the empirical measure, tracked flow points, their Jacobians
//! (variational equation) and the log-determinant split into a bounded
//! variation part `bv` and a martingale part `mart`.
//!
//! One Brownian path per replica drives everything: particles and tracked
//! points see the same increments each step (common noise), with the measure
//! frozen at the step's start. Tracked points never feed back into the
//! empirical measure.

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::kernels::{CoeffScratch, MeasureView, ModelSpec};
use crate::linalg::Mat;
use crate::noise::{sampling_rng, NoiseDraw};
use rayon::prelude::*;

/// N particle positions approximating the transported measure, with the mean
/// kept in sync.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    d: usize,
    positions: Vec<f64>,
    mean: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn from_positions(d: usize, positions: Vec<f64>) -> Result<ParticleEnsemble> {
        if d == 0 || positions.is_empty() || positions.len() % d != 0 {
            return Err(Error::Dimension { expected: d.max(1), got: positions.len() });
        }
        if !positions.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidModel("ensemble positions must be finite".into()));
        }
        let mean = crate::kernels::mean_of(&positions, d);
        Ok(ParticleEnsemble { d, positions, mean })
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.d
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::new(self.d, &self.positions, &self.mean)
    }

    fn recompute_mean(&mut self) {
        let n = self.n() as f64;
        self.mean.fill(0.0);
        for i in 0..self.n() {
            for j in 0..self.d {
                self.mean[j] += self.positions[i * self.d + j];
            }
        }
        for m in &mut self.mean {
            *m /= n;
        }
    }
}

/// A flow point carried alongside the ensemble: position, Jacobian, and the
/// accumulated log-determinant decomposition.
#[derive(Clone, Debug)]
pub struct TrackedPoint {
    pub u0: Vec<f64>,
    pub x: Vec<f64>,
    pub jac: Mat,
    pub bv: f64,
    pub mart: f64,
}

impl TrackedPoint {
    pub fn new(u0: Vec<f64>) -> TrackedPoint {
        let d = u0.len();
        TrackedPoint { x: u0.clone(), u0, jac: Mat::identity(d), bv: 0.0, mart: 0.0 }
    }
}

/// Time stepping configuration.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub t_horizon: f64,
    pub n_particles: usize,
    pub n_replicas: usize,
    pub seed: u64,
    pub save_every: usize,
}

impl SimConfig {
    /// Number of steps, after validating spacing constraints.
    pub fn n_steps(&self) -> Result<usize> {
        let mut violations = Vec::new();
        if !(self.dt > 0.0) {
            violations.push(format!("sim.dt: must be > 0, got {}", self.dt));
        }
        if self.t_horizon < self.dt {
            violations.push(format!(
                "sim.t_horizon: must be >= dt, got {} < {}",
                self.t_horizon, self.dt
            ));
        }
        if self.n_particles == 0 {
            violations.push("sim.particles: must be >= 1".to_string());
        }
        if self.n_replicas == 0 {
            violations.push("sim.replicas: must be >= 1".to_string());
        }
        if self.save_every == 0 {
            violations.push("sim.save_every: must be >= 1".to_string());
        }
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let n_steps = (self.t_horizon / self.dt).round() as usize;
        if n_steps == 0 || ((n_steps as f64) * self.dt - self.t_horizon).abs() > 1e-9 * self.t_horizon.max(1.0) {
            return Err(Error::Config(vec![format!(
                "sim.t_horizon: {} is not an integer multiple of dt = {}",
                self.t_horizon, self.dt
            )]));
        }
        if n_steps % self.save_every != 0 {
            return Err(Error::Config(vec![format!(
                "sim.save_every: {} does not divide the step count {}",
                self.save_every, n_steps
            )]));
        }
        Ok(n_steps)
    }
}

/// State of one tracked point at a saved time.
#[derive(Clone, Debug)]
pub struct PointState {
    pub x: Vec<f64>,
    pub jac: Mat,
    pub bv: f64,
    pub mart: f64,
}

/// Saved state at one time: ensemble summary plus all tracked points.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    pub particles: Vec<f64>,
    pub points: Vec<PointState>,
}

/// One replica's saved history.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub replica: usize,
    pub d: usize,
    pub dt: f64,
    pub point_inits: Vec<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    /// Exact snapshot lookup; interpolation is refused.
    pub fn snapshot_at(&self, t: f64) -> Result<&Snapshot> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.snapshots
            .iter()
            .find(|s| (s.t - t).abs() <= tol)
            .ok_or(Error::MissingSnapshot(t))
    }

    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least the initial snapshot")
    }
}

/// Draw N i.i.d. initial positions from the density. Deterministic in `seed`;
/// the sampling stream is disjoint from every path-noise stream.
pub fn sample_initial_ensemble(density: &DensityModel, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    sample_for_replica(density, n, seed, 0)
}

pub(crate) fn sample_for_replica(density: &DensityModel, n: usize, seed: u64, replica: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let d = density.dim();
    let mut rng = sampling_rng(seed, replica);
    let mut positions = vec![0.0; n * d];
    for i in 0..n {
        density.sample_into(&mut rng, &mut positions[i * d..(i + 1) * d])?;
    }
    ParticleEnsemble::from_positions(d, positions)
}

/// Reusable step buffers; one per replica worker.
pub struct StepScratch {
    new_positions: Vec<f64>,
    drift: Vec<f64>,
    xnew: Vec<f64>,
    factor: Mat,
    jac_new: Mat,
    da: Mat,
    coeff: CoeffScratch,
    dscr: Vec<f64>,
}

impl StepScratch {
    pub fn new(d: usize, n_particles: usize) -> StepScratch {
        StepScratch {
            new_positions: vec![0.0; n_particles * d],
            drift: vec![0.0; d],
            xnew: vec![0.0; d],
            factor: Mat::zeros(d),
            jac_new: Mat::zeros(d),
            da: Mat::zeros(d),
            coeff: CoeffScratch::new(d),
            dscr: vec![0.0; 2 * d],
        }
    }
}

/// One explicit Euler-Maruyama step of the whole coupled state. The measure
/// summary and the noise are frozen before anything moves.
pub fn em_step(
    model: &ModelSpec,
    ensemble: &mut ParticleEnsemble,
    points: &mut [TrackedPoint],
    noise: &NoiseDraw,
    dt: f64,
) -> Result<()> {
    let mut scratch = StepScratch::new(model.d, ensemble.n());
    step_with_scratch(model, ensemble, points, noise, dt, 0, &mut scratch)
}

pub(crate) fn step_with_scratch(
    model: &ModelSpec,
    ensemble: &mut ParticleEnsemble,
    points: &mut [TrackedPoint],
    noise: &NoiseDraw,
    dt: f64,
    step: usize,
    scratch: &mut StepScratch,
) -> Result<()> {
    let d = model.d;
    let time = step as f64 * dt;
    let StepScratch { new_positions, drift, xnew, factor, jac_new, da, coeff, dscr } = scratch;

    {
        let view = ensemble.view();

        for (idx, point) in points.iter_mut().enumerate() {
            // Log-determinant increments at the step-start state.
            let integrand = model.liouville_drift_integrand_value(&point.x, &view, coeff);
            let mart_inc = model.noise_divergence_dot(&point.x, &view, noise, coeff);

            // Variational factor I + Da dt + sum_{k,p} Db_k^{.,p} dB_k^p.
            factor.fill_identity();
            model.drift_jacobian_into(&point.x, &view, da, coeff);
            factor.add_assign_scaled(da, dt);
            for (k, kernel) in model.diffusion.kernels.iter().enumerate() {
                kernel.add_jacobian_noise(&point.x, &view, noise.block(k), factor, dscr);
            }
            factor.mul_into(&point.jac, jac_new);

            if !jac_new.is_finite() {
                return Err(Error::BlowUp { step, time, what: format!("Jacobian of tracked point {idx}") });
            }
            if jac_new.det() <= 0.0 {
                return Err(Error::DeterminantSign { step, time, point: idx });
            }

            // Position update.
            model.drift_eval_into(&point.x, &view, drift, coeff);
            for j in 0..d {
                xnew[j] = point.x[j] + drift[j] * dt;
            }
            for (k, kernel) in model.diffusion.kernels.iter().enumerate() {
                kernel.add_noise_into(&point.x, &view, noise.block(k), xnew, dscr);
            }
            if !xnew.iter().all(|v| v.is_finite()) {
                return Err(Error::BlowUp { step, time, what: format!("tracked point {idx}") });
            }

            point.x.copy_from_slice(xnew);
            std::mem::swap(&mut point.jac, jac_new);
            point.bv += integrand * dt;
            point.mart += mart_inc;
        }

        // Particles, against the same frozen measure and noise.
        for i in 0..view.n {
            let x = view.position(i);
            model.drift_eval_into(x, &view, drift, coeff);
            for j in 0..d {
                xnew[j] = x[j] + drift[j] * dt;
            }
            for (k, kernel) in model.diffusion.kernels.iter().enumerate() {
                kernel.add_noise_into(x, &view, noise.block(k), xnew, dscr);
            }
            if !xnew.iter().all(|v| v.is_finite()) {
                return Err(Error::BlowUp { step, time, what: format!("particle {i}") });
            }
            new_positions[i * d..(i + 1) * d].copy_from_slice(xnew);
        }
    }

    ensemble.positions.copy_from_slice(new_positions);
    ensemble.recompute_mean();
    Ok(())
}

fn take_snapshot(ensemble: &ParticleEnsemble, points: &[TrackedPoint], step: usize, dt: f64) -> Snapshot {
    Snapshot {
        step,
        t: step as f64 * dt,
        mean: ensemble.mean.clone(),
        particles: ensemble.positions.clone(),
        points: points
            .iter()
            .map(|p| PointState { x: p.x.clone(), jac: p.jac.clone(), bv: p.bv, mart: p.mart })
            .collect(),
    }
}

/// Run one replica from an explicit initial ensemble.
pub fn run_replica_from(
    model: &ModelSpec,
    mut ensemble: ParticleEnsemble,
    tracked_inits: &[Vec<f64>],
    sim: &SimConfig,
    replica: usize,
) -> Result<Trajectory> {
    let n_steps = sim.n_steps()?;
    if ensemble.dim() != model.d {
        return Err(Error::Dimension { expected: model.d, got: ensemble.dim() });
    }
    for u0 in tracked_inits {
        if u0.len() != model.d {
            return Err(Error::Dimension { expected: model.d, got: u0.len() });
        }
    }
    let mut points: Vec<TrackedPoint> = tracked_inits.iter().cloned().map(TrackedPoint::new).collect();
    let mut scratch = StepScratch::new(model.d, ensemble.n());
    let mut noise = NoiseDraw::zero(model.k_count(), model.d);
    let mut snapshots = Vec::with_capacity(n_steps / sim.save_every + 1);
    snapshots.push(take_snapshot(&ensemble, &points, 0, sim.dt));
    for step in 0..n_steps {
        noise.regenerate(sim.seed, replica as u64, step as u64, sim.dt);
        step_with_scratch(model, &mut ensemble, &mut points, &noise, sim.dt, step, &mut scratch)?;
        let done = step + 1;
        if done % sim.save_every == 0 {
            snapshots.push(take_snapshot(&ensemble, &points, done, sim.dt));
        }
    }
    Ok(Trajectory {
        replica,
        d: model.d,
        dt: sim.dt,
        point_inits: tracked_inits.to_vec(),
        snapshots,
    })
}

/// Run one replica, sampling its initial ensemble from the density.
pub fn run_replica(
    model: &ModelSpec,
    density: &DensityModel,
    tracked_inits: &[Vec<f64>],
    sim: &SimConfig,
    replica: usize,
) -> Result<Trajectory> {
    let ensemble = sample_for_replica(density, sim.n_particles, sim.seed, replica as u64)?;
    run_replica_from(model, ensemble, tracked_inits, sim, replica)
}

/// Run every replica. Replicas execute in parallel but each one is a pure
/// function of `(seed, replica)`, so the result is independent of thread
/// count and scheduling.
pub fn run(
    model: &ModelSpec,
    density: &DensityModel,
    tracked_inits: &[Vec<f64>],
    sim: &SimConfig,
) -> Vec<Result<Trajectory>> {
    (0..sim.n_replicas)
        .into_par_iter()
        .map(|r| run_replica(model, density, tracked_inits, sim, r))
        .collect()
}

/// Successful trajectories plus the failures with their replica ids.
pub fn split_results(results: Vec<Result<Trajectory>>) -> (Vec<Trajectory>, Vec<(usize, Error)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => ok.push(t),
            Err(e) => failed.push((r, e)),
        }
    }
    (ok, failed)
}
