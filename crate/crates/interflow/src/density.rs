//! Compactly supported initial densities, the quadrature grid over their
//! support, and L^p moments of the transported density.
//!
//! Everything is evaluated forward along flow lines: the inverse map is never
//! computed. With `F = bv + mart` the accumulated log-determinant, the
//! transported density at the image point is `p_0(u_0) * exp(-F)` and
//! `M_p(t) = sum_g w_g p_0(u_g)^p exp(-(p-1) F_g(t))`.

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use rand::Rng;

/// Initial density with a compact box support and a per-axis sampler.
#[derive(Clone, Debug)]
pub enum DensityModel {
    /// Constant on the box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Product of 1-d polynomial bumps `1.5 (1 - (2s - 1)^2)` per axis,
    /// rescaled to the box.
    ProductBump { lo: Vec<f64>, hi: Vec<f64> },
}

impl DensityModel {
    pub fn uniform(lo: Vec<f64>, hi: Vec<f64>) -> Result<DensityModel> {
        check_box(&lo, &hi)?;
        Ok(DensityModel::UniformBox { lo, hi })
    }

    pub fn bump(lo: Vec<f64>, hi: Vec<f64>) -> Result<DensityModel> {
        check_box(&lo, &hi)?;
        Ok(DensityModel::ProductBump { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.support().0.len()
    }

    pub fn support(&self) -> (&[f64], &[f64]) {
        match self {
            DensityModel::UniformBox { lo, hi } | DensityModel::ProductBump { lo, hi } => (lo, hi),
        }
    }

    pub fn volume(&self) -> f64 {
        let (lo, hi) = self.support();
        lo.iter().zip(hi).map(|(a, b)| b - a).product()
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let (lo, hi) = self.support();
        debug_assert_eq!(u.len(), lo.len());
        for i in 0..u.len() {
            if u[i] < lo[i] || u[i] > hi[i] {
                return 0.0;
            }
        }
        match self {
            DensityModel::UniformBox { .. } => 1.0 / self.volume(),
            DensityModel::ProductBump { lo, hi } => {
                let mut v = 1.0;
                for i in 0..u.len() {
                    let len = hi[i] - lo[i];
                    let s = (u[i] - lo[i]) / len;
                    let w = 2.0 * s - 1.0;
                    v *= 1.5 * (1.0 - w * w) / len;
                }
                v
            }
        }
    }

    /// Analytic `int p_0^p du` where available.
    pub fn lp_norm_pow(&self, p: f64) -> Option<f64> {
        match self {
            DensityModel::UniformBox { .. } => Some(self.volume().powf(1.0 - p)),
            DensityModel::ProductBump { .. } => None,
        }
    }

    /// One i.i.d. sample, inverse-CDF per axis.
    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) -> Result<()> {
        let (lo, hi) = self.support();
        debug_assert_eq!(out.len(), lo.len());
        match self {
            DensityModel::UniformBox { .. } => {
                for i in 0..out.len() {
                    let u: f64 = rng.gen();
                    out[i] = lo[i] + (hi[i] - lo[i]) * u;
                }
            }
            DensityModel::ProductBump { .. } => {
                for i in 0..out.len() {
                    let u: f64 = rng.gen();
                    let s = invert_bump_cdf(u);
                    out[i] = lo[i] + (hi[i] - lo[i]) * s;
                }
            }
        }
        Ok(())
    }
}

fn check_box(lo: &[f64], hi: &[f64]) -> Result<()> {
    let mut violations = Vec::new();
    if lo.is_empty() || lo.len() != hi.len() {
        violations.push(format!("density.support: lo has {} axes, hi has {}", lo.len(), hi.len()));
    }
    for i in 0..lo.len().min(hi.len()) {
        if !(lo[i] < hi[i]) {
            violations.push(format!("density.support[{i}]: need lo < hi, got [{}, {}]", lo[i], hi[i]));
        }
    }
    if violations.is_empty() { Ok(()) } else { Err(Error::Config(violations)) }
}

/// CDF of the unit bump `1.5 (1 - (2s-1)^2)` on [0,1].
fn bump_cdf(s: f64) -> f64 {
    let w = 2.0 * s - 1.0;
    1.5 * (s - w * w * w / 6.0 - 1.0 / 6.0)
}

/// Bisection inverse of the bump CDF; deterministic and monotone.
fn invert_bump_cdf(u: f64) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bump_cdf(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Midpoint tensor grid over a support box; every node is interior and the
/// weights sum to the box volume.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    d: usize,
    per_axis: usize,
    nodes: Vec<f64>,
    weight: f64,
}

impl QuadratureGrid {
    pub fn new(density: &DensityModel, per_axis: usize) -> Result<QuadratureGrid> {
        let (lo, hi) = density.support();
        let d = lo.len();
        if d > 3 {
            return Err(Error::Unsupported(format!("tensor quadrature beyond d = 3 (got d = {d})")));
        }
        if per_axis == 0 {
            return Err(Error::Config(vec!["sim.grid_per_axis: must be >= 1".into()]));
        }
        let h: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / per_axis as f64).collect();
        let weight: f64 = h.iter().product();
        let total = per_axis.pow(d as u32);
        let mut nodes = vec![0.0; total * d];
        for g in 0..total {
            let mut rem = g;
            for i in 0..d {
                let idx = rem % per_axis;
                rem /= per_axis;
                nodes[g * d + i] = lo[i] + (idx as f64 + 0.5) * h[i];
            }
        }
        Ok(QuadratureGrid { d, per_axis, nodes, weight })
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn node(&self, g: usize) -> &[f64] {
        &self.nodes[g * self.d..(g + 1) * self.d]
    }

    pub fn node_weight(&self) -> f64 {
        self.weight
    }

    /// Midpoint quadrature of an arbitrary function over the box.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|g| f(self.node(g))).sum::<f64>() * self.weight
    }

    /// The tracked points of a trajectory must start exactly at the grid nodes.
    pub fn check_tracks(&self, traj: &Trajectory) -> Result<()> {
        if traj.point_inits.len() < self.len() {
            return Err(Error::UntrackedPoint(traj.point_inits.len()));
        }
        for g in 0..self.len() {
            let u0 = &traj.point_inits[g];
            let node = self.node(g);
            if u0.len() != self.d || u0.iter().zip(node).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::UntrackedPoint(g));
            }
        }
        Ok(())
    }
}

/// Per-p moment estimates along the saved times.
#[derive(Clone, Debug)]
pub struct MomentSeries {
    pub p_values: Vec<f64>,
    pub times: Vec<f64>,
    /// `values[i][j]` = estimate of `int p_t^{p_i}` at `times[j]`.
    pub values: Vec<Vec<f64>>,
}

impl MomentSeries {
    pub fn series(&self, p: f64) -> Option<(&[f64], &[f64])> {
        self.p_values
            .iter()
            .position(|&q| (q - p).abs() < 1e-12)
            .map(|i| (self.times.as_slice(), self.values[i].as_slice()))
    }
}

/// Transported density along the flow line of a tracked point at a saved time.
/// Returns the current position and `p_0(u_0) exp(-(bv + mart))`.
pub fn density_along_flow(
    traj: &Trajectory,
    density: &DensityModel,
    point_id: usize,
    t: f64,
) -> Result<(Vec<f64>, f64)> {
    if point_id >= traj.point_inits.len() {
        return Err(Error::UntrackedPoint(point_id));
    }
    let snap = traj.snapshot_at(t)?;
    let state = &snap.points[point_id];
    let p0 = density.eval(&traj.point_inits[point_id]);
    let value = if p0 == 0.0 { 0.0 } else { p0 * (-(state.bv + state.mart)).exp() };
    Ok((state.x.clone(), value))
}

/// `int p_t^p` by change of variables back to t = 0 over the tracked grid.
pub fn lp_moment_at(
    traj: &Trajectory,
    grid: &QuadratureGrid,
    density: &DensityModel,
    p: f64,
    t: f64,
) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::InvalidModel(format!("moment order p = {p} must be >= 1")));
    }
    grid.check_tracks(traj)?;
    let snap = traj.snapshot_at(t)?;
    Ok(lp_moment_of_snapshot(snap, grid, density, p))
}

pub(crate) fn lp_moment_of_snapshot(
    snap: &crate::flow::Snapshot,
    grid: &QuadratureGrid,
    density: &DensityModel,
    p: f64,
) -> f64 {
    let mut total = 0.0;
    for g in 0..grid.len() {
        let p0 = density.eval(grid.node(g));
        if p0 == 0.0 {
            continue;
        }
        let st = &snap.points[g];
        total += p0.powf(p) * (-(p - 1.0) * (st.bv + st.mart)).exp();
    }
    total * grid.node_weight()
}

/// Moments at every saved time for a list of orders.
pub fn moment_series(
    traj: &Trajectory,
    grid: &QuadratureGrid,
    density: &DensityModel,
    p_values: &[f64],
) -> Result<MomentSeries> {
    for &p in p_values {
        if p < 1.0 {
            return Err(Error::InvalidModel(format!("moment order p = {p} must be >= 1")));
        }
    }
    grid.check_tracks(traj)?;
    let times = traj.times();
    let values = p_values
        .iter()
        .map(|&p| {
            traj.snapshots
                .iter()
                .map(|snap| lp_moment_of_snapshot(snap, grid, density, p))
                .collect()
        })
        .collect();
    Ok(MomentSeries { p_values: p_values.to_vec(), times, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_cdf_endpoints_and_mass() {
        assert!(bump_cdf(0.0).abs() < 1e-15);
        assert!((bump_cdf(1.0) - 1.0).abs() < 1e-15);
        assert!((bump_cdf(0.5) - 0.5).abs() < 1e-15);
        let inv = invert_bump_cdf(0.5);
        assert!((inv - 0.5).abs() < 1e-12);
    }

    #[test]
    fn densities_integrate_to_one() {
        let uniform = DensityModel::uniform(vec![0.0], vec![1.0]).unwrap();
        let bump = DensityModel::bump(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g1 = QuadratureGrid::new(&uniform, 64).unwrap();
        let mass1 = g1.integrate(|u| uniform.eval(u));
        assert!((mass1 - 1.0).abs() < 1e-6);
        let g2 = QuadratureGrid::new(&bump, 48).unwrap();
        let mass2 = g2.integrate(|u| bump.eval(u));
        assert!((mass2 - 1.0).abs() < 1e-3);

        // Refining the grid by 2 shrinks the quadrature error about 4x.
        let g2f = QuadratureGrid::new(&bump, 96).unwrap();
        let err_coarse = (mass2 - 1.0).abs();
        let err_fine = (g2f.integrate(|u| bump.eval(u)) - 1.0).abs();
        assert!(3.0 * err_fine <= err_coarse + 1e-15, "{err_fine} vs {err_coarse}");
    }

    #[test]
    fn grid_weights_sum_to_volume() {
        let bump = DensityModel::bump(vec![0.0, -2.0], vec![2.0, 2.0]).unwrap();
        let grid = QuadratureGrid::new(&bump, 16).unwrap();
        let total = grid.node_weight() * grid.len() as f64;
        assert!((total - 8.0).abs() < 1e-12);
        let (lo, hi) = bump.support();
        for g in 0..grid.len() {
            let node = grid.node(g);
            for i in 0..2 {
                assert!(node[i] > lo[i] && node[i] < hi[i]);
            }
        }
    }

    #[test]
    fn uniform_lp_norm_matches_quadrature() {
        let uniform = DensityModel::uniform(vec![0.0], vec![2.0]).unwrap();
        let grid = QuadratureGrid::new(&uniform, 32).unwrap();
        for p in [1.0, 2.0, 3.5] {
            let quad = grid.integrate(|u| uniform.eval(u).powf(p));
            assert!((quad - uniform.lp_norm_pow(p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_beyond_d3_unsupported() {
        let dens = DensityModel::uniform(vec![0.0; 4], vec![1.0; 4]).unwrap();
        assert!(matches!(QuadratureGrid::new(&dens, 4), Err(Error::Unsupported(_))));
    }
}


#[cfg(test)]
mod ensemble_variant_tests {
    use super::*;
    use crate::flow::{run_replica, SimConfig};
    use crate::kernels::{DiffusionFamily, InteractionKernel, ModelSpec};
    use crate::linalg::Mat;

    #[test]
    fn density_with_sampled_ensemble_shifts_with_the_mean() {
        // With the ensemble sampled from the density, flow lines contract
        // toward the (preserved) sample mean while the density value is the
        // same e^{t} p_0 as in the pinned-ensemble variant.
        let density = DensityModel::uniform(vec![0.0], vec![1.0]).unwrap();
        let model = ModelSpec::new(
            1,
            InteractionKernel::linear(Mat::scalar(1.0), 1.0),
            DiffusionFamily::none(),
        )
        .unwrap();
        let sim = SimConfig { dt: 1e-3, t_horizon: 1.0, n_particles: 128, n_replicas: 1, seed: 9, save_every: 100 };
        let traj = run_replica(&model, &density, &[vec![0.5]], &sim, 0).unwrap();
        let mean0 = {
            let snap0 = &traj.snapshots[0];
            snap0.particles.iter().sum::<f64>() / snap0.particles.len() as f64
        };
        let (pos, val) = density_along_flow(&traj, &density, 0, 1.0).unwrap();
        let expect = mean0 + (0.5 - mean0) * (-1.0f64).exp();
        assert!((pos[0] - expect).abs() <= 0.01, "{} vs {expect}", pos[0]);
        assert!((val - 1.0f64.exp()).abs() < 1e-9);
    }
}
