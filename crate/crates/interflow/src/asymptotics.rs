//! Estimators for pointwise and moment Lyapunov exponents, the closed-form
//! limit of the log-determinant rate, the intermittency verdict, and the
//! contraction / clustering / martingale diagnostics.
//!
//! Almost-sure t -> infinity statements become finite-horizon Monte Carlo
//! checks here: every estimate carries replica standard errors and the
//! acceptance thresholds are phrased in multiples of them.

use crate::error::{Error, Result};
use crate::flow::{run_replica, SimConfig, Trajectory};
use crate::gamma::{gamma_to_dirac, EmpiricalMeasure};
use crate::kernels::{dissipativity_report, MeasureView, ModelSpec};
use crate::density::{DensityModel, MomentSeries};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Ordinary least squares of y on x. Returns (slope, intercept, r_squared).
/// A constant y fits perfectly by convention.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - xm) * (xi - xm);
        sxy += (xi - xm) * (yi - ym);
        syy += (yi - ym) * (yi - ym);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 && sxx > 0.0 {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (slope, ym - slope * xm, r2)
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// One tracked point's Lyapunov estimate pooled over replicas.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointLyapunov {
    pub point_id: usize,
    pub lambda: f64,
    pub stderr: f64,
    /// max over replicas of |mart| / t at the final time.
    pub mart_share: f64,
}

/// Pointwise Lyapunov estimates: `(bv + mart) / t` at the final time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub t_final: f64,
    pub n_replicas: usize,
    pub lambda_hat: f64,
    pub stderr: f64,
    pub mart_share_max: f64,
    pub per_point: Vec<PointLyapunov>,
    #[serde(skip)]
    pub per_replica_lambda: Vec<f64>,
}

/// Estimate for a single tracked point.
pub fn pointwise_lyapunov(trajectories: &[Trajectory], point_id: usize) -> Result<PointLyapunov> {
    if trajectories.is_empty() {
        return Err(Error::InvalidModel("no trajectories".into()));
    }
    let mut values = Vec::with_capacity(trajectories.len());
    let mut mart_share: f64 = 0.0;
    for traj in trajectories {
        if point_id >= traj.point_inits.len() {
            return Err(Error::UntrackedPoint(point_id));
        }
        let snap = traj.final_snapshot();
        let st = &snap.points[point_id];
        values.push((st.bv + st.mart) / snap.t);
        mart_share = mart_share.max(st.mart.abs() / snap.t);
    }
    let (lambda, stderr) = mean_and_stderr(&values);
    Ok(PointLyapunov { point_id, lambda, stderr, mart_share })
}

/// Full report over every tracked point, with the pooled estimate taken over
/// per-replica grid means.
pub fn lyapunov_report(trajectories: &[Trajectory]) -> Result<LyapunovReport> {
    if trajectories.is_empty() {
        return Err(Error::InvalidModel("no trajectories".into()));
    }
    let n_points = trajectories[0].point_inits.len();
    if n_points == 0 {
        return Err(Error::UntrackedPoint(0));
    }
    let t_final = trajectories[0].final_snapshot().t;
    let per_point: Result<Vec<PointLyapunov>> =
        (0..n_points).map(|pid| pointwise_lyapunov(trajectories, pid)).collect();
    let per_point = per_point?;
    let per_replica_lambda: Vec<f64> = trajectories
        .iter()
        .map(|traj| {
            let snap = traj.final_snapshot();
            snap.points.iter().map(|st| (st.bv + st.mart) / snap.t).sum::<f64>() / n_points as f64
        })
        .collect();
    let (lambda_hat, stderr) = mean_and_stderr(&per_replica_lambda);
    let mart_share_max = per_point.iter().map(|p| p.mart_share).fold(0.0, f64::max);
    Ok(LyapunovReport {
        t_final,
        n_replicas: trajectories.len(),
        lambda_hat,
        stderr,
        mart_share_max,
        per_point,
        per_replica_lambda,
    })
}

/// Closed-form limit `div phi(0) - L/2`, where `L` is the (u-independent)
/// value of `sum_{k,p} tr((D b_k^{.,p}(u, delta_u))^2)`. Errors if sampling
/// detects a non-constant L.
pub fn closed_form_lambda(model: &ModelSpec) -> Result<f64> {
    let d = model.d;
    let zero = vec![0.0; d];
    let div_phi0 = model.kernel.div_phi(&zero);

    let sample_l = |u: &[f64]| -> f64 {
        let view = MeasureView::new(d, u, u);
        let mut scratch = vec![0.0; 2 * d];
        model
            .diffusion
            .kernels
            .iter()
            .map(|k| k.trace_square_sum(u, &view, &mut scratch))
            .sum()
    };

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
    let l0 = sample_l(&zero);
    for _ in 0..32 {
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let l = sample_l(&u);
        if (l - l0).abs() > 1e-9 * (1.0 + l0.abs()) {
            return Err(Error::NotApplicable(format!(
                "diffusion derivative trace is state-dependent ({l0} at 0 vs {l}); no constant L"
            )));
        }
    }
    Ok(div_phi0 - 0.5 * l0)
}

/// Least-squares slope of `ln M_p(t)` over `[t0, t1]`.
pub fn moment_lyapunov(series: &MomentSeries, p: f64, window: (f64, f64)) -> Result<(f64, f64)> {
    let (times, values) = series
        .series(p)
        .ok_or_else(|| Error::InvalidModel(format!("series has no moment order p = {p}")))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (t, v) in times.iter().zip(values) {
        if *t >= window.0 - 1e-12 && *t <= window.1 + 1e-12 {
            if *v <= 0.0 {
                return Err(Error::InvalidModel(format!("non-positive moment {v} at t = {t}")));
            }
            xs.push(*t);
            ys.push(v.ln());
        }
    }
    if xs.len() < 10 {
        return Err(Error::InvalidModel(format!(
            "fit window [{}, {}] holds {} snapshots, need at least 10",
            window.0,
            window.1,
            xs.len()
        )));
    }
    let (slope, _, r2) = linear_fit(&xs, &ys);
    Ok((slope, r2))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentFitEntry {
    pub p: f64,
    pub lambda_p: f64,
    pub stderr: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub r2: f64,
}

/// Moment Lyapunov exponents fitted per replica and pooled, plus the global
/// regression of `lambda_p` against `(p - 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentLyapunovFit {
    pub window: (f64, f64),
    pub entries: Vec<MomentFitEntry>,
    /// Slope of the p = 1 series when present; mass conservation makes it 0.
    pub lambda_one: Option<f64>,
    pub slope_fit: SlopeFit,
    #[serde(skip)]
    pub per_replica_slopes: Vec<f64>,
    #[serde(skip)]
    pub per_replica_lambda_p: Vec<Vec<f64>>,
}

/// Fit every replica's moment series over the trailing window and pool.
///
/// `window_fraction` is the trailing fraction of the horizon used for the
/// regression (0.5 discards the first half as burn-in).
pub fn fit_moment_lyapunov(series_by_replica: &[MomentSeries], window_fraction: f64) -> Result<MomentLyapunovFit> {
    if series_by_replica.is_empty() {
        return Err(Error::InvalidModel("no moment series".into()));
    }
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(Error::Config(vec![format!(
            "analysis.fit_window_fraction: must be in (0, 1], got {window_fraction}"
        )]));
    }
    let times = &series_by_replica[0].times;
    let t_final = *times.last().expect("series has times");
    let window = (t_final * (1.0 - window_fraction), t_final);
    let p_values = series_by_replica[0].p_values.clone();

    let fit_ps: Vec<f64> = p_values.iter().copied().filter(|&p| p > 1.0).collect();
    let mut per_replica_lambda_p: Vec<Vec<f64>> = Vec::with_capacity(series_by_replica.len());
    let mut per_replica_slopes = Vec::with_capacity(series_by_replica.len());
    let mut lambda_one_values = Vec::new();
    let mut r2_by_p = vec![0.0f64; fit_ps.len()];

    for series in series_by_replica {
        let mut lams = Vec::with_capacity(fit_ps.len());
        for (i, &p) in fit_ps.iter().enumerate() {
            let (slope, r2) = moment_lyapunov(series, p, window)?;
            lams.push(slope);
            r2_by_p[i] += r2;
        }
        if p_values.iter().any(|&p| (p - 1.0).abs() < 1e-12) {
            let (slope, _) = moment_lyapunov(series, 1.0, window)?;
            lambda_one_values.push(slope);
        }
        if fit_ps.len() >= 2 {
            let xs: Vec<f64> = fit_ps.iter().map(|&p| p - 1.0).collect();
            let (s, _, _) = linear_fit(&xs, &lams);
            per_replica_slopes.push(s);
        }
        per_replica_lambda_p.push(lams);
    }

    let n_rep = series_by_replica.len();
    let entries: Vec<MomentFitEntry> = fit_ps
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let vals: Vec<f64> = per_replica_lambda_p.iter().map(|v| v[i]).collect();
            let (lambda_p, stderr) = mean_and_stderr(&vals);
            MomentFitEntry { p, lambda_p, stderr, r2: r2_by_p[i] / n_rep as f64 }
        })
        .collect();

    let slope_fit = if entries.len() >= 2 {
        let xs: Vec<f64> = entries.iter().map(|e| e.p - 1.0).collect();
        let ys: Vec<f64> = entries.iter().map(|e| e.lambda_p).collect();
        let (slope, _, r2) = linear_fit(&xs, &ys);
        let (_, stderr) = mean_and_stderr(&per_replica_slopes);
        SlopeFit { slope, stderr, r2 }
    } else {
        SlopeFit { slope: 0.0, stderr: 0.0, r2: 1.0 }
    };

    let lambda_one = if lambda_one_values.is_empty() {
        None
    } else {
        Some(lambda_one_values.iter().sum::<f64>() / lambda_one_values.len() as f64)
    };

    Ok(MomentLyapunovFit {
        window,
        entries,
        lambda_one,
        slope_fit,
        per_replica_slopes,
        per_replica_lambda_p,
    })
}

/// Residual of the linearity relation: |slope - (-lambda_hat)|.
pub fn slope_relation_check(lambda_hat: f64, fit: &MomentLyapunovFit) -> f64 {
    (fit.slope_fit.slope - (-lambda_hat)).abs()
}

/// Strict-increase decision on the ratios `lambda_p / p`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntermittencyVerdict {
    pub p_values: Vec<f64>,
    pub ratios: Vec<f64>,
    pub epsilon_mono: f64,
    /// Smallest consecutive ratio increment.
    pub min_increment: f64,
    pub is_intermittent: bool,
}

pub fn intermittency_verdict(p_values: &[f64], lambda_ps: &[f64], epsilon_mono: f64) -> Result<IntermittencyVerdict> {
    if p_values.len() != lambda_ps.len() || p_values.len() < 3 {
        return Err(Error::InvalidModel(format!(
            "verdict needs >= 3 moment orders, got {}",
            p_values.len()
        )));
    }
    if p_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidModel("moment orders must be strictly increasing".into()));
    }
    let ratios: Vec<f64> = p_values.iter().zip(lambda_ps).map(|(p, l)| l / p).collect();
    let min_increment = ratios
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(IntermittencyVerdict {
        p_values: p_values.to_vec(),
        ratios,
        epsilon_mono,
        min_increment,
        is_intermittent: min_increment > epsilon_mono,
    })
}

/// Monte Carlo table for the pairwise moment contraction bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionDiagnostic {
    pub p: u32,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub bound: f64,
    pub times: Vec<f64>,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `|u - v|^{2p} exp(-(2 alpha - B^2) p t)`, the Groenwall-rate reference.
    pub exp_reference: Vec<f64>,
}

/// Estimate `E |x(u,t) - x(v,t)|^{2p}` over fresh replicas and compare with
/// the flat bound `|u - v|^{2p}`.
pub fn contraction_diagnostic(
    model: &ModelSpec,
    density: &DensityModel,
    u: &[f64],
    v: &[f64],
    p: u32,
    sim: &SimConfig,
) -> Result<ContractionDiagnostic> {
    if p == 0 {
        return Err(Error::InvalidModel("contraction diagnostic needs p >= 1".into()));
    }
    let report = dissipativity_report(model, p as f64)?;
    if !report.admits_moment(p) {
        return Err(Error::NotApplicable(format!(
            "moment order p = {p} is outside the contraction range (p_max = {:?})",
            report.p_max
        )));
    }
    let tracked = vec![u.to_vec(), v.to_vec()];
    let results: Vec<Result<Trajectory>> = (0..sim.n_replicas)
        .into_par_iter()
        .map(|r| run_replica(model, density, &tracked, sim, r))
        .collect();
    let mut trajs = Vec::with_capacity(results.len());
    for res in results {
        trajs.push(res?);
    }
    let times = trajs[0].times();
    let mut estimate = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for ti in 0..times.len() {
        let vals: Vec<f64> = trajs
            .iter()
            .map(|traj| {
                let snap = &traj.snapshots[ti];
                let dx = crate::linalg::dist(&snap.points[0].x, &snap.points[1].x);
                dx.powi(2 * p as i32)
            })
            .collect();
        let (m, se) = mean_and_stderr(&vals);
        estimate.push(m);
        stderr.push(se);
    }
    let d0 = crate::linalg::dist(u, v);
    let bound = d0.powi(2 * p as i32);
    let rate = 2.0 * model.kernel.alpha - model.diffusion.b_lipschitz.powi(2);
    let exp_reference = times.iter().map(|t| bound * (-rate * p as f64 * t).exp()).collect();
    Ok(ContractionDiagnostic {
        p,
        u: u.to_vec(),
        v: v.to_vec(),
        bound,
        times,
        estimate,
        stderr,
        exp_reference,
    })
}

/// Distance of the empirical measure to the Dirac at a tracked probe, per
/// saved time.
pub fn clustering_diagnostic(traj: &Trajectory, probe_id: usize) -> Result<Vec<(f64, f64)>> {
    if probe_id >= traj.point_inits.len() {
        return Err(Error::UntrackedPoint(probe_id));
    }
    traj.snapshots
        .iter()
        .map(|snap| {
            let mu = EmpiricalMeasure::new(traj.d, snap.particles.clone())?;
            let g = gamma_to_dirac(&mu, &snap.points[probe_id].x)?;
            Ok((snap.t, g))
        })
        .collect()
}

/// Decay diagnostic for the martingale share of the log-determinant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MartingaleDecay {
    /// Saved times after t = 0.
    pub times: Vec<f64>,
    /// Median over replicas of the grid max of |mart| / t.
    pub median_series: Vec<f64>,
    pub t_early: f64,
    pub t_late: f64,
    pub median_early: f64,
    pub median_late: f64,
    /// Fraction of replicas with value(t_late) < value(t_early).
    pub fraction_decreased: f64,
    #[serde(skip)]
    pub per_replica: Vec<Vec<f64>>,
}

/// Grid max of |mart| / t per replica and saved time; compares the final time
/// with the time closest to a quarter of the horizon.
pub fn martingale_decay_check(trajectories: &[Trajectory]) -> Result<MartingaleDecay> {
    if trajectories.is_empty() {
        return Err(Error::InvalidModel("no trajectories".into()));
    }
    let times: Vec<f64> = trajectories[0]
        .snapshots
        .iter()
        .filter(|s| s.t > 0.0)
        .map(|s| s.t)
        .collect();
    if times.len() < 2 {
        return Err(Error::InvalidModel("need at least two saved times after t = 0".into()));
    }
    let per_replica: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|traj| {
            traj.snapshots
                .iter()
                .filter(|s| s.t > 0.0)
                .map(|s| {
                    s.points
                        .iter()
                        .map(|p| p.mart.abs() / s.t)
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    let median_series: Vec<f64> = (0..times.len())
        .map(|ti| {
            let mut vals: Vec<f64> = per_replica.iter().map(|v| v[ti]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median_of_sorted(&vals)
        })
        .collect();
    let t_late = *times.last().unwrap();
    let target = t_late / 4.0;
    let early_idx = times
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - target).abs().partial_cmp(&(*b - target).abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let late_idx = times.len() - 1;
    let decreased = per_replica.iter().filter(|v| v[late_idx] < v[early_idx]).count();
    Ok(MartingaleDecay {
        times,
        median_early: median_series[early_idx],
        median_late: median_series[late_idx],
        t_early: trajectories[0].snapshots.iter().filter(|s| s.t > 0.0).nth(early_idx).unwrap().t,
        t_late,
        fraction_decreased: decreased as f64 / per_replica.len() as f64,
        median_series,
        per_replica,
    })
}

fn median_of_sorted(vals: &[f64]) -> f64 {
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Median of an unsorted slice; used by the acceptance diagnostics.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    median_of_sorted(&v)
}



#[cfg(test)]
mod verdict_consistency {
    use super::*;

    #[test]
    fn verdict_matches_sign_of_lambda() {
        // With lambda_p = -lambda (p - 1) the field is intermittent exactly
        // when lambda < 0. The default margin 1e-3 resolves |lambda| >= 0.1
        // on the default p grid; weaker signals need a smaller margin.
        let ps = [1.5, 2.0, 3.0, 4.0];
        for lambda in [-2.0, -0.5, -0.1, 0.0, 0.3, 1.7] {
            let lams: Vec<f64> = ps.iter().map(|p| -lambda * (p - 1.0)).collect();
            let v = intermittency_verdict(&ps, &lams, 1e-3).unwrap();
            assert_eq!(
                v.is_intermittent,
                lambda < 0.0,
                "lambda = {lambda}: ratios {:?}",
                v.ratios
            );
        }
        for lambda in [-0.01, -1e-6, 0.0, 1e-6] {
            let lams: Vec<f64> = ps.iter().map(|p| -lambda * (p - 1.0)).collect();
            let v = intermittency_verdict(&ps, &lams, 1e-12).unwrap();
            assert_eq!(v.is_intermittent, lambda < 0.0, "lambda = {lambda}");
        }
    }
}
