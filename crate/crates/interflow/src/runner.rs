//! Orchestration: turn a validated experiment into simulation dumps, moment
//! series, estimator reports and a single JSON summary. Each stage is also
//! callable on its own against a populated output directory.

use crate::asymptotics::{
    clustering_diagnostic, closed_form_lambda, contraction_diagnostic, fit_moment_lyapunov,
    intermittency_verdict, lyapunov_report, martingale_decay_check, median, slope_relation_check,
    ContractionDiagnostic, IntermittencyVerdict, LyapunovReport, MartingaleDecay, MomentFitEntry,
    MomentLyapunovFit, SlopeFit,
};
use crate::config::{build_experiment, config_hash, parse_config, Experiment};
use crate::density::{moment_series, MomentSeries};
use crate::detcalc::liouville_consistency;
use crate::error::{Error, Result};
use crate::flow::{self, SimConfig, Trajectory};
use crate::kernels::{dissipativity_report, KernelShape, WellPosednessReport};
use crate::output;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicaFailure {
    pub replica: usize,
    pub error: String,
}

/// Record of one experiment run; re-running the same manifest reproduces the
/// CSV and summary bytes exactly (timings are wall-clock and excluded from
/// that contract).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
    pub outputs: Vec<String>,
    pub timings_ms: Vec<(String, u128)>,
    pub replica_failures: Vec<ReplicaFailure>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentSupRatio {
    pub p: f64,
    pub sup_ratio: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Conditions {
    /// Closed-form log-determinant rate; the field is intermittent iff this
    /// is negative (when the constant-L hypothesis applies).
    pub closed_form_lambda: Option<f64>,
    pub closed_form_negative: Option<bool>,
    /// Alternate sign convention sometimes quoted for linear examples,
    /// tr(A) - L/2; reported for comparison, never used for the verdict.
    pub sign_variant_value: Option<f64>,
    pub sign_variant_negative: Option<bool>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub contraction: Option<ContractionDiagnostic>,
    /// (t, gamma to the probe Dirac) for replica 0.
    pub clustering: Option<Vec<(f64, f64)>>,
    pub martingale: Option<MartingaleDecay>,
}

/// Aggregated result of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub verdict: Option<String>,
    pub lambda_hat: Option<f64>,
    pub lambda_stderr: Option<f64>,
    pub mart_share_max: Option<f64>,
    pub lambda_p: Vec<MomentFitEntry>,
    pub lambda_one: Option<f64>,
    pub ratios: Vec<f64>,
    pub epsilon_mono: f64,
    pub min_ratio_increment: Option<f64>,
    pub slope_fit: Option<SlopeFit>,
    /// |slope - (-lambda_hat)|.
    pub slope_residual: Option<f64>,
    /// Paired per-replica check that the slope matches -lambda_hat within 3
    /// standard errors.
    pub slope_within_3se: Option<bool>,
    pub conditions: Conditions,
    pub mass_conservation_max_error: Option<f64>,
    /// Per moment order: the empirical `sup_t ||p_t||_p / ||p_0||_p` over all
    /// replicas, reported in place of an explicit bound constant.
    #[serde(default)]
    pub moment_sup_ratios: Vec<MomentSupRatio>,
    /// Median over replicas of |det J - exp(bv + mart)| / exp(bv + mart) at
    /// the final time.
    pub liouville_median_discrepancy: Option<f64>,
    pub wellposedness: Option<WellPosednessReport>,
    pub diagnostics: DiagnosticsSummary,
    pub replica_failures: Vec<ReplicaFailure>,
    pub warnings: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage_hint: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::StageDependency(format!("{} (run `{stage_hint}` first)", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> OutPaths {
        OutPaths { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.dir.join("trajectory.csv")
    }
    pub fn particles(&self) -> PathBuf {
        self.dir.join("particles.csv")
    }
    pub fn liouville(&self) -> PathBuf {
        self.dir.join("liouville.csv")
    }
    pub fn moments(&self) -> PathBuf {
        self.dir.join("moments.csv")
    }
    pub fn moments_by_replica(&self) -> PathBuf {
        self.dir.join("moments_by_replica.csv")
    }
    pub fn profile(&self) -> PathBuf {
        self.dir.join("profile.csv")
    }
    pub fn lyapunov(&self) -> PathBuf {
        self.dir.join("lyapunov.json")
    }
    pub fn intermittency(&self) -> PathBuf {
        self.dir.join("intermittency.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

/// Simulate every replica of an experiment and write the trajectory dumps.
pub fn stage_simulate(exp: &Experiment, out_dir: &Path) -> Result<(Vec<Trajectory>, Vec<ReplicaFailure>)> {
    std::fs::create_dir_all(out_dir)?;
    let paths = OutPaths::new(out_dir);
    write_json(&paths.config(), &exp.config)?;
    let tracked = exp.tracked_inits();
    let results = flow::run(&exp.model, &exp.density, &tracked, &exp.sim);
    let (ok, failed) = flow::split_results(results);
    let failures: Vec<ReplicaFailure> = failed
        .into_iter()
        .map(|(replica, error)| ReplicaFailure { replica, error: error.to_string() })
        .collect();
    output::write_trajectory_csv(&paths.trajectory(), &ok)?;
    output::write_particles_csv(&paths.particles(), &ok)?;
    output::write_liouville_csv(&paths.liouville(), &ok)?;
    Ok((ok, failures))
}

/// Moment series for every replica of a trajectory set.
pub fn compute_moment_series(
    exp: &Experiment,
    trajectories: &[Trajectory],
) -> Result<Vec<MomentSeries>> {
    let mut p_list = exp.config.analysis.p_grid.clone();
    if !p_list.iter().any(|&p| (p - 1.0).abs() < 1e-12) {
        p_list.insert(0, 1.0);
    }
    trajectories
        .iter()
        .map(|traj| moment_series(traj, &exp.grid, &exp.density, &p_list))
        .collect()
}

/// Moments stage against an existing output directory.
pub fn stage_moments(out_dir: &Path) -> Result<Vec<MomentSeries>> {
    let paths = OutPaths::new(out_dir);
    let exp = load_dir_experiment(out_dir)?;
    let trajectories = output::read_trajectory_csv(&paths.trajectory())?;
    let series = compute_moment_series(&exp, &trajectories)?;
    output::write_moments_csv(&paths.moments(), &series)?;
    output::write_moments_by_replica_csv(&paths.moments_by_replica(), &series)?;
    if let Some(first) = trajectories.first() {
        output::write_profile_csv(&paths.profile(), first, &exp.density)?;
    }
    Ok(series)
}

/// Lyapunov stage against an existing output directory.
pub fn stage_lyapunov(out_dir: &Path) -> Result<LyapunovReport> {
    let paths = OutPaths::new(out_dir);
    let trajectories = output::read_trajectory_csv(&paths.trajectory())?;
    let report = lyapunov_report(&trajectories)?;
    write_json(&paths.lyapunov(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntermittencyOutput {
    pub fit: MomentLyapunovFit,
    pub verdict: Option<IntermittencyVerdict>,
    pub closed_form_lambda: Option<f64>,
    pub slope_residual: Option<f64>,
    pub conditions: Conditions,
}

/// Intermittency stage against an existing output directory; needs the
/// moments and lyapunov stages.
pub fn stage_intermittency(out_dir: &Path) -> Result<IntermittencyOutput> {
    let paths = OutPaths::new(out_dir);
    let exp = load_dir_experiment(out_dir)?;
    let series = output::read_moments_by_replica_csv(&paths.moments_by_replica())?;
    let lyap: LyapunovReport = read_json(&paths.lyapunov(), "lyapunov")?;
    let out = build_intermittency(&exp, &series, Some(&lyap))?;
    write_json(&paths.intermittency(), &out)?;
    Ok(out)
}

fn build_intermittency(
    exp: &Experiment,
    series: &[MomentSeries],
    lyap: Option<&LyapunovReport>,
) -> Result<IntermittencyOutput> {
    let fit = fit_moment_lyapunov(series, exp.config.analysis.fit_window_fraction)?;
    let ps: Vec<f64> = fit.entries.iter().map(|e| e.p).collect();
    let lams: Vec<f64> = fit.entries.iter().map(|e| e.lambda_p).collect();
    let verdict = intermittency_verdict(&ps, &lams, exp.config.analysis.epsilon_mono).ok();
    let cf_lambda = closed_form_lambda(&exp.model).ok();
    let slope_residual = lyap.map(|l| slope_relation_check(l.lambda_hat, &fit));
    let sign_variant = sign_variant_condition(exp, cf_lambda);
    Ok(IntermittencyOutput {
        conditions: Conditions {
            closed_form_lambda: cf_lambda,
            closed_form_negative: cf_lambda.map(|l| l < 0.0),
            sign_variant_value: sign_variant,
            sign_variant_negative: sign_variant.map(|v| v < 0.0),
        },
        closed_form_lambda: cf_lambda,
        slope_residual,
        verdict,
        fit,
    })
}

/// tr(A) - L/2 for linear kernels with a constant L; the sign-flipped variant
/// of the closed-form condition, kept for side-by-side reporting.
fn sign_variant_condition(exp: &Experiment, cf_lambda: Option<f64>) -> Option<f64> {
    match (&exp.model.kernel.shape, cf_lambda) {
        (KernelShape::Linear { a_mat }, Some(lambda)) => {
            // lambda = -tr(A) - L/2, so L/2 = -lambda - tr(A).
            let tr_a = a_mat.trace();
            let half_l = -lambda - tr_a;
            Some(tr_a - half_l)
        }
        _ => None,
    }
}

/// Run every stage in-process and write the summary. The returned manifest
/// records failures; callers decide the exit code.
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<RunManifest> {
    let paths = OutPaths::new(out_dir);
    let mut timings = Vec::new();
    let mut warnings = exp.warnings.clone();

    let t0 = Instant::now();
    let (trajectories, failures) = stage_simulate(exp, out_dir)?;
    timings.push(("simulate".to_string(), t0.elapsed().as_millis()));

    let mut summary = Summary {
        verdict: None,
        lambda_hat: None,
        lambda_stderr: None,
        mart_share_max: None,
        lambda_p: Vec::new(),
        lambda_one: None,
        ratios: Vec::new(),
        epsilon_mono: exp.config.analysis.epsilon_mono,
        min_ratio_increment: None,
        slope_fit: None,
        slope_residual: None,
        slope_within_3se: None,
        conditions: Conditions::default(),
        mass_conservation_max_error: None,
        moment_sup_ratios: Vec::new(),
        liouville_median_discrepancy: None,
        wellposedness: None,
        diagnostics: DiagnosticsSummary::default(),
        replica_failures: failures.clone(),
        warnings: Vec::new(),
    };

    match dissipativity_report(&exp.model, 1.0) {
        Ok(report) => summary.wellposedness = Some(report),
        Err(e) => warnings.push(format!("well-posedness report unavailable: {e}")),
    }

    if trajectories.is_empty() {
        warnings.push("all replicas failed; estimators unavailable".to_string());
    } else {
        let t1 = Instant::now();
        let series = compute_moment_series(exp, &trajectories)?;
        output::write_moments_csv(&paths.moments(), &series)?;
        output::write_moments_by_replica_csv(&paths.moments_by_replica(), &series)?;
        output::write_profile_csv(&paths.profile(), &trajectories[0], &exp.density)?;
        timings.push(("moments".to_string(), t1.elapsed().as_millis()));

        // Mass conservation across every replica and snapshot.
        let mut mass_err: f64 = 0.0;
        for s in &series {
            if let Some((_, m1)) = s.series(1.0) {
                for v in m1 {
                    mass_err = mass_err.max((v - 1.0).abs());
                }
            }
        }
        summary.mass_conservation_max_error = Some(mass_err);

        // Empirical moment growth against the initial norm.
        for (pi, &p) in series[0].p_values.iter().enumerate() {
            let mut sup: f64 = 0.0;
            for s in &series {
                let m0 = s.values[pi][0];
                for v in &s.values[pi] {
                    sup = sup.max((v / m0).powf(1.0 / p));
                }
            }
            summary.moment_sup_ratios.push(MomentSupRatio { p, sup_ratio: sup });
        }

        let t2 = Instant::now();
        let lyap = lyapunov_report(&trajectories)?;
        write_json(&paths.lyapunov(), &lyap)?;
        summary.lambda_hat = Some(lyap.lambda_hat);
        summary.lambda_stderr = Some(lyap.stderr);
        summary.mart_share_max = Some(lyap.mart_share_max);
        timings.push(("lyapunov".to_string(), t2.elapsed().as_millis()));

        // Liouville consistency at the final time, median over replicas.
        let discrepancies: Vec<f64> = trajectories
            .iter()
            .flat_map(|traj| {
                let snap = traj.final_snapshot();
                snap.points
                    .iter()
                    .filter_map(|st| liouville_consistency(&st.jac, st.bv, st.mart).ok())
                    .collect::<Vec<f64>>()
            })
            .collect();
        if !discrepancies.is_empty() {
            summary.liouville_median_discrepancy = Some(median(&discrepancies));
        }

        let t3 = Instant::now();
        match build_intermittency(exp, &series, Some(&lyap)) {
            Ok(out) => {
                write_json(&paths.intermittency(), &out)?;
                summary.lambda_p = out.fit.entries.clone();
                summary.lambda_one = out.fit.lambda_one;
                summary.slope_fit = Some(out.fit.slope_fit.clone());
                summary.slope_residual = out.slope_residual;
                summary.conditions = out.conditions.clone();
                if let Some(v) = &out.verdict {
                    summary.ratios = v.ratios.clone();
                    summary.min_ratio_increment = Some(v.min_increment);
                    summary.verdict = Some(
                        if v.is_intermittent { "intermittent" } else { "not_intermittent" }.to_string(),
                    );
                }
                // Paired slope check over replicas.
                if out.fit.per_replica_slopes.len() == lyap.per_replica_lambda.len()
                    && !out.fit.per_replica_slopes.is_empty()
                {
                    let diffs: Vec<f64> = out
                        .fit
                        .per_replica_slopes
                        .iter()
                        .zip(&lyap.per_replica_lambda)
                        .map(|(s, l)| s + l)
                        .collect();
                    let n = diffs.len() as f64;
                    let mean = diffs.iter().sum::<f64>() / n;
                    let se = if diffs.len() > 1 {
                        let var = diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
                        (var / n).sqrt()
                    } else {
                        0.0
                    };
                    summary.slope_within_3se = Some(mean.abs() <= 3.0 * se + 1e-9);
                }
            }
            Err(e) => warnings.push(format!("moment fits unavailable: {e}")),
        }
        timings.push(("intermittency".to_string(), t3.elapsed().as_millis()));

        // Optional diagnostics.
        let diag = &exp.config.analysis.diagnostics;
        if let Some(cd) = &diag.contraction {
            let t4 = Instant::now();
            let mut sim = SimConfig {
                t_horizon: cd.t_horizon.unwrap_or(exp.sim.t_horizon),
                n_replicas: cd.replicas.unwrap_or(exp.sim.n_replicas),
                ..exp.sim.clone()
            };
            let n_steps = (sim.t_horizon / sim.dt).round() as usize;
            if n_steps % sim.save_every != 0 {
                sim.save_every = crate::config::divisor_near(n_steps, n_steps / 40);
            }
            match contraction_diagnostic(&exp.model, &exp.density, &cd.u, &cd.v, cd.p, &sim) {
                Ok(table) => summary.diagnostics.contraction = Some(table),
                Err(e) => warnings.push(format!("contraction diagnostic unavailable: {e}")),
            }
            timings.push(("contraction".to_string(), t4.elapsed().as_millis()));
        }
        if let Some(probe_idx) = diag.clustering_probe {
            match clustering_diagnostic(&trajectories[0], exp.probe_point_id(probe_idx)) {
                Ok(series) => summary.diagnostics.clustering = Some(series),
                Err(e) => warnings.push(format!("clustering diagnostic unavailable: {e}")),
            }
        }
        if diag.martingale_decay {
            match martingale_decay_check(&trajectories) {
                Ok(decay) => summary.diagnostics.martingale = Some(decay),
                Err(e) => warnings.push(format!("martingale decay check unavailable: {e}")),
            }
        }
    }

    summary.warnings = warnings.clone();
    write_json(&paths.summary(), &summary)?;

    let manifest = RunManifest {
        config_hash: config_hash(&exp.config),
        seed: exp.sim.seed,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: [
            "config.json",
            "trajectory.csv",
            "particles.csv",
            "liouville.csv",
            "moments.csv",
            "moments_by_replica.csv",
            "profile.csv",
            "lyapunov.json",
            "intermittency.json",
            "summary.json",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        timings_ms: timings,
        replica_failures: failures,
        warnings,
    };
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

/// Rebuild the experiment recorded in an output directory.
pub fn load_dir_experiment(out_dir: &Path) -> Result<Experiment> {
    let paths = OutPaths::new(out_dir);
    let config = parse_config(&paths.config())
        .map_err(|_| Error::StageDependency(format!("{} (run `simulate` first)", paths.config().display())))?;
    build_experiment(config)
}

/// One row per experiment directory, from its summary.json.
pub fn report_rows(dirs: &[PathBuf]) -> Result<Vec<(String, Summary)>> {
    dirs.iter()
        .map(|dir| {
            let summary: Summary = read_json(&OutPaths::new(dir).summary(), "run")?;
            Ok((dir.display().to_string(), summary))
        })
        .collect()
}

/// Render the verdict table as CSV text.
pub fn render_report(rows: &[(String, Summary)]) -> String {
    let mut out = String::from("experiment,verdict,lambda_hat,lambda_stderr,slope,slope_r2,min_ratio_increment,mass_error,failures\n");
    for (name, s) in rows {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            name,
            s.verdict.clone().unwrap_or_else(|| "unavailable".into()),
            fmt(s.lambda_hat),
            fmt(s.lambda_stderr),
            fmt(s.slope_fit.as_ref().map(|f| f.slope)),
            fmt(s.slope_fit.as_ref().map(|f| f.r2)),
            fmt(s.min_ratio_increment),
            fmt(s.mass_conservation_max_error),
            s.replica_failures.len(),
        ));
    }
    out
}
