//! Declarative experiment configuration: strict JSON schema, full-constraint
//! validation (all violations reported at once), and conversion into the
//! model, density and simulation types.

use crate::density::{DensityModel, QuadratureGrid};
use crate::error::{Error, Result};
use crate::flow::SimConfig;
use crate::kernels::{
    dissipativity_report, DiffusionFamily, DiffusionKernel, FrozenProfile, InteractionKernel, ModelSpec,
};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_holder_delta() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub variant: String,
    pub a_mat: Vec<Vec<f64>>,
    pub alpha: f64,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// Lipschitz constant of the kernel; derived from the matrices if absent.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Sup-norm bound of the kernel derivative; derived if absent.
    #[serde(default)]
    pub dphi_sup: Option<f64>,
    #[serde(default = "default_holder_delta")]
    pub holder_delta: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionKernelConfig {
    pub variant: String,
    #[serde(default)]
    pub c_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub d_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub s_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub profile: Option<ProfileConfig>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub variant: String,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub width: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default)]
    pub kernels: Vec<DiffusionKernelConfig>,
    /// Noise truncation index; must equal kernels.len() - 1 when present.
    #[serde(default)]
    pub k_truncation: Option<usize>,
    /// Aggregate Lipschitz constant B; derived if absent.
    #[serde(default)]
    pub b_lipschitz: Option<f64>,
    /// Sup of aggregated derivative Hilbert-Schmidt norms; derived if absent.
    #[serde(default)]
    pub db_hs_sup: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub variant: String,
    /// Per-axis [lo, hi].
    pub support: Vec<[f64; 2]>,
}

fn default_seed() -> u64 {
    0
}
fn default_particles() -> usize {
    64
}
fn default_replicas() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlockConfig {
    pub dt: f64,
    pub t_horizon: f64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub save_every: Option<usize>,
    #[serde(default)]
    pub grid_per_axis: Option<usize>,
}

fn default_p_grid() -> Vec<f64> {
    vec![1.5, 2.0, 3.0, 4.0]
}
fn default_fit_window_fraction() -> f64 {
    0.5
}
fn default_epsilon_mono() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: u32,
    #[serde(default)]
    pub t_horizon: Option<f64>,
    #[serde(default)]
    pub replicas: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub contraction: Option<ContractionConfig>,
    /// Probe index (into the probes list) for the clustering diagnostic.
    #[serde(default)]
    pub clustering_probe: Option<usize>,
    #[serde(default)]
    pub martingale_decay: bool,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default = "default_fit_window_fraction")]
    pub fit_window_fraction: f64,
    #[serde(default = "default_epsilon_mono")]
    pub epsilon_mono: f64,
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            p_grid: default_p_grid(),
            fit_window_fraction: default_fit_window_fraction(),
            epsilon_mono: default_epsilon_mono(),
            probes: Vec::new(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Whole experiment file. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub density: DensityConfig,
    pub sim: SimBlockConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// A validated experiment: concrete model objects plus non-fatal warnings.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub density: DensityModel,
    pub sim: SimConfig,
    pub grid: QuadratureGrid,
    pub warnings: Vec<String>,
}

impl Experiment {
    /// Tracked initial points: quadrature nodes first, probes after.
    pub fn tracked_inits(&self) -> Vec<Vec<f64>> {
        let mut tracked: Vec<Vec<f64>> = (0..self.grid.len()).map(|g| self.grid.node(g).to_vec()).collect();
        for probe in &self.config.analysis.probes {
            tracked.push(probe.clone());
        }
        tracked
    }

    /// Point id of probe `i` in the tracked list.
    pub fn probe_point_id(&self, i: usize) -> usize {
        self.grid.len() + i
    }
}

fn parse_matrix(field: &str, rows: &[Vec<f64>], d: usize, violations: &mut Vec<String>) -> Mat {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        violations.push(format!("{field}: expected a {d}x{d} row-major matrix"));
        return Mat::zeros(d);
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        violations.push(format!("{field}: entries must be finite"));
        return Mat::zeros(d);
    }
    Mat::from_rows(rows)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        Error::Config(vec![format!("{}: {e}", path.display())])
    })?;
    Ok(config)
}

/// Validate every constraint and build the concrete experiment. All
/// violations are reported together; warnings do not block.
pub fn build_experiment(config: ExperimentConfig) -> Result<Experiment> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let d = config.model.d;
    if d == 0 {
        return Err(Error::Config(vec!["model.d: must be >= 1".into()]));
    }

    // Kernel.
    let kc = &config.model.kernel;
    let a_mat = parse_matrix("model.kernel.a_mat", &kc.a_mat, d, &mut violations);
    let kernel = match kc.variant.as_str() {
        "linear" => {
            if kc.beta.is_some() || kc.scale.is_some() {
                violations.push("model.kernel: beta/scale are only valid for the saturating variant".into());
            }
            InteractionKernel::linear(a_mat, kc.alpha)
        }
        "saturating" => {
            let beta = kc.beta.unwrap_or_else(|| {
                violations.push("model.kernel.beta: required for the saturating variant".into());
                0.0
            });
            let scale = kc.scale.unwrap_or_else(|| {
                violations.push("model.kernel.scale: required for the saturating variant".into());
                1.0
            });
            if scale <= 0.0 {
                violations.push(format!("model.kernel.scale: must be > 0, got {scale}"));
            }
            InteractionKernel::saturating(a_mat, beta, scale.max(f64::MIN_POSITIVE), kc.alpha)
        }
        other => {
            violations.push(format!("model.kernel.variant: unknown variant '{other}' (expected linear | saturating)"));
            InteractionKernel::linear(Mat::zeros(d), kc.alpha)
        }
    };
    let mut kernel = kernel;
    if let Some(l) = kc.lipschitz {
        kernel.lipschitz = l;
    }
    if let Some(s) = kc.dphi_sup {
        kernel.dphi_sup = s;
    }
    kernel.holder_delta = kc.holder_delta;
    if !(kc.holder_delta > 0.0 && kc.holder_delta <= 1.0) {
        violations.push(format!("model.kernel.holder_delta: must be in (0, 1], got {}", kc.holder_delta));
    }
    if kc.alpha < 0.0 {
        violations.push(format!("model.kernel.alpha: must be >= 0, got {}", kc.alpha));
    }
    if kc.alpha == 0.0 {
        warnings.push("model.kernel.alpha = 0: outside the dissipativity assumptions, contraction statements do not apply".into());
    }

    // Diffusion family.
    let mut kernels = Vec::new();
    for (k, dc) in config.model.diffusion.kernels.iter().enumerate() {
        match dc.variant.as_str() {
            "mean_reverting" => {
                let c_rows = dc.c_mat.clone().unwrap_or_else(|| {
                    violations.push(format!("model.diffusion[{k}].c_mat: required for mean_reverting"));
                    vec![vec![0.0; d]; d]
                });
                let d_rows = dc.d_mat.clone().unwrap_or_else(|| vec![vec![0.0; d]; d]);
                if dc.s_mat.is_some() || dc.profile.is_some() {
                    violations.push(format!("model.diffusion[{k}]: s_mat/profile are only valid for the frozen variant"));
                }
                let c_mat = parse_matrix(&format!("model.diffusion[{k}].c_mat"), &c_rows, d, &mut violations);
                let d_mat = parse_matrix(&format!("model.diffusion[{k}].d_mat"), &d_rows, d, &mut violations);
                kernels.push(DiffusionKernel::MeanReverting { c_mat, d_mat });
            }
            "frozen" => {
                let s_rows = dc.s_mat.clone().unwrap_or_else(|| {
                    violations.push(format!("model.diffusion[{k}].s_mat: required for frozen"));
                    vec![vec![0.0; d]; d]
                });
                let d_rows = dc.d_mat.clone().unwrap_or_else(|| vec![vec![0.0; d]; d]);
                if dc.c_mat.is_some() {
                    violations.push(format!("model.diffusion[{k}]: c_mat is only valid for the mean_reverting variant"));
                }
                let s_mat = parse_matrix(&format!("model.diffusion[{k}].s_mat"), &s_rows, d, &mut violations);
                let d_mat = parse_matrix(&format!("model.diffusion[{k}].d_mat"), &d_rows, d, &mut violations);
                let profile = match &dc.profile {
                    None => {
                        violations.push(format!("model.diffusion[{k}].profile: required for frozen"));
                        FrozenProfile::Tanh { weights: vec![0.0; d] }
                    }
                    Some(pc) => match pc.variant.as_str() {
                        "tanh" => {
                            let weights = pc.weights.clone().unwrap_or_else(|| {
                                violations.push(format!("model.diffusion[{k}].profile.weights: required for tanh"));
                                vec![0.0; d]
                            });
                            if weights.len() != d {
                                violations.push(format!("model.diffusion[{k}].profile.weights: expected {d} entries"));
                            }
                            FrozenProfile::Tanh { weights }
                        }
                        "bump" => {
                            let center = pc.center.clone().unwrap_or_else(|| {
                                violations.push(format!("model.diffusion[{k}].profile.center: required for bump"));
                                vec![0.0; d]
                            });
                            let width = pc.width.unwrap_or_else(|| {
                                violations.push(format!("model.diffusion[{k}].profile.width: required for bump"));
                                1.0
                            });
                            if center.len() != d {
                                violations.push(format!("model.diffusion[{k}].profile.center: expected {d} entries"));
                            }
                            if !(width > 0.0) {
                                violations.push(format!("model.diffusion[{k}].profile.width: must be > 0"));
                            }
                            FrozenProfile::Bump { center, width: width.max(f64::MIN_POSITIVE) }
                        }
                        other => {
                            violations.push(format!(
                                "model.diffusion[{k}].profile.variant: unknown variant '{other}' (expected tanh | bump)"
                            ));
                            FrozenProfile::Tanh { weights: vec![0.0; d] }
                        }
                    },
                };
                kernels.push(DiffusionKernel::Frozen { d_mat, s_mat, profile });
            }
            other => {
                violations.push(format!(
                    "model.diffusion[{k}].variant: unknown variant '{other}' (expected mean_reverting | frozen)"
                ));
            }
        }
    }
    if let Some(kt) = config.model.diffusion.k_truncation {
        if kernels.is_empty() || kt != kernels.len() - 1 {
            violations.push(format!(
                "model.diffusion.k_truncation: {kt} does not match the kernel list (len {} means K = {})",
                kernels.len(),
                kernels.len().saturating_sub(1)
            ));
        }
    }
    let mut diffusion = DiffusionFamily::new(kernels);
    if let Some(b) = config.model.diffusion.b_lipschitz {
        diffusion.b_lipschitz = b;
    }
    if let Some(s) = config.model.diffusion.db_hs_sup {
        diffusion.db_hs_sup = s;
    }

    // Density.
    let support_lo: Vec<f64> = config.density.support.iter().map(|r| r[0]).collect();
    let support_hi: Vec<f64> = config.density.support.iter().map(|r| r[1]).collect();
    if config.density.support.len() != d {
        violations.push(format!(
            "density.support: {} axes for a d = {d} model",
            config.density.support.len()
        ));
    }
    let density = match config.density.variant.as_str() {
        "uniform_box" => DensityModel::uniform(support_lo, support_hi),
        "product_bump" => DensityModel::bump(support_lo, support_hi),
        other => {
            violations.push(format!(
                "density.variant: unknown variant '{other}' (expected uniform_box | product_bump)"
            ));
            DensityModel::uniform(vec![0.0; d.max(1)], vec![1.0; d.max(1)])
        }
    };
    let density = match density {
        Ok(dm) => dm,
        Err(Error::Config(mut v)) => {
            violations.append(&mut v);
            DensityModel::uniform(vec![0.0; d.max(1)], vec![1.0; d.max(1)]).unwrap()
        }
        Err(e) => return Err(e),
    };

    // Simulation block.
    let n_steps_estimate = if config.sim.dt > 0.0 {
        (config.sim.t_horizon / config.sim.dt).round().max(1.0) as usize
    } else {
        1
    };
    let save_every = config.sim.save_every.unwrap_or_else(|| default_save_every(n_steps_estimate));
    let sim = SimConfig {
        dt: config.sim.dt,
        t_horizon: config.sim.t_horizon,
        n_particles: config.sim.particles,
        n_replicas: config.sim.replicas,
        seed: config.sim.seed,
        save_every,
    };
    if let Err(Error::Config(mut v)) = sim.n_steps() {
        violations.append(&mut v);
    }

    // Stability cap: reject steps that can push the variational factor near
    // singularity for the declared derivative bound.
    if config.sim.dt > 0.0 && config.sim.dt * kernel.dphi_sup > 0.5 {
        violations.push(format!(
            "sim.dt: dt * sup|Dphi| = {} exceeds the stability cap 0.5",
            config.sim.dt * kernel.dphi_sup
        ));
    }

    let grid_per_axis = config.sim.grid_per_axis.unwrap_or(match d {
        1 => 64,
        2 => 32,
        _ => 16,
    });

    // Analysis block.
    let ac = &config.analysis;
    if ac.p_grid.is_empty() {
        violations.push("analysis.p_grid: must not be empty".into());
    }
    for &p in &ac.p_grid {
        if p < 1.0 {
            violations.push(format!("analysis.p_grid: orders must be >= 1, got {p}"));
        }
    }
    if ac.p_grid.windows(2).any(|w| w[0] >= w[1]) {
        violations.push("analysis.p_grid: orders must be strictly increasing".into());
    }
    if !(ac.fit_window_fraction > 0.0 && ac.fit_window_fraction <= 1.0) {
        violations.push(format!(
            "analysis.fit_window_fraction: must be in (0, 1], got {}",
            ac.fit_window_fraction
        ));
    }
    if !(ac.epsilon_mono > 0.0) {
        violations.push(format!("analysis.epsilon_mono: must be > 0, got {}", ac.epsilon_mono));
    }
    for (i, probe) in ac.probes.iter().enumerate() {
        if probe.len() != d {
            violations.push(format!("analysis.probes[{i}]: expected {d} coordinates"));
        }
    }
    if let Some(cd) = &ac.diagnostics.contraction {
        if cd.u.len() != d || cd.v.len() != d {
            violations.push("analysis.diagnostics.contraction: u and v must have d coordinates".into());
        }
        if cd.p == 0 {
            violations.push("analysis.diagnostics.contraction.p: must be >= 1".into());
        }
    }
    if let Some(pi) = ac.diagnostics.clustering_probe {
        if pi >= ac.probes.len() {
            violations.push(format!(
                "analysis.diagnostics.clustering_probe: index {pi} but only {} probes",
                ac.probes.len()
            ));
        }
    }

    let model = match ModelSpec::new(d, kernel, diffusion) {
        Ok(m) => m,
        Err(Error::Config(mut v)) => {
            violations.append(&mut v);
            return Err(Error::Config(violations));
        }
        Err(e) => return Err(e),
    };

    let grid = match QuadratureGrid::new(&density, grid_per_axis) {
        Ok(g) => g,
        Err(Error::Config(mut v)) => {
            violations.append(&mut v);
            return Err(Error::Config(violations));
        }
        Err(Error::Unsupported(msg)) => {
            violations.push(format!("sim.grid_per_axis: {msg}"));
            return Err(Error::Config(violations));
        }
        Err(e) => return Err(e),
    };

    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }

    // Non-fatal range warnings.
    if model.kernel.alpha > 0.0 {
        if let Ok(report) = dissipativity_report(&model, 1.0) {
            if let Some(cd) = &config.analysis.diagnostics.contraction {
                if !report.admits_moment(cd.p) {
                    warnings.push(format!(
                        "contraction diagnostic requests p = {} but the moment lemma admits p_max = {:?}; the bound need not hold",
                        cd.p, report.p_max
                    ));
                }
            }
            if report.p_max == Some(0) {
                warnings.push("model is outside the moment contraction range (p_max = 0)".into());
            }
        }
    }

    Ok(Experiment { config, model, density, sim, grid, warnings })
}

/// Pick a snapshot stride that divides the step count, aiming for about 40
/// saved frames.
fn default_save_every(n_steps: usize) -> usize {
    divisor_near(n_steps, n_steps / 40)
}

/// Largest divisor of `n_steps` that is at most `target` (at least 1).
pub(crate) fn divisor_near(n_steps: usize, target: usize) -> usize {
    for s in (1..=target.max(1)).rev() {
        if n_steps % s == 0 {
            return s;
        }
    }
    1
}

/// Parse and fully validate a config file.
pub fn load_experiment(path: &Path) -> Result<Experiment> {
    build_experiment(parse_config(path)?)
}

/// Hex SHA-256 of the canonical (struct-ordered) JSON encoding.
pub fn config_hash(config: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
