//! Interaction drifts and diffusion families with measure-dependent
//! coefficients, their spatial derivatives and divergences, and the
//! well-posedness / dissipativity report.
//!
//! The drift is the mean-field convolution `a(u, mu) = (1/N) sum_i phi(u - v_i)`
//! against an empirical measure. Diffusion kernels map `(u, measure summary)`
//! to a `d x d` matrix whose columns are the coefficients of the individual
//! Brownian coordinates. Both shipped drift kernels and both shipped diffusion
//! variants have rank-one column Jacobians, so divergences and squared traces
//! come in closed form; generic assembly from `diffusion_jacobian` is kept as
//! the test oracle.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use rand::Rng;

/// Functional form of the interaction kernel `phi`.
#[derive(Clone, Debug)]
pub enum KernelShape {
    /// `phi(z) = -A z`
    Linear { a_mat: Mat },
    /// `phi(z) = -A z - beta * z / (1 + |z|^2 / s^2)`
    Saturating { a_mat: Mat, beta: f64, scale: f64 },
}

/// Interaction kernel plus declared analytic metadata. The constants are
/// declared rather than derived; `dissipativity_report` spot-checks them.
#[derive(Clone, Debug)]
pub struct InteractionKernel {
    pub shape: KernelShape,
    /// Dissipativity constant: `<u-v, phi(u)-phi(v)> <= -alpha |u-v|^2`.
    pub alpha: f64,
    /// Lipschitz constant of `phi`.
    pub lipschitz: f64,
    /// Sup-norm bound of `D phi`.
    pub dphi_sup: f64,
    /// Hoelder exponent of `D phi`, in (0, 1].
    pub holder_delta: f64,
}

impl InteractionKernel {
    pub fn linear(a_mat: Mat, alpha: f64) -> InteractionKernel {
        let bound = a_mat.frobenius();
        InteractionKernel {
            shape: KernelShape::Linear { a_mat },
            alpha,
            lipschitz: bound,
            dphi_sup: bound,
            holder_delta: 1.0,
        }
    }

    /// For the saturating kernel the worst slope of the saturation term is
    /// -beta/8 (attained at |z| = sqrt(3) s), so a valid declaration is
    /// `alpha = lambda_min(sym A) - beta/8`.
    pub fn saturating(a_mat: Mat, beta: f64, scale: f64, alpha: f64) -> InteractionKernel {
        let bound = a_mat.frobenius() + beta.abs();
        InteractionKernel {
            shape: KernelShape::Saturating { a_mat, beta, scale },
            alpha,
            lipschitz: bound,
            dphi_sup: bound,
            holder_delta: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            KernelShape::Linear { a_mat } => a_mat.n(),
            KernelShape::Saturating { a_mat, .. } => a_mat.n(),
        }
    }

    /// phi(z), written into `out`.
    pub fn phi(&self, z: &[f64], out: &mut [f64]) {
        match &self.shape {
            KernelShape::Linear { a_mat } => {
                a_mat.matvec(z, out);
                for x in out.iter_mut() {
                    *x = -*x;
                }
            }
            KernelShape::Saturating { a_mat, beta, scale } => {
                a_mat.matvec(z, out);
                let s2 = scale * scale;
                let w = s2 + linalg::dot(z, z);
                let f = beta * s2 / w;
                for (o, zi) in out.iter_mut().zip(z) {
                    *o = -*o - f * zi;
                }
            }
        }
    }

    /// D phi(z), written into `out`.
    pub fn dphi(&self, z: &[f64], out: &mut Mat) {
        match &self.shape {
            KernelShape::Linear { a_mat } => {
                out.fill_zero();
                out.add_assign_scaled(a_mat, -1.0);
            }
            KernelShape::Saturating { a_mat, beta, scale } => {
                let d = a_mat.n();
                let s2 = scale * scale;
                let w = s2 + linalg::dot(z, z);
                let c1 = beta * s2 / w;
                let c2 = 2.0 * beta * s2 / (w * w);
                out.fill_zero();
                out.add_assign_scaled(a_mat, -1.0);
                for i in 0..d {
                    out.add_at(i, i, -c1);
                    for j in 0..d {
                        out.add_at(i, j, c2 * z[i] * z[j]);
                    }
                }
            }
        }
    }

    /// div phi(z) = tr(D phi(z)).
    pub fn div_phi(&self, z: &[f64]) -> f64 {
        match &self.shape {
            KernelShape::Linear { a_mat } => -a_mat.trace(),
            KernelShape::Saturating { a_mat, beta, scale } => {
                let d = a_mat.n() as f64;
                let s2 = scale * scale;
                let r2 = linalg::dot(z, z);
                let w = s2 + r2;
                -a_mat.trace() - beta * s2 * (d * s2 + (d - 2.0) * r2) / (w * w)
            }
        }
    }
}

/// Smooth scalar profile with bounded derivative, used by frozen diffusions.
#[derive(Clone, Debug)]
pub enum FrozenProfile {
    /// `tanh(<w, u>)`
    Tanh { weights: Vec<f64> },
    /// `exp(-|u - c|^2 / (2 width^2))`
    Bump { center: Vec<f64>, width: f64 },
}

impl FrozenProfile {
    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            FrozenProfile::Tanh { weights } => linalg::dot(weights, u).tanh(),
            FrozenProfile::Bump { center, width } => {
                let r2: f64 = u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn gradient(&self, u: &[f64], out: &mut [f64]) {
        match self {
            FrozenProfile::Tanh { weights } => {
                let t = linalg::dot(weights, u).tanh();
                let f = 1.0 - t * t;
                for (o, w) in out.iter_mut().zip(weights) {
                    *o = f * w;
                }
            }
            FrozenProfile::Bump { center, width } => {
                let v = self.value(u);
                let w2 = width * width;
                for ((o, ui), ci) in out.iter_mut().zip(u).zip(center) {
                    *o = -v * (ui - ci) / w2;
                }
            }
        }
    }

    /// Supremum of |gradient| over all of space.
    pub fn gradient_sup(&self) -> f64 {
        match self {
            FrozenProfile::Tanh { weights } => linalg::norm(weights),
            FrozenProfile::Bump { width, .. } => (-0.5f64).exp() / width,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FrozenProfile::Tanh { weights } => weights.len(),
            FrozenProfile::Bump { center, .. } => center.len(),
        }
    }
}

/// One diffusion kernel `b_k`.
#[derive(Clone, Debug)]
pub enum DiffusionKernel {
    /// `b(u, mu) = diag(C (m_mu - u)) + D`: the vector `C (m_mu - u)` placed on
    /// the diagonal, plus a constant matrix. Vanishes at `u = m_mu` when `D = 0`.
    MeanReverting { c_mat: Mat, d_mat: Mat },
    /// `b(u) = D + S * profile(u)` with a smooth scalar profile; ignores the measure.
    Frozen { d_mat: Mat, s_mat: Mat, profile: FrozenProfile },
}

impl DiffusionKernel {
    pub fn dim(&self) -> usize {
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => c_mat.n(),
            DiffusionKernel::Frozen { d_mat, .. } => d_mat.n(),
        }
    }

    /// Contribution of this kernel to `B^2` (the l^2-aggregated Lipschitz
    /// constant; operator and Hilbert-Schmidt aggregates coincide because
    /// the column Jacobians are rank one).
    pub fn lipschitz_sq(&self) -> f64 {
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => {
                c_mat.data().iter().map(|x| x * x).sum()
            }
            DiffusionKernel::Frozen { s_mat, profile, .. } => {
                let g = profile.gradient_sup();
                g * g * s_mat.data().iter().map(|x| x * x).sum::<f64>()
            }
        }
    }

    /// Full matrix `b_k(u, mu)` written into `out`.
    pub fn eval(&self, u: &[f64], view: &MeasureView, out: &mut Mat, scratch: &mut [f64]) {
        match self {
            DiffusionKernel::MeanReverting { c_mat, d_mat } => {
                let d = c_mat.n();
                for i in 0..d {
                    scratch[i] = view.mean[i] - u[i];
                }
                let (w, rest) = scratch.split_at_mut(d);
                c_mat.matvec(w, &mut rest[..d]);
                out.fill_zero();
                out.add_assign_scaled(d_mat, 1.0);
                for i in 0..d {
                    out.add_at(i, i, rest[i]);
                }
            }
            DiffusionKernel::Frozen { d_mat, s_mat, profile } => {
                let v = profile.value(u);
                out.fill_zero();
                out.add_assign_scaled(d_mat, 1.0);
                out.add_assign_scaled(s_mat, v);
            }
        }
    }

    /// out += b_k(u, mu) * db  (noise application without materializing b_k).
    pub fn add_noise_into(&self, u: &[f64], view: &MeasureView, db: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match self {
            DiffusionKernel::MeanReverting { c_mat, d_mat } => {
                let d = c_mat.n();
                for i in 0..d {
                    scratch[i] = view.mean[i] - u[i];
                }
                let (w, rest) = scratch.split_at_mut(d);
                c_mat.matvec(w, &mut rest[..d]);
                for i in 0..d {
                    out[i] += rest[i] * db[i];
                }
                d_mat.matvec(db, &mut rest[..d]);
                linalg::axpy(out, 1.0, &rest[..d]);
            }
            DiffusionKernel::Frozen { d_mat, s_mat, profile } => {
                let d = d_mat.n();
                let v = profile.value(u);
                let tmp = &mut scratch[..d];
                d_mat.matvec(db, tmp);
                linalg::axpy(out, 1.0, tmp);
                s_mat.matvec(db, tmp);
                linalg::axpy(out, v, tmp);
            }
        }
    }

    /// Jacobian of column `p` (0-based), written into `out`.
    pub fn column_jacobian(&self, u: &[f64], _view: &MeasureView, p: usize, out: &mut Mat, scratch: &mut [f64]) {
        out.fill_zero();
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => {
                // column p of b is e_p * (C (m - u))_p, so D b^{.,p} = -e_p (x) C_{p,.}
                let d = c_mat.n();
                for j in 0..d {
                    out.set(p, j, -c_mat.at(p, j));
                }
            }
            DiffusionKernel::Frozen { s_mat, profile, .. } => {
                // column p of b is D^{.,p} + S^{.,p} profile(u): D b^{.,p} = S^{.,p} (x) grad profile
                let d = s_mat.n();
                profile.gradient(u, &mut scratch[..d]);
                for i in 0..d {
                    let si = s_mat.at(i, p);
                    for j in 0..d {
                        out.set(i, j, si * scratch[j]);
                    }
                }
            }
        }
    }

    /// Divergence of every column in one pass: `out[p] = div b^{.,p}(u, mu)`.
    pub fn column_divergences(&self, u: &[f64], _view: &MeasureView, out: &mut [f64], scratch: &mut [f64]) {
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => {
                let d = c_mat.n();
                for p in 0..d {
                    out[p] = -c_mat.at(p, p);
                }
            }
            DiffusionKernel::Frozen { s_mat, profile, .. } => {
                let d = s_mat.n();
                profile.gradient(u, &mut scratch[..d]);
                for p in 0..d {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += s_mat.at(i, p) * scratch[i];
                    }
                    out[p] = s;
                }
            }
        }
    }

    /// `sum_p tr((D b^{.,p})^2)` in closed form.
    pub fn trace_square_sum(&self, u: &[f64], _view: &MeasureView, scratch: &mut [f64]) -> f64 {
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => {
                let d = c_mat.n();
                (0..d).map(|p| c_mat.at(p, p) * c_mat.at(p, p)).sum()
            }
            DiffusionKernel::Frozen { s_mat, profile, .. } => {
                // tr((v (x) w)^2) = <v, w>^2 per column.
                let d = s_mat.n();
                profile.gradient(u, &mut scratch[..d]);
                let mut total = 0.0;
                for p in 0..d {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += s_mat.at(i, p) * scratch[i];
                    }
                    total += s * s;
                }
                total
            }
        }
    }

    /// out += sum_p D b^{.,p}(u, mu) * db_p  (the Jacobian noise factor).
    pub fn add_jacobian_noise(&self, u: &[f64], _view: &MeasureView, db: &[f64], out: &mut Mat, scratch: &mut [f64]) {
        match self {
            DiffusionKernel::MeanReverting { c_mat, .. } => {
                // sum_p e_p (-C_{p,.}) db_p = -diag(db) C
                let d = c_mat.n();
                for p in 0..d {
                    for j in 0..d {
                        out.add_at(p, j, -db[p] * c_mat.at(p, j));
                    }
                }
            }
            DiffusionKernel::Frozen { s_mat, profile, .. } => {
                // sum_p (S^{.,p} db_p) (x) grad profile = (S db) (x) grad profile
                let d = s_mat.n();
                let (grad, rest) = scratch.split_at_mut(d);
                profile.gradient(u, grad);
                s_mat.matvec(db, &mut rest[..d]);
                for i in 0..d {
                    for j in 0..d {
                        out.add_at(i, j, rest[i] * grad[j]);
                    }
                }
            }
        }
    }
}

/// Finite family of diffusion kernels plus declared aggregate constants.
#[derive(Clone, Debug)]
pub struct DiffusionFamily {
    pub kernels: Vec<DiffusionKernel>,
    /// `B`: l^2-aggregate Lipschitz constant of the family.
    pub b_lipschitz: f64,
    /// Sup of the l^2-aggregated derivative Hilbert-Schmidt norms.
    pub db_hs_sup: f64,
}

impl DiffusionFamily {
    /// Build with metadata derived from the closed-form suprema of the
    /// shipped kernel variants.
    pub fn new(kernels: Vec<DiffusionKernel>) -> DiffusionFamily {
        let b2: f64 = kernels.iter().map(|k| k.lipschitz_sq()).sum();
        let b = b2.sqrt();
        DiffusionFamily { kernels, b_lipschitz: b, db_hs_sup: b }
    }

    pub fn with_declared(kernels: Vec<DiffusionKernel>, b_lipschitz: f64, db_hs_sup: f64) -> DiffusionFamily {
        DiffusionFamily { kernels, b_lipschitz, db_hs_sup }
    }

    pub fn none() -> DiffusionFamily {
        DiffusionFamily { kernels: Vec::new(), b_lipschitz: 0.0, db_hs_sup: 0.0 }
    }

    pub fn k_count(&self) -> usize {
        self.kernels.len()
    }
}

/// Read-only view of an empirical measure: atom positions plus the cached mean.
#[derive(Clone, Copy, Debug)]
pub struct MeasureView<'a> {
    pub d: usize,
    pub n: usize,
    pub positions: &'a [f64],
    pub mean: &'a [f64],
}

impl<'a> MeasureView<'a> {
    pub fn new(d: usize, positions: &'a [f64], mean: &'a [f64]) -> MeasureView<'a> {
        debug_assert!(d > 0 && positions.len() % d == 0 && mean.len() == d);
        MeasureView { d, n: positions.len() / d, positions, mean }
    }

    #[inline]
    pub fn position(&self, i: usize) -> &'a [f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }
}

/// Full model: dimension, interaction kernel, diffusion family.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub d: usize,
    pub kernel: InteractionKernel,
    pub diffusion: DiffusionFamily,
}

/// Reusable buffers for coefficient evaluation; one per worker.
#[derive(Clone, Debug)]
pub struct CoeffScratch {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub m1: Mat,
}

impl CoeffScratch {
    pub fn new(d: usize) -> CoeffScratch {
        CoeffScratch { v1: vec![0.0; 2 * d], v2: vec![0.0; 2 * d], m1: Mat::zeros(d) }
    }
}

impl ModelSpec {
    pub fn new(d: usize, kernel: InteractionKernel, diffusion: DiffusionFamily) -> Result<ModelSpec> {
        let mut violations = Vec::new();
        if d == 0 {
            violations.push("model.d: dimension must be >= 1".to_string());
        }
        if kernel.dim() != d {
            violations.push(format!("model.kernel: matrix is {}x{0}, expected {d}x{d}", kernel.dim()));
        }
        for (k, ker) in diffusion.kernels.iter().enumerate() {
            if ker.dim() != d {
                violations.push(format!("model.diffusion[{k}]: matrix is {}x{0}, expected {d}x{d}", ker.dim()));
            }
            if let DiffusionKernel::Frozen { profile, .. } = ker {
                if profile.dim() != d {
                    violations.push(format!("model.diffusion[{k}]: profile dimension {} != {d}", profile.dim()));
                }
            }
        }
        if violations.is_empty() {
            Ok(ModelSpec { d, kernel, diffusion })
        } else {
            Err(Error::Config(violations))
        }
    }

    pub fn k_count(&self) -> usize {
        self.diffusion.k_count()
    }

    fn check_args(&self, u: &[f64], view: &MeasureView) -> Result<()> {
        if u.len() != self.d || view.d != self.d {
            return Err(Error::Dimension { expected: self.d, got: if u.len() != self.d { u.len() } else { view.d } });
        }
        if view.n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Ok(())
    }

    /// `a(u, mu_N) = (1/N) sum_i phi(u - v_i)`, written into `out`.
    ///
    /// The linear part is evaluated against the cached mean; only the
    /// saturating correction loops over atoms.
    pub fn drift_eval_into(&self, u: &[f64], view: &MeasureView, out: &mut [f64], scratch: &mut CoeffScratch) {
        let d = self.d;
        let z = &mut scratch.v1[..d];
        for i in 0..d {
            z[i] = u[i] - view.mean[i];
        }
        match &self.kernel.shape {
            KernelShape::Linear { a_mat } => {
                a_mat.matvec(z, out);
                for x in out.iter_mut() {
                    *x = -*x;
                }
            }
            KernelShape::Saturating { a_mat, beta, scale } => {
                a_mat.matvec(z, out);
                for x in out.iter_mut() {
                    *x = -*x;
                }
                let s2 = scale * scale;
                let inv_n = 1.0 / view.n as f64;
                let zi = &mut scratch.v2[..d];
                for i in 0..view.n {
                    let v = view.position(i);
                    let mut r2 = 0.0;
                    for j in 0..d {
                        zi[j] = u[j] - v[j];
                        r2 += zi[j] * zi[j];
                    }
                    let f = beta * s2 / (s2 + r2) * inv_n;
                    for j in 0..d {
                        out[j] -= f * zi[j];
                    }
                }
            }
        }
    }

    /// `D a(u, mu_N) = (1/N) sum_i D phi(u - v_i)`, written into `out`.
    pub fn drift_jacobian_into(&self, u: &[f64], view: &MeasureView, out: &mut Mat, scratch: &mut CoeffScratch) {
        match &self.kernel.shape {
            KernelShape::Linear { a_mat } => {
                out.fill_zero();
                out.add_assign_scaled(a_mat, -1.0);
            }
            KernelShape::Saturating { a_mat, beta, scale } => {
                let d = self.d;
                out.fill_zero();
                out.add_assign_scaled(a_mat, -1.0);
                let s2 = scale * scale;
                let inv_n = 1.0 / view.n as f64;
                let z = &mut scratch.v1[..d];
                for i in 0..view.n {
                    let v = view.position(i);
                    let mut r2 = 0.0;
                    for j in 0..d {
                        z[j] = u[j] - v[j];
                        r2 += z[j] * z[j];
                    }
                    let w = s2 + r2;
                    let c1 = beta * s2 / w * inv_n;
                    let c2 = 2.0 * beta * s2 / (w * w) * inv_n;
                    for j in 0..d {
                        out.add_at(j, j, -c1);
                        for l in 0..d {
                            out.add_at(j, l, c2 * z[j] * z[l]);
                        }
                    }
                }
            }
        }
    }

    /// `div a(u, mu_N)`.
    pub fn drift_divergence_value(&self, u: &[f64], view: &MeasureView, scratch: &mut CoeffScratch) -> f64 {
        match &self.kernel.shape {
            KernelShape::Linear { a_mat } => -a_mat.trace(),
            KernelShape::Saturating { .. } => {
                let d = self.d;
                let inv_n = 1.0 / view.n as f64;
                let z = &mut scratch.v1[..d];
                let mut total = 0.0;
                for i in 0..view.n {
                    let v = view.position(i);
                    for j in 0..d {
                        z[j] = u[j] - v[j];
                    }
                    total += self.kernel.div_phi(z) * inv_n;
                }
                total
            }
        }
    }

    /// Drift term of the log-determinant exponent:
    /// `div a(u, mu) - 1/2 sum_k sum_p tr((D b_k^{.,p}(u, mu))^2)`.
    pub fn liouville_drift_integrand_value(&self, u: &[f64], view: &MeasureView, scratch: &mut CoeffScratch) -> f64 {
        let mut v = self.drift_divergence_value(u, view, scratch);
        for kernel in &self.diffusion.kernels {
            v -= 0.5 * kernel.trace_square_sum(u, view, &mut scratch.v2);
        }
        v
    }

    /// `sum_k sum_p div b_k^{.,p}(u, mu) * dB_k^p` for the martingale part.
    pub fn noise_divergence_dot(&self, u: &[f64], view: &MeasureView, noise: &crate::noise::NoiseDraw, scratch: &mut CoeffScratch) -> f64 {
        let d = self.d;
        let mut total = 0.0;
        for (k, kernel) in self.diffusion.kernels.iter().enumerate() {
            kernel.column_divergences(u, view, &mut scratch.v1[..d], &mut scratch.v2);
            let db = noise.block(k);
            total += linalg::dot(&scratch.v1[..d], db);
        }
        total
    }
}

// Spec-facing operations with full precondition checking. Column indices `p`
// are 1-based here, matching the usual notation for noise coordinates.

pub fn drift_eval(model: &ModelSpec, u: &[f64], view: &MeasureView) -> Result<Vec<f64>> {
    model.check_args(u, view)?;
    let mut out = vec![0.0; model.d];
    let mut scratch = CoeffScratch::new(model.d);
    model.drift_eval_into(u, view, &mut out, &mut scratch);
    Ok(out)
}

pub fn drift_jacobian(model: &ModelSpec, u: &[f64], view: &MeasureView) -> Result<Mat> {
    model.check_args(u, view)?;
    let mut out = Mat::zeros(model.d);
    let mut scratch = CoeffScratch::new(model.d);
    model.drift_jacobian_into(u, view, &mut out, &mut scratch);
    Ok(out)
}

pub fn drift_divergence(model: &ModelSpec, u: &[f64], view: &MeasureView) -> Result<f64> {
    model.check_args(u, view)?;
    let mut scratch = CoeffScratch::new(model.d);
    Ok(model.drift_divergence_value(u, view, &mut scratch))
}

fn check_kp(model: &ModelSpec, k: usize, p: usize) -> Result<usize> {
    if k >= model.k_count() {
        return Err(Error::KernelIndex { index: k, len: model.k_count() });
    }
    if p == 0 || p > model.d {
        return Err(Error::ColumnIndex { index: p, dim: model.d });
    }
    Ok(p - 1)
}

pub fn diffusion_eval(model: &ModelSpec, k: usize, u: &[f64], view: &MeasureView) -> Result<Mat> {
    model.check_args(u, view)?;
    if k >= model.k_count() {
        return Err(Error::KernelIndex { index: k, len: model.k_count() });
    }
    let mut out = Mat::zeros(model.d);
    let mut scratch = vec![0.0; 2 * model.d];
    model.diffusion.kernels[k].eval(u, view, &mut out, &mut scratch);
    Ok(out)
}

pub fn diffusion_jacobian(model: &ModelSpec, k: usize, p: usize, u: &[f64], view: &MeasureView) -> Result<Mat> {
    model.check_args(u, view)?;
    let p0 = check_kp(model, k, p)?;
    let mut out = Mat::zeros(model.d);
    let mut scratch = vec![0.0; 2 * model.d];
    model.diffusion.kernels[k].column_jacobian(u, view, p0, &mut out, &mut scratch);
    Ok(out)
}

pub fn diffusion_divergence(model: &ModelSpec, k: usize, p: usize, u: &[f64], view: &MeasureView) -> Result<f64> {
    model.check_args(u, view)?;
    let p0 = check_kp(model, k, p)?;
    let mut cols = vec![0.0; model.d];
    let mut scratch = vec![0.0; 2 * model.d];
    model.diffusion.kernels[k].column_divergences(u, view, &mut cols, &mut scratch);
    Ok(cols[p0])
}

pub fn liouville_drift_integrand(model: &ModelSpec, u: &[f64], view: &MeasureView) -> Result<f64> {
    model.check_args(u, view)?;
    let mut scratch = CoeffScratch::new(model.d);
    Ok(model.liouville_drift_integrand_value(u, view, &mut scratch))
}

/// Largest moment order admitted by the contraction lemma plus numeric
/// spot-checks of the declared constants.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct WellPosednessReport {
    pub alpha: f64,
    pub b_lipschitz: f64,
    /// Largest integer `p >= 1` with `2 alpha - B^2 (2p - 1) > 0`;
    /// `None` means unbounded (B = 0). `Some(0)` flags the model as outside
    /// the moment lemma's range.
    pub p_max: Option<u32>,
    pub q: f64,
    /// `2 alpha - B^2 (4q - 1)` at the supplied q.
    pub a5_margin: f64,
    pub a5_margin_ok: bool,
    pub a1_ok: bool,
    pub a2_ok: bool,
    pub dissipativity_ok: bool,
    pub divergence_ok: bool,
}

impl WellPosednessReport {
    pub fn admits_moment(&self, p: u32) -> bool {
        match self.p_max {
            None => true,
            Some(pm) => p <= pm,
        }
    }
}

/// Numerical spot-check of dissipativity, divergence and derivative bounds on
/// random points, plus the exact moment-order arithmetic.
pub fn dissipativity_report(model: &ModelSpec, q: f64) -> Result<WellPosednessReport> {
    let alpha = model.kernel.alpha;
    if alpha <= 0.0 {
        return Err(Error::InvalidModel(format!(
            "dissipativity constant alpha = {alpha} must be positive"
        )));
    }
    let b = model.diffusion.b_lipschitz;
    let d = model.d;

    let p_max = if b == 0.0 {
        None
    } else {
        let mut p = 0u32;
        while 2.0 * alpha - b * b * (2.0 * (p + 1) as f64 - 1.0) > 0.0 {
            p += 1;
            if p > 1_000_000 {
                break;
            }
        }
        Some(p)
    };

    let a5_margin = 2.0 * alpha - b * b * (4.0 * q - 1.0);

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x5eed_5eed);
    let pt = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
    };

    // (A5) pairwise dissipativity of phi.
    let mut dissipativity_ok = true;
    let mut buf_u = vec![0.0; d];
    let mut buf_v = vec![0.0; d];
    for _ in 0..1000 {
        let u = pt(&mut rng);
        let v = pt(&mut rng);
        model.kernel.phi(&u, &mut buf_u);
        model.kernel.phi(&v, &mut buf_v);
        let mut inner = 0.0;
        let mut dist2 = 0.0;
        for i in 0..d {
            inner += (u[i] - v[i]) * (buf_u[i] - buf_v[i]);
            dist2 += (u[i] - v[i]) * (u[i] - v[i]);
        }
        if inner > -alpha * dist2 + 1e-12 {
            dissipativity_ok = false;
            break;
        }
    }

    // div phi <= -d alpha everywhere.
    let mut divergence_ok = true;
    for _ in 0..1000 {
        let u = pt(&mut rng);
        if model.kernel.div_phi(&u) > -(d as f64) * alpha + 1e-12 {
            divergence_ok = false;
            break;
        }
    }

    // (A2) iii: aggregated derivative Hilbert-Schmidt norms within declaration.
    let mut a2_ok = true;
    {
        let atoms: Vec<f64> = (0..8 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean = mean_of(&atoms, d);
        let view = MeasureView::new(d, &atoms, &mean);
        let mut jac = Mat::zeros(d);
        let mut scratch = vec![0.0; 2 * d];
        for _ in 0..200 {
            let u = pt(&mut rng);
            let mut hs2 = 0.0;
            for kernel in &model.diffusion.kernels {
                for p in 0..d {
                    kernel.column_jacobian(&u, &view, p, &mut jac, &mut scratch);
                    hs2 += jac.data().iter().map(|x| x * x).sum::<f64>();
                }
            }
            let hs = hs2.sqrt();
            let cap = model.diffusion.db_hs_sup.min(b * (d as f64).sqrt());
            if hs > cap * (1.0 + 1e-9) + 1e-12 {
                a2_ok = false;
                break;
            }
        }
    }

    // (A1) Lipschitz and growth, sampled. The bounded-cost metric gamma under-
    // measures Euclidean displacement on a box of diameter D by at most (1+D),
    // hence the slack factor.
    let mut a1_ok = true;
    {
        let diam = 4.0 * (d as f64).sqrt();
        let slack = 1.0 + diam;
        let c_decl = model.kernel.lipschitz + model.diffusion.b_lipschitz;
        let mut scratch = CoeffScratch::new(d);
        let mut b_u = Mat::zeros(d);
        let mut b_v = Mat::zeros(d);
        let mut mscr = vec![0.0; 2 * d];
        for _ in 0..100 {
            let m = 6;
            let atoms_a: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let atoms_b: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mean_a = mean_of(&atoms_a, d);
            let mean_b = mean_of(&atoms_b, d);
            let va = MeasureView::new(d, &atoms_a, &mean_a);
            let vb = MeasureView::new(d, &atoms_b, &mean_b);
            let u = pt(&mut rng);
            let v = pt(&mut rng);
            let mut au = vec![0.0; d];
            let mut av = vec![0.0; d];
            model.drift_eval_into(&u, &va, &mut au, &mut scratch);
            model.drift_eval_into(&v, &vb, &mut av, &mut scratch);
            let mut hs2 = 0.0;
            for kernel in &model.diffusion.kernels {
                kernel.eval(&u, &va, &mut b_u, &mut mscr);
                kernel.eval(&v, &vb, &mut b_v, &mut mscr);
                hs2 += b_u
                    .data()
                    .iter()
                    .zip(b_v.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
            let lhs = linalg::dist(&au, &av) + hs2.sqrt();
            let ma = crate::gamma::EmpiricalMeasure::new(d, atoms_a.clone())?;
            let mb = crate::gamma::EmpiricalMeasure::new(d, atoms_b.clone())?;
            let g = crate::gamma::gamma_empirical(&ma, &mb)?;
            let rhs = c_decl * slack * (linalg::dist(&u, &v) + g) + 1e-9;
            if lhs > rhs {
                a1_ok = false;
                break;
            }
            // Linear growth in |u|: |a| + aggregated |b| <= C (1 + |u|).
            let mut hs2_abs = 0.0;
            for kernel in &model.diffusion.kernels {
                kernel.eval(&u, &va, &mut b_u, &mut mscr);
                hs2_abs += b_u.data().iter().map(|x| x * x).sum::<f64>();
            }
            // The affine offsets a(0, mu) and b(0, mu) on the sample box are
            // bounded by the Lipschitz constants times its diameter.
            let growth = linalg::norm(&au) + hs2_abs.sqrt();
            if growth > c_decl * (1.0 + slack) * (1.0 + linalg::norm(&u)) + 1e-9 {
                a1_ok = false;
                break;
            }
        }
    }

    Ok(WellPosednessReport {
        alpha,
        b_lipschitz: b,
        p_max,
        q,
        a5_margin,
        a5_margin_ok: a5_margin > 0.0,
        a1_ok,
        a2_ok,
        dissipativity_ok,
        divergence_ok,
    })
}

pub(crate) fn mean_of(flat: &[f64], d: usize) -> Vec<f64> {
    let n = flat.len() / d;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += flat[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    struct TestMeasure {
        d: usize,
        positions: Vec<f64>,
        mean: Vec<f64>,
    }

    impl TestMeasure {
        fn new(d: usize, positions: Vec<f64>) -> TestMeasure {
            let mean = mean_of(&positions, d);
            TestMeasure { d, positions, mean }
        }
        fn view(&self) -> MeasureView<'_> {
            MeasureView::new(self.d, &self.positions, &self.mean)
        }
    }

    fn random_points(rng: &mut ChaCha12Rng, d: usize, n: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    fn saturating_model_1d() -> ModelSpec {
        // phi(z) = -z - z / (1 + z^2): A = 1, beta = 1, scale = 1.
        ModelSpec::new(
            1,
            InteractionKernel::saturating(Mat::scalar(1.0), 1.0, 1.0, 1.0 - 1.0 / 8.0),
            DiffusionFamily::none(),
        )
        .unwrap()
    }

    fn saturating_model(d: usize) -> ModelSpec {
        let mut a = Mat::identity(d);
        if d > 1 {
            a.set(0, 1, 0.25);
            a.set(1, 0, -0.15);
        }
        let beta = 0.5;
        // lambda_min(sym A) = 1 - |0.05| for the skewed part; declare generously.
        let alpha = 0.9 - beta / 8.0;
        ModelSpec::new(
            d,
            InteractionKernel::saturating(a, beta, 0.8, alpha),
            DiffusionFamily::none(),
        )
        .unwrap()
    }

    #[test]
    fn drift_on_own_atom_is_zero() {
        for model in [
            ModelSpec::new(1, InteractionKernel::linear(Mat::identity(1), 1.0), DiffusionFamily::none()).unwrap(),
            saturating_model_1d(),
        ] {
            let mu = TestMeasure::new(1, vec![0.37]);
            let a = drift_eval(&model, &[0.37], &mu.view()).unwrap();
            assert_eq!(a, vec![0.0]);
        }
    }

    #[test]
    fn drift_linear_is_mean_displacement() {
        let model = ModelSpec::new(2, InteractionKernel::linear(Mat::identity(2), 1.0), DiffusionFamily::none()).unwrap();
        let mu = TestMeasure::new(2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0]);
        let a = drift_eval(&model, &[0.0, 0.0], &mu.view()).unwrap();
        assert!((a[0] - 0.0).abs() < 1e-15);
        assert!((a[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn drift_saturating_matches_double_loop_oracle() {
        let model = saturating_model(2);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mu = TestMeasure::new(2, random_points(&mut rng, 2, 16));
        let u = vec![0.3, -0.7];
        let fast = drift_eval(&model, &u, &mu.view()).unwrap();
        // Independent scalar-loop evaluation of (1/N) sum phi(u - v_i).
        let (a_mat, beta, s) = match &model.kernel.shape {
            KernelShape::Saturating { a_mat, beta, scale } => (a_mat, *beta, *scale),
            _ => unreachable!(),
        };
        let mut slow = [0.0; 2];
        for i in 0..16 {
            let v = mu.view().position(i).to_vec();
            let z = [u[0] - v[0], u[1] - v[1]];
            let r2 = z[0] * z[0] + z[1] * z[1];
            for j in 0..2 {
                let mut lin = 0.0;
                for l in 0..2 {
                    lin += a_mat.at(j, l) * z[l];
                }
                slow[j] += (-lin - beta * z[j] / (1.0 + r2 / (s * s))) / 16.0;
            }
        }
        assert!((fast[0] - slow[0]).abs() < 1e-12 && (fast[1] - slow[1]).abs() < 1e-12);
    }

    #[test]
    fn drift_jacobian_linear_is_neg_a() {
        let a_mat = Mat::from_rows(&[vec![1.0, 0.5], vec![-0.25, 2.0]]);
        let model = ModelSpec::new(2, InteractionKernel::linear(a_mat.clone(), 0.5), DiffusionFamily::none()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mu = TestMeasure::new(2, random_points(&mut rng, 2, 5));
        let jac = drift_jacobian(&model, &[0.4, 0.1], &mu.view()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(jac.at(i, j), -a_mat.at(i, j));
            }
        }
    }

    #[test]
    fn drift_jacobian_saturating_at_origin() {
        // d = 1, phi(z) = -z - z/(1+z^2): derivative at 0 is -1 - 1 = -2.
        let model = saturating_model_1d();
        let mu = TestMeasure::new(1, vec![0.0]);
        let jac = drift_jacobian(&model, &[0.0], &mu.view()).unwrap();
        assert!((jac.at(0, 0) + 2.0).abs() < 1e-14);
    }

    fn fd_drift_jacobian(model: &ModelSpec, u: &[f64], view: &MeasureView, h: f64) -> Mat {
        let d = model.d;
        let mut out = Mat::zeros(d);
        for j in 0..d {
            let mut up = u.to_vec();
            up[j] += h;
            let mut dn = u.to_vec();
            dn[j] -= h;
            let ap = drift_eval(model, &up, view).unwrap();
            let an = drift_eval(model, &dn, view).unwrap();
            for i in 0..d {
                out.set(i, j, (ap[i] - an[i]) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let model = saturating_model(2);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mu = TestMeasure::new(2, random_points(&mut rng, 2, 12));
        for _ in 0..50 {
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let jac = drift_jacobian(&model, &u, &mu.view()).unwrap();
            let fd = fd_drift_jacobian(&model, &u, &mu.view(), 1e-5);
            for i in 0..2 {
                for j in 0..2 {
                    let scale = 1.0 + jac.at(i, j).abs();
                    assert!((jac.at(i, j) - fd.at(i, j)).abs() / scale < 1e-5);
                }
            }
            let div = drift_divergence(&model, &u, &mu.view()).unwrap();
            assert!((div - fd.trace()).abs() / (1.0 + div.abs()) < 1e-5);
        }
    }

    #[test]
    fn drift_divergence_linear_cases() {
        let model = ModelSpec::new(3, InteractionKernel::linear(Mat::identity(3), 1.0), DiffusionFamily::none()).unwrap();
        let mu = TestMeasure::new(3, vec![0.1, 0.2, 0.3]);
        assert_eq!(drift_divergence(&model, &[1.0, 2.0, 3.0], &mu.view()).unwrap(), -3.0);

        let a_mat = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let model = ModelSpec::new(2, InteractionKernel::linear(a_mat, 1.0), DiffusionFamily::none()).unwrap();
        let mu = TestMeasure::new(2, vec![0.0, 0.0]);
        assert_eq!(drift_divergence(&model, &[0.5, -0.5], &mu.view()).unwrap(), -3.0);
    }

    fn mean_reverting_model(d: usize, sigma: f64) -> ModelSpec {
        let mut c = Mat::zeros(d);
        for i in 0..d {
            c.set(i, i, sigma);
        }
        ModelSpec::new(
            d,
            InteractionKernel::linear(Mat::identity(d), 1.0),
            DiffusionFamily::new(vec![DiffusionKernel::MeanReverting { c_mat: c, d_mat: Mat::zeros(d) }]),
        )
        .unwrap()
    }

    fn frozen_model(d: usize) -> ModelSpec {
        let mut s = Mat::identity(d);
        s.scale(0.3);
        if d > 1 {
            s.set(0, 1, 0.1);
        }
        let weights: Vec<f64> = (0..d).map(|i| 0.5 + 0.25 * i as f64).collect();
        ModelSpec::new(
            d,
            InteractionKernel::linear(Mat::identity(d), 1.0),
            DiffusionFamily::new(vec![DiffusionKernel::Frozen {
                d_mat: Mat::zeros(d),
                s_mat: s,
                profile: FrozenProfile::Tanh { weights },
            }]),
        )
        .unwrap()
    }

    #[test]
    fn mean_reverting_vanishes_at_mean() {
        let model = mean_reverting_model(2, 0.7);
        let mu = TestMeasure::new(2, vec![1.0, 2.0, 3.0, 4.0]);
        let m = mu.mean.clone();
        let b = diffusion_eval(&model, 0, &m, &mu.view()).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_reverting_divergence_is_minus_sigma() {
        // In d = 1 this is tr(-sigma I) = -sigma d with d = 1.
        let model = mean_reverting_model(1, 0.4);
        let mu = TestMeasure::new(1, vec![0.3]);
        for u in [-1.0, 0.0, 2.5] {
            assert_eq!(diffusion_divergence(&model, 0, 1, &[u], &mu.view()).unwrap(), -0.4);
        }
        let model = mean_reverting_model(3, 0.4);
        let mu = TestMeasure::new(3, vec![0.0, 0.0, 0.0]);
        for p in 1..=3 {
            assert_eq!(diffusion_divergence(&model, 0, p, &[0.1, 0.2, 0.3], &mu.view()).unwrap(), -0.4);
        }
    }

    fn fd_column_jacobian(model: &ModelSpec, k: usize, p: usize, u: &[f64], view: &MeasureView, h: f64) -> Mat {
        let d = model.d;
        let mut out = Mat::zeros(d);
        for j in 0..d {
            let mut up = u.to_vec();
            up[j] += h;
            let mut dn = u.to_vec();
            dn[j] -= h;
            let bp = diffusion_eval(model, k, &up, view).unwrap();
            let bn = diffusion_eval(model, k, &dn, view).unwrap();
            for i in 0..d {
                out.set(i, j, (bp.at(i, p - 1) - bn.at(i, p - 1)) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn diffusion_jacobians_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for model in [mean_reverting_model(2, 0.5), frozen_model(2)] {
            let mu = TestMeasure::new(2, random_points(&mut rng, 2, 6));
            for _ in 0..25 {
                let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
                for p in 1..=2 {
                    let jac = diffusion_jacobian(&model, 0, p, &u, &mu.view()).unwrap();
                    let fd = fd_column_jacobian(&model, 0, p, &u, &mu.view(), 1e-5);
                    for i in 0..2 {
                        for j in 0..2 {
                            let scale = 1.0 + jac.at(i, j).abs();
                            assert!(
                                (jac.at(i, j) - fd.at(i, j)).abs() / scale < 1e-5,
                                "p={p} ({i},{j}): {} vs {}",
                                jac.at(i, j),
                                fd.at(i, j)
                            );
                        }
                    }
                    let div = diffusion_divergence(&model, 0, p, &u, &mu.view()).unwrap();
                    assert!((div - fd.trace()).abs() < 1e-5 * (1.0 + div.abs()));
                }
            }
        }
    }

    #[test]
    fn liouville_integrand_closed_cases() {
        // d = 1, phi(z) = -z, one mean-reverting kernel C = sigma.
        let sigma = 0.6;
        let model = mean_reverting_model(1, sigma);
        let mu = TestMeasure::new(1, vec![0.2, -0.4]);
        let v = liouville_drift_integrand(&model, &[0.7], &mu.view()).unwrap();
        assert!((v - (-1.0 - sigma * sigma / 2.0)).abs() < 1e-15);

        // All-zero diffusion: -tr(A).
        let a_mat = Mat::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]);
        let model = ModelSpec::new(2, InteractionKernel::linear(a_mat, 1.0), DiffusionFamily::none()).unwrap();
        let mu = TestMeasure::new(2, vec![0.0, 0.0]);
        assert_eq!(liouville_drift_integrand(&model, &[1.0, 1.0], &mu.view()).unwrap(), -5.0);
    }

    #[test]
    fn liouville_integrand_matches_reassembly_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let model = frozen_model(2);
        let mu = TestMeasure::new(2, random_points(&mut rng, 2, 8));
        for _ in 0..20 {
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let fast = liouville_drift_integrand(&model, &u, &mu.view()).unwrap();
            // Term-by-term reassembly from the public pieces.
            let mut slow = drift_jacobian(&model, &u, &mu.view()).unwrap().trace();
            for k in 0..model.k_count() {
                for p in 1..=2 {
                    let db = diffusion_jacobian(&model, k, p, &u, &mu.view()).unwrap();
                    slow -= 0.5 * db.trace_mul(&db);
                }
            }
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn dissipativity_property_both_kernels() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for model in [
            ModelSpec::new(2, InteractionKernel::linear(Mat::identity(2), 1.0), DiffusionFamily::none()).unwrap(),
            saturating_model(2),
            saturating_model_1d(),
        ] {
            let d = model.d;
            let alpha = model.kernel.alpha;
            let mut pu = vec![0.0; d];
            let mut pv = vec![0.0; d];
            for _ in 0..1000 {
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                model.kernel.phi(&u, &mut pu);
                model.kernel.phi(&v, &mut pv);
                let mut inner = 0.0;
                let mut dist2 = 0.0;
                for i in 0..d {
                    inner += (u[i] - v[i]) * (pu[i] - pv[i]);
                    dist2 += (u[i] - v[i]) * (u[i] - v[i]);
                }
                assert!(inner <= -alpha * dist2 + 1e-12, "dissipativity violated: {inner} vs {}", -alpha * dist2);
            }
        }
    }

    #[test]
    fn divergence_bound_property() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for model in [saturating_model(2), saturating_model_1d(), mean_reverting_model(3, 0.2)] {
            let d = model.d;
            let alpha = model.kernel.alpha;
            let mu = TestMeasure::new(d, random_points(&mut rng, d, 6));
            for _ in 0..1000 {
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let div = drift_divergence(&model, &u, &mu.view()).unwrap();
                assert!(div <= -(d as f64) * alpha + 1e-9, "div {div} vs {}", -(d as f64) * alpha);
            }
        }
    }

    #[test]
    fn liouville_integrand_upper_bound_property() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        for model in [mean_reverting_model(2, 0.5), frozen_model(2)] {
            let d = model.d as f64;
            let alpha = model.kernel.alpha;
            let b = model.diffusion.b_lipschitz;
            let mu = TestMeasure::new(2, random_points(&mut rng, 2, 6));
            for _ in 0..500 {
                let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let v = liouville_drift_integrand(&model, &u, &mu.view()).unwrap();
                assert!(v <= d * (-alpha + b * b / 2.0) + 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_derivative_bound_property() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for model in [mean_reverting_model(2, 0.5), frozen_model(2)] {
            let d = model.d;
            let mu = TestMeasure::new(d, random_points(&mut rng, d, 6));
            for _ in 0..200 {
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let mut hs2 = 0.0;
                for k in 0..model.k_count() {
                    for p in 1..=d {
                        let db = diffusion_jacobian(&model, k, p, &u, &mu.view()).unwrap();
                        hs2 += db.data().iter().map(|x| x * x).sum::<f64>();
                    }
                }
                let bound = model.diffusion.b_lipschitz * (d as f64).sqrt();
                assert!(hs2.sqrt() <= bound + 1e-9, "{} vs {}", hs2.sqrt(), bound);
            }
        }
    }

    #[test]
    fn report_examples() {
        // B = 0: unbounded moment range.
        let model = ModelSpec::new(1, InteractionKernel::linear(Mat::scalar(1.0), 1.0), DiffusionFamily::none()).unwrap();
        let report = dissipativity_report(&model, 1.0).unwrap();
        assert_eq!(report.p_max, None);
        assert!(report.dissipativity_ok && report.divergence_ok && report.a1_ok && report.a2_ok);
        assert!(report.a5_margin_ok);

        // alpha = 1, B = 0.5: 2 - 0.25 (2p - 1) > 0 iff p < 4.5.
        let model = mean_reverting_model(1, 0.5);
        let report = dissipativity_report(&model, 1.0).unwrap();
        assert_eq!(report.p_max, Some(4));
        assert!(report.admits_moment(4) && !report.admits_moment(5));
        // Matches floor((2 alpha / B^2 + 1) / 2) away from the boundary.
        assert_eq!(report.p_max, Some((2.0f64 / 0.25 + 1.0).div_euclid(2.0) as u32));

        // alpha = 1, B = 2: no admissible p.
        let model = mean_reverting_model(1, 2.0);
        let report = dissipativity_report(&model, 1.0).unwrap();
        assert_eq!(report.p_max, Some(0));
        assert!(!report.admits_moment(1));

        // alpha <= 0 is an invalid model for the report.
        let model = ModelSpec::new(1, InteractionKernel::linear(Mat::scalar(0.0), 0.0), DiffusionFamily::none()).unwrap();
        assert!(matches!(dissipativity_report(&model, 1.0), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn argument_checking() {
        let model = mean_reverting_model(2, 0.3);
        let mu = TestMeasure::new(2, vec![0.0, 0.0]);
        assert!(matches!(
            drift_eval(&model, &[0.0], &mu.view()),
            Err(Error::Dimension { .. })
        ));
        let empty = MeasureView::new(2, &[], &[0.0, 0.0]);
        assert!(matches!(drift_eval(&model, &[0.0, 0.0], &empty), Err(Error::EmptyEnsemble)));
        assert!(matches!(
            diffusion_eval(&model, 5, &[0.0, 0.0], &mu.view()),
            Err(Error::KernelIndex { .. })
        ));
        assert!(matches!(
            diffusion_divergence(&model, 0, 0, &[0.0, 0.0], &mu.view()),
            Err(Error::ColumnIndex { .. })
        ));
        assert!(matches!(
            diffusion_divergence(&model, 0, 3, &[0.0, 0.0], &mu.view()),
            Err(Error::ColumnIndex { .. })
        ));
    }
}
