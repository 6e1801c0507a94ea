//! Analytic derivatives of the symmetric PNEC residual and implicit
//! differentiation of the rotational error of the energy minimizer with
//! respect to the feature covariances.
//!
//! Rotation derivatives use a left perturbation `exp(x̂) R`. The translation
//! direction is perturbed in a tangent basis `(b₁, b₂)` of the sphere at `t`,
//! `t ← normalize(t + b₁ δ₁ + b₂ δ₂)`. Together these form the 5-dof pose
//! chart `δ = (x, δ₁, δ₂)`.

use crate::energy::{BearingPair, EnergyConfig, RelativePose};
use crate::geometry::{
    rotate_cov, so3_exp, so3_left_jacobian, so3_log, tangent_basis, Cov2, Rotation,
};
use crate::metrics::e_rot;
use crate::{Error, Result};
use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Unit, Vector3};

pub type Vector5 = SVector<f64, 5>;
pub type Matrix5 = SMatrix<f64, 5, 5>;

/// Steps for the finite-difference second derivatives.
pub const POSE_FD_STEP: f64 = 1e-6;
/// Covariance steps are relative to the residual variance of the perturbed term.
pub const COV_FD_REL_STEP: f64 = 1e-6;
/// Below this rotational error the angular-distance derivative is undefined.
pub const MIN_ROTATION_ERROR: f64 = 1e-9;

/// Applies a chart step to a pose.
pub fn retract(pose: &RelativePose, delta: &Vector5) -> RelativePose {
    let (b1, b2) = tangent_basis(pose.t());
    let rot = so3_exp(&Vector3::new(delta[0], delta[1], delta[2])).compose(&pose.rotation);
    let t = pose.t() + b1 * delta[3] + b2 * delta[4];
    RelativePose {
        rotation: rot,
        translation: Unit::new_normalize(t),
    }
}

/// Raw pieces of one residual term and their first derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TermDerivatives {
    /// NEC residual tᵀ(f × Rf′).
    pub e: f64,
    /// Frame-1 variance part d_Σ.
    pub d_sigma: f64,
    /// Frame-2 variance part d_Σ′.
    pub d_sigma_prime: f64,
    pub de_dx: Vector3<f64>,
    pub dd_sigma_dx: Vector3<f64>,
    pub dd_sigma_prime_dx: Vector3<f64>,
    /// Ambient derivatives with respect to t (before projection onto the sphere).
    pub de_dt: Vector3<f64>,
    pub dd_sigma_dt: Vector3<f64>,
    pub dd_sigma_prime_dt: Vector3<f64>,
    /// (Rf′) × t; d_Σ = wᵀ Σ w.
    pub w: Vector3<f64>,
    /// Rᵀ (t × f); d_Σ′ = uᵀ Σ′ u.
    pub u: Vector3<f64>,
}

pub fn term_derivatives(pose: &RelativePose, bp: &BearingPair) -> TermDerivatives {
    let t = pose.t();
    let f = bp.f.as_ref();
    let v = pose.rotation.rotate(&bp.f_prime);
    let a = t.cross(f);
    let w = v.cross(t);
    let s = rotate_cov(&pose.rotation, &bp.cov_prime);
    let sw = bp.cov * w;
    let sa = s * a;
    TermDerivatives {
        e: a.dot(&v),
        d_sigma: w.dot(&sw),
        d_sigma_prime: a.dot(&sa),
        de_dx: v.cross(&a),
        dd_sigma_dx: v.cross(&t.cross(&sw)) * 2.0,
        dd_sigma_prime_dx: sa.cross(&a) * 2.0,
        de_dt: f.cross(&v),
        dd_sigma_dt: sw.cross(&v) * 2.0,
        dd_sigma_prime_dt: f.cross(&sa) * 2.0,
        w,
        u: pose.rotation.matrix().transpose() * a,
    }
}

/// Whitened residual r = e/σ_s and its ambient derivatives (rotation, translation).
fn whitened(td: &TermDerivatives, reg: f64) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let var = td.d_sigma + td.d_sigma_prime + reg;
    if !(var > 0.0) {
        return None;
    }
    let sigma = var.sqrt();
    let k = td.e / (2.0 * var * sigma);
    let r = td.e / sigma;
    let dr_dx = td.de_dx / sigma - (td.dd_sigma_dx + td.dd_sigma_prime_dx) * k;
    let dr_dt = td.de_dt / sigma - (td.dd_sigma_dt + td.dd_sigma_prime_dt) * k;
    Some((r, dr_dx, dr_dt))
}

/// Whitened residual with its Jacobian in the 5-dof chart at `pose`.
///
/// `None` when the regularized variance is zero (the term is skipped).
pub fn whitened_residual(
    pose: &RelativePose,
    bp: &BearingPair,
    cfg: &EnergyConfig,
) -> Option<(f64, Vector5)> {
    let (b1, b2) = tangent_basis(pose.t());
    let td = term_derivatives(pose, bp);
    let (r, dx, dt) = whitened(&td, cfg.regularization)?;
    Some((r, Vector5::new(dx.x, dx.y, dx.z, b1.dot(&dt), b2.dot(&dt))))
}

/// Decomposition of the whitened residual e_s = e / √(d_Σ + d_Σ′)
/// with the squared numerator n = e².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualJacobians {
    pub n: f64,
    pub d_sigma: f64,
    pub d_sigma_prime: f64,
    pub e_s: f64,
    pub dn_dx: Vector3<f64>,
    pub dd_sigma_dx: Vector3<f64>,
    pub dd_sigma_prime_dx: Vector3<f64>,
    pub des_dx: Vector3<f64>,
    pub des_dsigma: Matrix3<f64>,
    pub des_dsigma_prime: Matrix3<f64>,
}

impl ResidualJacobians {
    pub fn is_finite(&self) -> bool {
        [self.n, self.d_sigma, self.d_sigma_prime, self.e_s]
            .iter()
            .all(|x| x.is_finite())
            && self.dn_dx.iter().all(|x| x.is_finite())
            && self.dd_sigma_dx.iter().all(|x| x.is_finite())
            && self.dd_sigma_prime_dx.iter().all(|x| x.is_finite())
            && self.des_dx.iter().all(|x| x.is_finite())
            && self.des_dsigma.iter().all(|x| x.is_finite())
            && self.des_dsigma_prime.iter().all(|x| x.is_finite())
    }
}

pub fn residual_jacobians(
    pose: &RelativePose,
    bp: &BearingPair,
    cfg: &EnergyConfig,
) -> Result<ResidualJacobians> {
    let td = term_derivatives(pose, bp);
    let (e_s, des_dx, _) = whitened(&td, cfg.regularization).ok_or_else(|| {
        Error::DerivativeUndefined("residual variance is zero without regularization".into())
    })?;
    let var = td.d_sigma + td.d_sigma_prime + cfg.regularization;
    let k = -td.e / (2.0 * var * var.sqrt());
    Ok(ResidualJacobians {
        n: td.e * td.e,
        d_sigma: td.d_sigma,
        d_sigma_prime: td.d_sigma_prime,
        e_s,
        dn_dx: td.de_dx * (2.0 * td.e),
        dd_sigma_dx: td.dd_sigma_dx,
        dd_sigma_prime_dx: td.dd_sigma_prime_dx,
        des_dx,
        des_dsigma: td.w * td.w.transpose() * k,
        des_dsigma_prime: td.u * td.u.transpose() * k,
    })
}

/// Local gradient of a single energy term e²/σ² in the chart at `pose`.
fn term_gradient_local(
    pose: &RelativePose,
    bp: &BearingPair,
    reg: f64,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let td = term_derivatives(pose, bp);
    let (r, dx, dt) = whitened(&td, reg)?;
    Some((dx * (2.0 * r), dt * (2.0 * r)))
}

/// Gradient of `δ ↦ E(retract(base, δ))` evaluated at `delta`.
///
/// The analytic gradient at the displaced pose is mapped back through the
/// left Jacobian of SO(3) and the sphere normalization so that all components
/// live in the chart of `base`.
pub fn chart_gradient(
    base: &RelativePose,
    delta: &Vector5,
    pairs: &[BearingPair],
    cfg: &EnergyConfig,
) -> Vector5 {
    let pose = retract(base, delta);
    let mut gx = Vector3::zeros();
    let mut gt = Vector3::zeros();
    for bp in pairs {
        if let Some((dx, dt)) = term_gradient_local(&pose, bp, cfg.regularization) {
            gx += dx;
            gt += dt;
        }
    }
    map_to_chart(base, delta, &pose, &gx, &gt)
}

fn map_to_chart(
    base: &RelativePose,
    delta: &Vector5,
    pose: &RelativePose,
    gx: &Vector3<f64>,
    gt: &Vector3<f64>,
) -> Vector5 {
    let (b1, b2) = tangent_basis(base.t());
    let x = Vector3::new(delta[0], delta[1], delta[2]);
    let rot = so3_left_jacobian(&x).transpose() * gx;
    let raw = base.t() + b1 * delta[3] + b2 * delta[4];
    let tt = pose.t();
    let proj = (gt - tt * tt.dot(gt)) / raw.norm();
    Vector5::new(rot.x, rot.y, rot.z, b1.dot(&proj), b2.dot(&proj))
}

/// Gradient of the symmetric energy in the chart at `pose`.
pub fn energy_gradient(pose: &RelativePose, pairs: &[BearingPair], cfg: &EnergyConfig) -> Vector5 {
    chart_gradient(pose, &Vector5::zeros(), pairs, cfg)
}

/// Hessian of the energy in the chart at `pose`, by central differences of
/// the analytic gradient.
pub fn energy_hessian(pose: &RelativePose, pairs: &[BearingPair], cfg: &EnergyConfig) -> Matrix5 {
    let mut h = Matrix5::zeros();
    for k in 0..5 {
        let mut d = Vector5::zeros();
        d[k] = POSE_FD_STEP;
        let gp = chart_gradient(pose, &d, pairs, cfg);
        let gm = chart_gradient(pose, &(-d), pairs, cfg);
        h.set_column(k, &((gp - gm) / (2.0 * POSE_FD_STEP)));
    }
    (h + h.transpose()) * 0.5
}

/// Derivative of e_rot(exp(x̂) R_est, R_gt) at x = 0.
pub fn grad_erot_wrt_pose(r_est: &Rotation, r_gt: &Rotation) -> Result<Vector3<f64>> {
    let phi = so3_log(&r_gt.transpose().compose(r_est));
    let theta = phi.norm();
    if !(theta > MIN_ROTATION_ERROR && theta < std::f64::consts::PI - MIN_ROTATION_ERROR) {
        return Err(Error::DerivativeUndefined(format!(
            "rotation error {theta:.3e} outside the differentiable range"
        )));
    }
    Ok(r_est.rotate(&(phi / theta)))
}

/// Implicit gradient of e_rot at the energy minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitGradient {
    /// Rotational error of the minimizer.
    pub loss: f64,
    /// dL/dΣᵢ (frame 1 bearing covariances).
    pub d_cov: Vec<Matrix3<f64>>,
    /// dL/dΣ′ᵢ (frame 2 bearing covariances).
    pub d_cov_prime: Vec<Matrix3<f64>>,
    pub hessian_condition: f64,
    /// Diagonal ridge added to the Hessian, if any.
    pub ridge: Option<f64>,
    /// Set when the loss is too small for a defined derivative; gradients are zero.
    pub skipped: bool,
}

impl ImplicitGradient {
    fn zeros(n: usize, loss: f64) -> Self {
        Self {
            loss,
            d_cov: vec![Matrix3::zeros(); n],
            d_cov_prime: vec![Matrix3::zeros(); n],
            hessian_condition: f64::NAN,
            ridge: None,
            skipped: true,
        }
    }
}

/// Solves H y = g with the ridge policy for near-singular Hessians.
fn solve_hessian(h: &Matrix5, g: &Vector5) -> Result<(Vector5, f64, Option<f64>)> {
    let eig = h.symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(max > 0.0) || !condition.is_finite() && min < 0.0 {
        return Err(Error::RankDeficient { condition });
    }
    let mut ridge = None;
    let mut hh = *h;
    if condition > 1e12 {
        let r = 1e-12 * max;
        ridge = Some(r);
        hh += Matrix5::identity() * r;
    }
    let chol = hh.cholesky().ok_or(Error::RankDeficient { condition })?;
    Ok((chol.solve(g), condition, ridge))
}

/// Covariance step that moves the residual variance by about `rel` of itself.
pub fn cov_step(
    pose: &RelativePose,
    bp: &BearingPair,
    reg: f64,
    frame_prime: bool,
    rel: f64,
) -> f64 {
    let td = term_derivatives(pose, bp);
    let var = td.d_sigma + td.d_sigma_prime + reg;
    let lever = if frame_prime {
        td.u.norm_squared()
    } else {
        td.w.norm_squared()
    };
    rel * var.max(f64::MIN_POSITIVE) / lever.max(1e-12)
}

/// Directional mixed derivative: ∂/∂Σ of the term gradient, contracted with `y`.
///
/// Returns the symmetric matrix G with G_ab = -yᵀ ∂g/∂Σ_ab (off-diagonal pairs
/// perturbed together and split evenly).
fn mixed_contraction(
    pose: &RelativePose,
    bp: &BearingPair,
    y: &Vector5,
    reg: f64,
    frame_prime: bool,
) -> Matrix3<f64> {
    let (b1, b2) = tangent_basis(pose.t());
    let chart = |g: Option<(Vector3<f64>, Vector3<f64>)>| -> Vector5 {
        match g {
            Some((gx, gt)) => Vector5::new(gx.x, gx.y, gx.z, b1.dot(&gt), b2.dot(&gt)),
            None => Vector5::zeros(),
        }
    };
    let base = if frame_prime { bp.cov_prime } else { bp.cov };
    let h = cov_step(pose, bp, reg, frame_prime, COV_FD_REL_STEP);
    let mut out = Matrix3::zeros();
    for a in 0..3 {
        for b in a..3 {
            let mut dir = Matrix3::zeros();
            dir[(a, b)] = 1.0;
            dir[(b, a)] = 1.0;
            let eval = |sign: f64| {
                let mut q = *bp;
                if frame_prime {
                    q.cov_prime = base + dir * (sign * h);
                } else {
                    q.cov = base + dir * (sign * h);
                }
                chart(term_gradient_local(pose, &q, reg))
            };
            let d = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            let v = -y.dot(&d);
            if a == b {
                out[(a, a)] = v;
            } else {
                out[(a, b)] = 0.5 * v;
                out[(b, a)] = 0.5 * v;
            }
        }
    }
    out
}

/// Which frames' covariances receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovFrames {
    Both,
    SecondOnly,
}

/// Pushes a loss gradient with respect to the rotation of the minimizer back
/// onto the covariances: dL/dΣᵢ = −(∂²E/∂Σᵢ∂δ)ᵀ H⁻¹ ∂L/∂δ.
///
/// `dl_dx` is the derivative of the loss under a left rotation perturbation
/// of `pose_star`, which must minimize the symmetric energy over all five
/// pose dofs. The translation dofs enter through the full Hessian, which is
/// equivalent to differentiating the rotation-only energy with the
/// translation profiled out. `loss` is copied into the result.
pub fn implicit_gradient_for_loss(
    pairs: &[BearingPair],
    pose_star: &RelativePose,
    dl_dx: &Vector3<f64>,
    loss: f64,
    frames: CovFrames,
    cfg: &EnergyConfig,
) -> Result<ImplicitGradient> {
    let gl = Vector5::new(dl_dx.x, dl_dx.y, dl_dx.z, 0.0, 0.0);
    let h = energy_hessian(pose_star, pairs, cfg);
    let (y, hessian_condition, ridge) = solve_hessian(&h, &gl)?;
    let mut d_cov = Vec::with_capacity(pairs.len());
    let mut d_cov_prime = Vec::with_capacity(pairs.len());
    for bp in pairs {
        d_cov.push(match frames {
            CovFrames::Both => mixed_contraction(pose_star, bp, &y, cfg.regularization, false),
            CovFrames::SecondOnly => Matrix3::zeros(),
        });
        d_cov_prime.push(mixed_contraction(
            pose_star,
            bp,
            &y,
            cfg.regularization,
            true,
        ));
    }
    Ok(ImplicitGradient {
        loss,
        d_cov,
        d_cov_prime,
        hessian_condition,
        ridge,
        skipped: false,
    })
}

/// dL/dΣ and dL/dΣ′ for L = e_rot(R*, R_gt), where `pose_star` minimizes the
/// symmetric energy.
///
/// Returns zero gradients flagged as skipped when the loss is below
/// [`MIN_ROTATION_ERROR`].
pub fn implicit_covariance_gradient(
    pairs: &[BearingPair],
    pose_star: &RelativePose,
    r_gt: &Rotation,
    cfg: &EnergyConfig,
) -> Result<ImplicitGradient> {
    implicit_erot_gradient(pairs, pose_star, r_gt, CovFrames::Both, cfg)
}

pub fn implicit_erot_gradient(
    pairs: &[BearingPair],
    pose_star: &RelativePose,
    r_gt: &Rotation,
    frames: CovFrames,
    cfg: &EnergyConfig,
) -> Result<ImplicitGradient> {
    let loss = e_rot(&pose_star.rotation, r_gt);
    if loss < MIN_ROTATION_ERROR {
        return Ok(ImplicitGradient::zeros(pairs.len(), loss));
    }
    let gr = grad_erot_wrt_pose(&pose_star.rotation, r_gt)?;
    implicit_gradient_for_loss(pairs, pose_star, &gr, loss, frames, cfg)
}

/// f₁(x) = (1 + |x|)^sign(x), a positive map with f₁(0) = 1.
pub fn filter_scale(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 + x
    } else {
        1.0 / (1.0 - x)
    }
}

fn filter_scale_derivative(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        1.0 / ((1.0 - x) * (1.0 - x))
    }
}

fn filter_scale_inverse(s: f64) -> f64 {
    if s >= 1.0 {
        s - 1.0
    } else {
        1.0 - 1.0 / s
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained parameters of a 2D covariance s R_α diag(β, 1−β) R_αᵀ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CovarianceParams {
    pub s_raw: f64,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

impl CovarianceParams {
    /// Isotropic covariance `variance · I`.
    pub fn isotropic(variance: f64) -> Self {
        Self {
            s_raw: filter_scale_inverse(2.0 * variance),
            alpha_raw: 0.0,
            beta_raw: 0.0,
        }
    }

    /// Parameters reproducing a given PSD covariance (β clamped away from 0 and 1).
    pub fn from_cov2(cov: &Cov2) -> Self {
        let eig = cov.symmetric_eigen();
        let (l0, l1) = (eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0));
        let s = (l0 + l1).max(1e-12);
        let u = eig.eigenvectors.column(0);
        let alpha = u[1].atan2(u[0]);
        let beta = (l0 / s).clamp(1e-9, 1.0 - 1e-9);
        Self {
            s_raw: filter_scale_inverse(s),
            alpha_raw: alpha,
            beta_raw: (beta / (1.0 - beta)).ln(),
        }
    }

    pub fn scale(&self) -> f64 {
        filter_scale(self.s_raw)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_raw
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.beta_raw)
    }

    pub fn cov2(&self) -> Cov2 {
        cov2_from_shape(self.scale(), self.alpha(), self.beta())
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.s_raw, self.alpha_raw, self.beta_raw]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            s_raw: a[0],
            alpha_raw: a[1],
            beta_raw: a[2],
        }
    }
}

fn rot2(alpha: f64) -> Matrix2<f64> {
    let (s, c) = alpha.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `s R_α diag(β, 1−β) R_αᵀ`.
pub fn cov2_from_shape(s: f64, alpha: f64, beta: f64) -> Cov2 {
    let r = rot2(alpha);
    let c = r * Matrix2::new(beta, 0.0, 0.0, 1.0 - beta) * r.transpose() * s;
    (c + c.transpose()) * 0.5
}

/// Chains dL/dΣ_2D through Σ_2D(s, α, β) and the output filters.
///
/// Returns (dL/ds_raw, dL/dα_raw, dL/dβ_raw).
pub fn chain_to_params(d_cov2: &Cov2, params: &CovarianceParams) -> [f64; 3] {
    let (s, alpha, beta) = (params.scale(), params.alpha(), params.beta());
    let r = rot2(alpha);
    let dr = Matrix2::new(-alpha.sin(), -alpha.cos(), alpha.cos(), -alpha.sin());
    let d = Matrix2::new(beta, 0.0, 0.0, 1.0 - beta);
    let ds = r * d * r.transpose();
    let da = (dr * d * r.transpose() + r * d * dr.transpose()) * s;
    let db = r * Matrix2::new(1.0, 0.0, 0.0, -1.0) * r.transpose() * s;
    let inner = |m: &Matrix2<f64>| d_cov2.component_mul(m).sum();
    [
        inner(&ds) * filter_scale_derivative(params.s_raw),
        inner(&da),
        inner(&db) * beta * (1.0 - beta),
    ]
}

/// Shannon entropy (nats) of the principal-eigenvector angles of 2D
/// gradients, histogrammed over `[0, π)`. Zero matrices are ignored.
pub fn eigenvector_angle_entropy(grads: &[Cov2], bins: usize) -> f64 {
    let bins = bins.max(1);
    let mut hist = vec![0usize; bins];
    let mut n = 0usize;
    for g in grads {
        if g.norm() == 0.0 || !g.iter().all(|v| v.is_finite()) {
            continue;
        }
        let eig = g.symmetric_eigen();
        let k = if eig.eigenvalues[0].abs() >= eig.eigenvalues[1].abs() {
            0
        } else {
            1
        };
        let v = eig.eigenvectors.column(k);
        let angle = v[1].atan2(v[0]).rem_euclid(std::f64::consts::PI);
        let bin = ((angle / std::f64::consts::PI) * bins as f64) as usize;
        hist[bin.min(bins - 1)] += 1;
        n += 1;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n as f64;
            -q * q.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{energy_sym, nec_residual, variance_sym};
    use crate::geometry::{propagate_cov, Camera, Cov3};
    use crate::rng::stream;
    use crate::synthgen::BatchMode;
    use crate::verify::gradient_direction_samples;
    use nalgebra::Vector2;
    use rand::Rng;

    fn rand_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn rand_config(rng: &mut impl Rng) -> (RelativePose, BearingPair) {
        let cam = Camera::centered(720.0, 1240.0, 370.0);
        let pose = RelativePose::new(
            so3_exp(&(rand_unit(rng) * rng.random_range(0.05..0.5))),
            rand_unit(rng),
        );
        let mut cov2 = || {
            let a = Matrix2::from_fn(|_, _| rng.random_range(-1.5..1.5));
            a * a.transpose() + Matrix2::identity() * 0.1
        };
        let (c1, c2) = (cov2(), cov2());
        let p = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
        let pp = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
        let bp = BearingPair {
            f: crate::geometry::unproject(&p, &cam),
            f_prime: crate::geometry::unproject(&pp, &cam),
            cov: propagate_cov(&p, &c1, &cam),
            cov_prime: propagate_cov(&pp, &c2, &cam),
        };
        (pose, bp)
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / b.abs().max(scale)
    }

    fn rotated(pose: &RelativePose, x: &Vector3<f64>) -> RelativePose {
        RelativePose {
            rotation: so3_exp(x).compose(&pose.rotation),
            translation: pose.translation,
        }
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let cfg = EnergyConfig::default();
        let mut rng = stream(21, 0);
        for _ in 0..50 {
            let (pose, bp) = rand_config(&mut rng);
            let j = residual_jacobians(&pose, &bp, &cfg).unwrap();
            assert!(j.is_finite());
            let eval = |p: &RelativePose, q: &BearingPair| residual_jacobians(p, q, &cfg).unwrap();
            let h = 1e-6;
            let mut fd = [Vector3::zeros(); 4];
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let (p, m) = (
                    eval(&rotated(&pose, &d), &bp),
                    eval(&rotated(&pose, &-d), &bp),
                );
                fd[0][k] = (p.n - m.n) / (2.0 * h);
                fd[1][k] = (p.d_sigma - m.d_sigma) / (2.0 * h);
                fd[2][k] = (p.d_sigma_prime - m.d_sigma_prime) / (2.0 * h);
                fd[3][k] = (p.e_s - m.e_s) / (2.0 * h);
            }
            let analytic = [j.dn_dx, j.dd_sigma_dx, j.dd_sigma_prime_dx, j.des_dx];
            for (a, b) in analytic.iter().zip(&fd) {
                let scale = 1e-6 * b.amax();
                for k in 0..3 {
                    assert!(rel_err(a[k], b[k], scale) < 1e-5, "{a} vs {b}");
                }
            }
            for prime in [false, true] {
                let hc = cov_step(&pose, &bp, cfg.regularization, prime, 1e-5);
                let g = if prime {
                    j.des_dsigma_prime
                } else {
                    j.des_dsigma
                };
                let scale = 1e-6 * g.amax();
                for a in 0..3 {
                    for b in a..3 {
                        let mut dir = Matrix3::zeros();
                        dir[(a, b)] = 1.0;
                        dir[(b, a)] = 1.0;
                        let mut qp = bp;
                        let mut qm = bp;
                        if prime {
                            qp.cov_prime += dir * hc;
                            qm.cov_prime -= dir * hc;
                        } else {
                            qp.cov += dir * hc;
                            qm.cov -= dir * hc;
                        }
                        let fd = (eval(&pose, &qp).e_s - eval(&pose, &qm).e_s) / (2.0 * hc);
                        let an = if a == b { g[(a, a)] } else { 2.0 * g[(a, b)] };
                        assert!(rel_err(an, fd, scale) < 1e-5, "{an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn covariance_gradient_vanishes_on_the_epipolar_plane() {
        let mut rng = stream(22, 0);
        let pose = RelativePose::new(
            so3_exp(&Vector3::new(0.1, -0.2, 0.05)),
            Vector3::new(0.2, 0.1, 1.0),
        );
        let x1 = Vector3::new(1.0, -0.5, 8.0);
        let x2 = pose.rotation.transpose().rotate(&(x1 - pose.t()));
        let c = rng.random_range(1e-7..1e-5);
        let bp = BearingPair {
            f: Unit::new_normalize(x1),
            f_prime: Unit::new_normalize(x2),
            cov: Cov3::identity() * c,
            cov_prime: Cov3::identity() * c,
        };
        assert!(nec_residual(&pose, &bp).abs() < 1e-14);
        let j = residual_jacobians(&pose, &bp, &EnergyConfig::default()).unwrap();
        assert!(j.des_dsigma.norm() < 1e-6 && j.des_dsigma_prime.norm() < 1e-6);
    }

    #[test]
    fn covariance_gradient_is_rank_one_along_geometry() {
        let mut rng = stream(23, 0);
        for _ in 0..20 {
            let (pose, bp) = rand_config(&mut rng);
            let j = residual_jacobians(&pose, &bp, &EnergyConfig::default()).unwrap();
            let w = pose
                .t()
                .cross(&pose.rotation.rotate(&bp.f_prime))
                .normalize();
            let eig = j.des_dsigma.symmetric_eigen();
            let k = eig.eigenvalues.iamax();
            let v = eig.eigenvectors.column(k);
            assert!((v.dot(&w).abs() - 1.0).abs() < 1e-9);
            let rest: f64 = (0..3)
                .filter(|&i| i != k)
                .map(|i| eig.eigenvalues[i].abs())
                .sum();
            assert!(rest < 1e-9 * eig.eigenvalues[k].abs());
        }
    }

    #[test]
    fn zero_variance_without_regularization_is_an_error() {
        let pose = RelativePose::identity_forward();
        let bp = BearingPair {
            f: Unit::new_normalize(Vector3::x()),
            f_prime: Unit::new_normalize(Vector3::y()),
            cov: Cov3::zeros(),
            cov_prime: Cov3::zeros(),
        };
        let cfg = EnergyConfig {
            regularization: 0.0,
        };
        assert!(matches!(
            residual_jacobians(&pose, &bp, &cfg),
            Err(Error::DerivativeUndefined(_))
        ));
    }

    #[test]
    fn chart_gradient_matches_energy_differences() {
        let cfg = EnergyConfig::default();
        let mut rng = stream(24, 0);
        let pose = RelativePose::new(
            so3_exp(&Vector3::new(0.05, 0.1, -0.02)),
            Vector3::new(0.1, 0.0, 1.0),
        );
        let pairs: Vec<BearingPair> = (0..30).map(|_| rand_config(&mut rng).1).collect();
        let delta = Vector5::new(0.01, -0.02, 0.015, 0.03, -0.01);
        let g = chart_gradient(&pose, &delta, &pairs, &cfg);
        let h = 1e-6;
        for k in 0..5 {
            let mut d = delta;
            d[k] += h;
            let ep = energy_sym(&retract(&pose, &d), &pairs, &cfg).unwrap();
            d[k] -= 2.0 * h;
            let em = energy_sym(&retract(&pose, &d), &pairs, &cfg).unwrap();
            let fd = (ep - em) / (2.0 * h);
            assert!(
                rel_err(g[k], fd, 1e-6 * g.amax()) < 1e-5,
                "{k}: {} vs {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn erot_gradient_examples() {
        let r_gt = so3_exp(&Vector3::new(0.3, -0.2, 0.1));
        let r_est = so3_exp(&Vector3::new(0.0, 0.0, 0.1)).compose(&r_gt);
        let g = grad_erot_wrt_pose(&r_est, &r_gt).unwrap();
        assert!((g - Vector3::z()).norm() < 1e-6);
        assert!(grad_erot_wrt_pose(&r_gt, &r_gt).is_err());

        let mut rng = stream(25, 0);
        for _ in 0..50 {
            let r_gt = so3_exp(&(rand_unit(&mut rng) * rng.random_range(0.0..3.0)));
            let r_est =
                so3_exp(&(rand_unit(&mut rng) * rng.random_range(0.01..2.5))).compose(&r_gt);
            let g = grad_erot_wrt_pose(&r_est, &r_gt).unwrap();
            assert!((g.norm() - 1.0).abs() < 1e-12);
            let h = 1e-6;
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let fd = (e_rot(&so3_exp(&d).compose(&r_est), &r_gt)
                    - e_rot(&so3_exp(&-d).compose(&r_est), &r_gt))
                    / (2.0 * h);
                assert!(rel_err(g[k], fd, 1e-3) < 1e-6, "{} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn filters_and_params() {
        assert_eq!(filter_scale(0.0), 1.0);
        assert_eq!(filter_scale(1.0), 2.0);
        assert_eq!(filter_scale(-1.0), 0.5);
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            assert!(filter_scale(x) > 0.0);
            assert!((filter_scale_inverse(filter_scale(x)) - x).abs() < 1e-12);
            let b = sigmoid(x);
            assert!(b > 0.0 && b < 1.0);
        }
        let iso = CovarianceParams::isotropic(1.0);
        assert!((iso.cov2() - Cov2::identity()).norm() < 1e-15);
        let p = CovarianceParams {
            s_raw: 0.7,
            alpha_raw: 0.4,
            beta_raw: -1.1,
        };
        let c = p.cov2();
        let eig = c.symmetric_eigen();
        let mut l: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        l.sort_by(f64::total_cmp);
        let (s, b) = (p.scale(), p.beta());
        assert!((l[0] - s * b.min(1.0 - b)).abs() < 1e-12);
        assert!((l[1] - s * b.max(1.0 - b)).abs() < 1e-12);
        let back = CovarianceParams::from_cov2(&c);
        assert!((back.cov2() - c).norm() < 1e-9);
    }

    #[test]
    fn chain_to_params_examples() {
        let p = CovarianceParams {
            s_raw: 0.3,
            alpha_raw: 1.2,
            beta_raw: 0.0,
        };
        assert_eq!(chain_to_params(&Cov2::zeros(), &p), [0.0, 0.0, 0.0]);
        let g = Matrix2::new(0.4, -1.3, -1.3, 2.2);
        assert!(chain_to_params(&g, &p)[1].abs() < 1e-15);

        let mut rng = stream(26, 0);
        for _ in 0..100 {
            let p = CovarianceParams {
                s_raw: rng.random_range(-3.0..3.0),
                alpha_raw: rng.random_range(-3.0..3.0),
                beta_raw: rng.random_range(-3.0..3.0),
            };
            let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let g = a + a.transpose();
            let an = chain_to_params(&g, &p);
            let h = 1e-6;
            for k in 0..3 {
                let mut hp = p.to_array();
                let mut hm = p.to_array();
                hp[k] += h;
                hm[k] -= h;
                let lp = g
                    .component_mul(&CovarianceParams::from_array(hp).cov2())
                    .sum();
                let lm = g
                    .component_mul(&CovarianceParams::from_array(hm).cov2())
                    .sum();
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel_err(an[k], fd, 1e-6) < 1e-6, "{k}: {} vs {fd}", an[k]);
            }
        }
    }

    #[test]
    fn hessian_ridge_and_rank_deficiency() {
        let h = Matrix5::from_diagonal(&Vector5::new(1e8, 1e8, 1e8, 1e8, 1e-10));
        let (_, cond, ridge) = solve_hessian(&h, &Vector5::repeat(1.0)).unwrap();
        assert!(cond > 1e12 && ridge.is_some());
        let bad = Matrix5::from_diagonal(&Vector5::new(1.0, 1.0, 1.0, 1.0, -1.0));
        assert!(matches!(
            solve_hessian(&bad, &Vector5::repeat(1.0)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn variance_matches_jacobian_components() {
        let mut rng = stream(27, 0);
        let (pose, bp) = rand_config(&mut rng);
        let j = residual_jacobians(
            &pose,
            &bp,
            &EnergyConfig {
                regularization: 0.0,
            },
        )
        .unwrap();
        assert!((j.d_sigma + j.d_sigma_prime - variance_sym(&pose, &bp)).abs() < 1e-20);
    }

    #[test]
    fn gradient_directions_spread_under_random_pose() {
        let fixed = gradient_direction_samples(BatchMode::FixedGeometry, 1000, 3).unwrap();
        let random = gradient_direction_samples(BatchMode::RandomPose, 1000, 3).unwrap();
        let (hf, hr) = (
            eigenvector_angle_entropy(&fixed, 36),
            eigenvector_angle_entropy(&random, 36),
        );
        assert!(hr > hf, "random {hr} fixed {hf}");
    }

    #[test]
    fn angle_entropy_extremes() {
        let one = vec![Cov2::new(1.0, 0.0, 0.0, 0.0); 10];
        assert_eq!(eigenvector_angle_entropy(&one, 8), 0.0);
        let spread: Vec<Cov2> = (0..8)
            .map(|k| {
                let a = (k as f64 + 0.5) * std::f64::consts::PI / 8.0;
                let v = Vector2::new(a.cos(), a.sin());
                v * v.transpose()
            })
            .collect();
        assert!((eigenvector_angle_entropy(&spread, 8) - 8f64.ln()).abs() < 1e-12);
        assert_eq!(eigenvector_angle_entropy(&[Cov2::zeros()], 8), 0.0);
    }
}
