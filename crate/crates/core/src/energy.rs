//! Epipolar residuals and the asymmetric/symmetric PNEC energies.
//!
//! All energies live in bearing space. Pixel covariances are propagated once,
//! when a [`PnecProblem`] is built.

use crate::geometry::{
    propagate_cov, rotate_cov, skew, unproject, Camera, Cov2, Cov3, Rotation, UnitVector3,
};
use crate::{Error, Result};
use nalgebra::{Matrix3, Unit, Vector2, Vector3};

/// Regularization added to every residual variance.
pub const DEFAULT_REGULARIZATION: f64 = 1e-13;

/// A matched pair of pixels with their noise covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p: Vector2<f64>,
    pub p_prime: Vector2<f64>,
    pub cov: Cov2,
    pub cov_prime: Cov2,
}

impl Correspondence {
    pub fn isotropic(p: Vector2<f64>, p_prime: Vector2<f64>, var: f64) -> Self {
        Self {
            p,
            p_prime,
            cov: Cov2::identity() * var,
            cov_prime: Cov2::identity() * var,
        }
    }
}

/// Bearing vectors of one correspondence with their 3×3 covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingPair {
    pub f: UnitVector3,
    pub f_prime: UnitVector3,
    pub cov: Cov3,
    pub cov_prime: Cov3,
}

impl BearingPair {
    pub fn from_correspondence(c: &Correspondence, cam: &Camera) -> Self {
        Self {
            f: unproject(&c.p, cam),
            f_prime: unproject(&c.p_prime, cam),
            cov: propagate_cov(&c.p, &c.cov, cam),
            cov_prime: propagate_cov(&c.p_prime, &c.cov_prime, cam),
        }
    }
}

/// Rotation plus unit translation direction, `X₁ = R X₂ + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation,
    pub translation: UnitVector3,
}

impl RelativePose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: Unit::new_normalize(translation),
        }
    }

    pub fn identity_forward() -> Self {
        Self::new(Rotation::identity(), Vector3::z())
    }

    pub fn t(&self) -> &Vector3<f64> {
        self.translation.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub regularization: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            regularization: DEFAULT_REGULARIZATION,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "regularization must be non-negative, got {}",
                self.regularization
            )));
        }
        Ok(())
    }
}

/// A relative pose problem in bearing space.
///
/// Keeps the pixel correspondences next to the propagated bearings so that
/// covariance gradients can be pulled back to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PnecProblem {
    pub camera: Camera,
    pub correspondences: Vec<Correspondence>,
    pub pairs: Vec<BearingPair>,
}

impl PnecProblem {
    pub fn new(camera: Camera, correspondences: Vec<Correspondence>) -> Self {
        let pairs = correspondences
            .iter()
            .map(|c| BearingPair::from_correspondence(c, &camera))
            .collect();
        Self {
            camera,
            correspondences,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Replaces the pixel covariances of correspondence `i` and re-propagates.
    pub fn set_covariances(&mut self, i: usize, cov: Cov2, cov_prime: Cov2) {
        let c = &mut self.correspondences[i];
        c.cov = cov;
        c.cov_prime = cov_prime;
        self.pairs[i] = BearingPair::from_correspondence(c, &self.camera);
    }

    /// Sub-problem restricted to the masked correspondences.
    pub fn subset(&self, mask: &[bool]) -> PnecProblem {
        let mut correspondences = Vec::new();
        let mut pairs = Vec::new();
        for ((c, p), &keep) in self.correspondences.iter().zip(&self.pairs).zip(mask) {
            if keep {
                correspondences.push(*c);
                pairs.push(*p);
            }
        }
        PnecProblem {
            camera: self.camera,
            correspondences,
            pairs,
        }
    }
}

/// tᵀ(f × R f′).
pub fn nec_residual(pose: &RelativePose, bp: &BearingPair) -> f64 {
    let rf = pose.rotation.rotate(&bp.f_prime);
    pose.t().dot(&bp.f.cross(&rf))
}

/// tᵀ f̂ R Σ′ Rᵀ f̂ᵀ t.
pub fn variance_asym(pose: &RelativePose, bp: &BearingPair) -> f64 {
    // f̂ᵀ t = t × f
    let a = pose.t().cross(&bp.f);
    let s = rotate_cov(&pose.rotation, &bp.cov_prime);
    a.dot(&(s * a))
}

/// Frame-1 contribution ((Rf′) × t)ᵀ Σ ((Rf′) × t).
fn variance_frame1(pose: &RelativePose, bp: &BearingPair) -> f64 {
    let w = pose.rotation.rotate(&bp.f_prime).cross(pose.t());
    w.dot(&(bp.cov * w))
}

/// Residual variance with noise in both frames, first order.
pub fn variance_sym(pose: &RelativePose, bp: &BearingPair) -> f64 {
    variance_frame1(pose, bp) + variance_asym(pose, bp)
}

/// First-order noise covariance of the epipolar normal f × Rf′.
pub fn sigma_n_approx(pose: &RelativePose, bp: &BearingPair) -> Matrix3<f64> {
    let rf = skew(&pose.rotation.rotate(&bp.f_prime));
    let fh = skew(&bp.f);
    let s = rotate_cov(&pose.rotation, &bp.cov_prime);
    rf * bp.cov * rf.transpose() + fh * s * fh.transpose()
}

/// Covariance of η × η′_R for independent zero-mean η ~ Σ, η′_R ~ Σ′_R.
///
/// Row k is Σ_{k+1} × Σ′_{R,k+2} − Σ_{k+2} × Σ′_{R,k+1} (column indices mod 3).
pub fn sigma_tilde(cov: &Cov3, cov_prime_rotated: &Cov3) -> Matrix3<f64> {
    let c = |m: &Cov3, j: usize| -> Vector3<f64> { m.column(j % 3).into_owned() };
    let mut out = Matrix3::zeros();
    for k in 0..3 {
        let row = c(cov, k + 1).cross(&c(cov_prime_rotated, k + 2))
            - c(cov, k + 2).cross(&c(cov_prime_rotated, k + 1));
        out.set_row(k, &row.transpose());
    }
    out
}

/// Full normal-noise covariance including the second-order cross term Σ̃.
pub fn sigma_n_full(pose: &RelativePose, bp: &BearingPair) -> Matrix3<f64> {
    let s = rotate_cov(&pose.rotation, &bp.cov_prime);
    sigma_n_approx(pose, bp) + sigma_tilde(&bp.cov, &s)
}

/// Symmetric PNEC energy Σᵢ eᵢ² / (σ²_{s,i} + c).
///
/// Terms whose regularized variance is exactly zero are skipped; if every
/// term is skipped the energy is ill-posed.
pub fn energy_sym(pose: &RelativePose, pairs: &[BearingPair], cfg: &EnergyConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for bp in pairs {
        let var = variance_sym(pose, bp) + cfg.regularization;
        if var > 0.0 {
            let e = nec_residual(pose, bp);
            total += e * e / var;
            any = true;
        }
    }
    if !any {
        return Err(Error::IllPosedEnergy);
    }
    Ok(total)
}

/// Asymmetric PNEC energy (frame-2 noise only).
pub fn energy_asym(pose: &RelativePose, pairs: &[BearingPair], cfg: &EnergyConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for bp in pairs {
        let var = variance_asym(pose, bp) + cfg.regularization;
        if var > 0.0 {
            let e = nec_residual(pose, bp);
            total += e * e / var;
            any = true;
        }
    }
    if !any {
        return Err(Error::IllPosedEnergy);
    }
    Ok(total)
}

/// NEC least squares Σᵢ wᵢ eᵢ², unit weights when `weights` is `None`.
pub fn energy_nec_ls(pose: &RelativePose, pairs: &[BearingPair], weights: Option<&[f64]>) -> f64 {
    pairs
        .iter()
        .enumerate()
        .map(|(i, bp)| {
            let e = nec_residual(pose, bp);
            weights.map_or(1.0, |w| w[i]) * e * e
        })
        .sum()
}
