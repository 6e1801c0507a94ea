//! Levenberg–Marquardt over the 5-dof pose chart.

use super::SolverConfig;
use crate::energy::{
    energy_nec_ls, energy_sym, nec_residual, BearingPair, EnergyConfig, RelativePose,
};
use crate::geometry::tangent_basis;
use crate::gradients::{retract, whitened_residual, Matrix5, Vector5};
use crate::{Error, Result};

/// A sum-of-squares energy over the pose.
pub trait PoseObjective {
    fn energy(&self, pose: &RelativePose) -> Result<f64>;
    /// Gauss–Newton normal equations (JᵀJ, Jᵀr) in the chart at `pose`.
    fn normal_equations(&self, pose: &RelativePose) -> (Matrix5, Vector5);
}

/// Plain (optionally weighted) NEC least squares.
pub struct NecLsObjective<'a> {
    pub pairs: &'a [BearingPair],
    pub weights: Option<&'a [f64]>,
}

impl PoseObjective for NecLsObjective<'_> {
    fn energy(&self, pose: &RelativePose) -> Result<f64> {
        Ok(energy_nec_ls(pose, self.pairs, self.weights))
    }

    fn normal_equations(&self, pose: &RelativePose) -> (Matrix5, Vector5) {
        let (b1, b2) = tangent_basis(pose.t());
        let mut jtj = Matrix5::zeros();
        let mut jtr = Vector5::zeros();
        for (i, bp) in self.pairs.iter().enumerate() {
            let w = self.weights.map_or(1.0, |w| w[i]).sqrt();
            let v = pose.rotation.rotate(&bp.f_prime);
            let a = pose.t().cross(&bp.f);
            let dx = v.cross(&a);
            let dt = bp.f.cross(&v);
            let j = Vector5::new(dx.x, dx.y, dx.z, b1.dot(&dt), b2.dot(&dt)) * w;
            let r = nec_residual(pose, bp) * w;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    }
}

/// Symmetric PNEC energy with whitened residuals.
pub struct PnecObjective<'a> {
    pub pairs: &'a [BearingPair],
    pub config: EnergyConfig,
}

impl PoseObjective for PnecObjective<'_> {
    fn energy(&self, pose: &RelativePose) -> Result<f64> {
        energy_sym(pose, self.pairs, &self.config)
    }

    fn normal_equations(&self, pose: &RelativePose) -> (Matrix5, Vector5) {
        let mut jtj = Matrix5::zeros();
        let mut jtr = Vector5::zeros();
        for bp in self.pairs {
            if let Some((r, j)) = whitened_residual(pose, bp, &self.config) {
                jtj += j * j.transpose();
                jtr += j * r;
            }
        }
        (jtj, jtr)
    }
}

/// Result of one local optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub pose: RelativePose,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Energy after every accepted step, starting with the initial energy.
    pub energy_trace: Vec<f64>,
}

fn failure(message: &str, last: &RelativePose) -> Error {
    Error::NumericalFailure {
        message: message.into(),
        last: Some(Box::new(*last)),
    }
}

/// Minimizes `obj` from `init` with additive damping `λI`.
///
/// Damping is multiplied by 2 after a rejected step and by 1/3 after an
/// accepted one. Stops on a step below the step tolerance, a relative
/// energy decrease below the function tolerance, or the iteration cap.
pub fn lm_minimize(
    obj: &dyn PoseObjective,
    init: &RelativePose,
    cfg: &SolverConfig,
) -> Result<LmOutcome> {
    const MIN_DAMPING: f64 = 1e-12;
    const MAX_DAMPING: f64 = 1e32;
    let mut pose = *init;
    let mut energy = obj.energy(&pose)?;
    if !energy.is_finite() {
        return Err(failure("non-finite initial energy", &pose));
    }
    let mut lambda = cfg.lm_initial_damping;
    let mut trace = vec![energy];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.lm_max_iterations {
        iterations += 1;
        let (jtj, jtr) = obj.normal_equations(&pose);
        if !jtj.iter().chain(jtr.iter()).all(|x| x.is_finite()) {
            return Err(failure("non-finite jacobian", &pose));
        }
        if jtr.norm() == 0.0 {
            converged = true;
            break;
        }
        let step = (jtj + Matrix5::identity() * lambda)
            .cholesky()
            .map(|c| -c.solve(&jtr))
            .ok_or_else(|| failure("damped normal equations not positive definite", &pose))?;
        if step.norm() < cfg.lm_step_tolerance {
            converged = true;
            break;
        }
        let candidate = retract(&pose, &step);
        let e_new = obj.energy(&candidate)?;
        if e_new.is_finite() && e_new <= energy {
            let decrease = (energy - e_new) / energy.max(f64::MIN_POSITIVE);
            pose = candidate;
            energy = e_new;
            trace.push(energy);
            lambda = (lambda / 3.0).max(MIN_DAMPING);
            if decrease < cfg.lm_function_tolerance {
                converged = true;
                break;
            }
        } else {
            if lambda >= MAX_DAMPING {
                converged = true;
                break;
            }
            lambda = (lambda * 2.0).min(MAX_DAMPING);
        }
    }
    Ok(LmOutcome {
        pose,
        energy,
        iterations,
        converged,
        energy_trace: trace,
    })
}
