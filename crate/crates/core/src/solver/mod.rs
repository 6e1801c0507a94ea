//! Pose estimation: eight-point RANSAC, NEC least squares and PNEC refinement.

mod eight_point;
mod lm;
mod ransac;

pub use eight_point::{eight_point, select_by_cheirality, triangulate_depths, EightPointEstimate};
pub use lm::{lm_minimize, LmOutcome, NecLsObjective, PnecObjective, PoseObjective};
pub use ransac::{ransac, RansacOutcome};

use crate::energy::{energy_nec_ls, BearingPair, EnergyConfig, PnecProblem, RelativePose};
use crate::geometry::so3_exp;
use crate::{Error, Result, Stage};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lm_max_iterations: usize,
    pub lm_initial_damping: f64,
    pub lm_step_tolerance: f64,
    pub lm_function_tolerance: f64,
    pub ransac_iterations: usize,
    /// Inlier threshold on the squared algebraic residual.
    pub ransac_threshold: f64,
    /// Maximum angle (radians) of the random initialization perturbation.
    pub perturbation_scale: f64,
    pub seed: u64,
    pub energy: EnergyConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lm_max_iterations: 100,
            lm_initial_damping: 1e7,
            lm_step_tolerance: 1e-12,
            lm_function_tolerance: 1e-12,
            ransac_iterations: 5000,
            ransac_threshold: 1e-6,
            perturbation_scale: 1f64.to_radians(),
            seed: 0,
            energy: EnergyConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        let bad = |what: &str| Err(Error::InvalidInput(format!("{what} must be positive")));
        if self.lm_max_iterations == 0 {
            return bad("lm_max_iterations");
        }
        if !(self.lm_initial_damping > 0.0) {
            return bad("lm_initial_damping");
        }
        if self.ransac_iterations == 0 {
            return bad("ransac_iterations");
        }
        if !(self.ransac_threshold > 0.0) {
            return bad("ransac_threshold");
        }
        if !(self.lm_step_tolerance >= 0.0
            && self.lm_function_tolerance >= 0.0
            && self.perturbation_scale >= 0.0)
        {
            return Err(Error::InvalidInput(
                "tolerances must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub stage: Stage,
    pub pose: RelativePose,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub pose: RelativePose,
    pub inliers: Vec<bool>,
    pub stages: Vec<StageResult>,
    pub converged: bool,
    pub low_parallax: bool,
}

impl SolveReport {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&m| m).count()
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// Refines `init` on the symmetric PNEC energy.
pub fn solve_pnec(
    pairs: &[BearingPair],
    init: &RelativePose,
    cfg: &SolverConfig,
) -> Result<LmOutcome> {
    let obj = PnecObjective {
        pairs,
        config: cfg.energy,
    };
    lm_minimize(&obj, init, cfg)
}

/// Refines `init` on the NEC least-squares energy.
pub fn solve_nec_ls(
    pairs: &[BearingPair],
    init: &RelativePose,
    cfg: &SolverConfig,
) -> Result<LmOutcome> {
    lm_minimize(
        &NecLsObjective {
            pairs,
            weights: None,
        },
        init,
        cfg,
    )
}

/// RANSAC, then NEC least squares on the inliers, then PNEC on the inliers.
///
/// The NEC stage starts from whichever of the RANSAC pose and `init` has the
/// lower NEC energy on the inliers.
pub fn estimate_pose_multistage(
    problem: &PnecProblem,
    init: Option<&RelativePose>,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    let rs = ransac(&problem.pairs, cfg).map_err(|e| e.in_stage(Stage::Ransac))?;
    let pairs: Vec<BearingPair> = problem
        .pairs
        .iter()
        .zip(&rs.inliers)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    if pairs.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: pairs.len(),
        }
        .in_stage(Stage::Ransac));
    }
    let mut stages = vec![StageResult {
        stage: Stage::Ransac,
        pose: rs.pose,
        energy: energy_nec_ls(&rs.pose, &pairs, None),
        iterations: rs.iterations,
        converged: true,
    }];
    let mut start = rs.pose;
    if let Some(init) = init {
        if energy_nec_ls(init, &pairs, None) < stages[0].energy {
            start = *init;
        }
    }
    let nec = solve_nec_ls(&pairs, &start, cfg).map_err(|e| e.in_stage(Stage::NecLs))?;
    stages.push(StageResult {
        stage: Stage::NecLs,
        pose: nec.pose,
        energy: nec.energy,
        iterations: nec.iterations,
        converged: nec.converged,
    });
    let pnec = solve_pnec(&pairs, &nec.pose, cfg).map_err(|e| e.in_stage(Stage::Pnec))?;
    stages.push(StageResult {
        stage: Stage::Pnec,
        pose: pnec.pose,
        energy: pnec.energy,
        iterations: pnec.iterations,
        converged: pnec.converged,
    });
    Ok(SolveReport {
        pose: pnec.pose,
        inliers: rs.inliers,
        converged: nec.converged && pnec.converged,
        low_parallax: rs.low_parallax,
        stages,
    })
}

fn random_direction(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// Perturbs a pose by a rotation of random axis and angle uniform in
/// `[0, scale]`, and tilts the translation direction by the same bound.
pub fn perturb_pose(pose: &RelativePose, scale: f64, rng: &mut impl Rng) -> RelativePose {
    let rot =
        so3_exp(&(random_direction(rng) * rng.random_range(0.0..=scale))).compose(&pose.rotation);
    let axis = random_direction(rng);
    let tilt = so3_exp(&(axis.cross(pose.t()).normalize() * rng.random_range(0.0..=scale)));
    let t = tilt.rotate(pose.t());
    RelativePose::new(
        rot,
        if t.iter().all(|x| x.is_finite()) {
            t
        } else {
            *pose.t()
        },
    )
}
