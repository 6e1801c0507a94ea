//! Relative pose estimation with the symmetric probabilistic normal epipolar
//! constraint (PNEC), implicit differentiation of the estimated rotation with
//! respect to per-feature covariances, and a covariance learning loop built on
//! top of it.
//!
//! Pose convention: a [`RelativePose`] `(R, t)` maps points from the second
//! camera frame into the first, `X₁ = R X₂ + t`, so the epipolar residual of a
//! bearing pair is `tᵀ(f × R f′)`.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod energy;
pub mod geometry;
pub mod gradients;
pub mod io;
pub mod learning;
pub mod metrics;
pub mod rng;
pub mod solver;
pub mod synthgen;
pub mod verify;

pub use energy::{BearingPair, Correspondence, EnergyConfig, PnecProblem, RelativePose};
pub use geometry::{Camera, Cov2, Cov3, Rotation, UnitVector3};
pub use solver::{SolveReport, SolverConfig};

use std::fmt;

/// Pipeline stage, carried by errors raised inside the multi-stage solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ransac,
    NecLs,
    Pnec,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ransac => "ransac",
            Stage::NecLs => "nec-ls",
            Stage::Pnec => "pnec",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("ill-posed energy: every residual variance is zero")]
    IllPosedEnergy,
    #[error("numerical failure: {message}")]
    NumericalFailure {
        message: String,
        last: Option<Box<RelativePose>>,
    },
    #[error("rank-deficient hessian (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("derivative undefined: {0}")]
    DerivativeUndefined(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error("problem generation failed: {0}")]
    Generation(String),
    #[error("training diverged at epoch {epoch}: loss {loss:.6e} > 10 x initial {initial:.6e}")]
    Divergence {
        epoch: usize,
        loss: f64,
        initial: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
