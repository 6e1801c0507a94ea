//! Synthetic two-view problems: random 3D points seen by two pinhole cameras,
//! per-point anisotropic pixel noise with stored ground-truth covariances, and
//! optional outliers.

use crate::energy::{Correspondence, PnecProblem, RelativePose};
use crate::geometry::{project, so3_exp, Camera, Cov2};
use crate::rng::{domain, split, stream};
use crate::{Error, Result};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rejection-sampling budget per problem.
pub const MAX_ATTEMPTS: usize = 100_000;

/// How the relative pose of a scene is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseSampling {
    /// Axis-angle rotation (radians) and translation (scene units).
    Fixed {
        rotation: [f64; 3],
        translation: [f64; 3],
    },
    /// Rotation with uniform axis and angle in `[0, max_rotation]` (radians);
    /// translation `baseline · normalize(jx, jy, 1)` with `jx, jy` uniform in
    /// `[-lateral, lateral]`. The first frame stays at the origin.
    Random {
        max_rotation: f64,
        baseline: f64,
        lateral: f64,
    },
}

/// Per-point pixel covariance `s R_α diag(β, 1−β) R_αᵀ` with `s` (the trace)
/// and `β` uniform in their ranges and `α` uniform in `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub trace: [f64; 2],
    pub beta: [f64; 2],
}

impl NoiseSpec {
    pub fn isotropic(variance: f64) -> Self {
        Self {
            trace: [2.0 * variance; 2],
            beta: [0.5; 2],
        }
    }

    fn validate(&self) -> Result<()> {
        let [t0, t1] = self.trace;
        let [b0, b1] = self.beta;
        if !(t0 >= 0.0 && t1 >= t0 && t1.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise trace range {t0}..{t1} is invalid"
            )));
        }
        if !(b0 >= 0.0 && b1 >= b0 && b1 <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "noise beta range {b0}..{b1} is invalid"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Cov2 {
        let s = uniform(rng, self.trace);
        let b = uniform(rng, self.beta);
        let a = rng.random_range(0.0..std::f64::consts::PI);
        cov2(s, a, b)
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn cov2(s: f64, alpha: f64, beta: f64) -> Cov2 {
    let (sn, cs) = alpha.sin_cos();
    let r = Matrix2::new(cs, -sn, sn, cs);
    let c = r * Matrix2::new(s * beta, 0.0, 0.0, s * (1.0 - beta)) * r.transpose();
    (c + c.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub points: usize,
    pub depth: [f64; 2],
    pub pose: PoseSampling,
    pub noise: NoiseSpec,
    pub noise_prime: NoiseSpec,
    pub outlier_fraction: f64,
    pub focal: f64,
    pub image: [f64; 2],
    /// Fraction of the image (around the principal point) in which first-frame
    /// points are sampled.
    pub sampling_window: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points: 100,
            depth: [5.0, 20.0],
            pose: PoseSampling::Random {
                max_rotation: 5f64.to_radians(),
                baseline: 1.0,
                lateral: 0.2,
            },
            noise: NoiseSpec {
                trace: [0.5, 2.0],
                beta: [0.05, 0.5],
            },
            noise_prime: NoiseSpec {
                trace: [0.5, 2.0],
                beta: [0.05, 0.5],
            },
            outlier_fraction: 0.0,
            focal: 720.0,
            image: [1240.0, 370.0],
            sampling_window: 1.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn camera(&self) -> Camera {
        Camera::centered(self.focal, self.image[0], self.image[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.points < 8 {
            return bad(format!("need at least 8 points, got {}", self.points));
        }
        if !(self.depth[0] > 0.0 && self.depth[1] >= self.depth[0] && self.depth[1].is_finite()) {
            return bad(format!("depth range {:?} is invalid", self.depth));
        }
        if !(self.focal > 0.0 && self.image[0] > 0.0 && self.image[1] > 0.0) {
            return bad("focal length and image size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier fraction {} not in [0, 1)",
                self.outlier_fraction
            ));
        }
        if !(self.sampling_window > 0.0 && self.sampling_window <= 1.0) {
            return bad(format!(
                "sampling window {} not in (0, 1]",
                self.sampling_window
            ));
        }
        if let PoseSampling::Random {
            max_rotation,
            baseline,
            lateral,
        } = self.pose
        {
            if !(max_rotation >= 0.0 && baseline > 0.0 && lateral >= 0.0) {
                return bad(
                    "random pose ranges must be non-negative with positive baseline".into(),
                );
            }
        }
        self.noise.validate()?;
        self.noise_prime.validate()
    }
}

/// One synthetic correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoint {
    /// Point in the first camera frame.
    pub x: [f64; 3],
    pub p_clean: [f64; 2],
    pub p_prime_clean: [f64; 2],
    pub cov: Cov2,
    pub cov_prime: Cov2,
    pub p: [f64; 2],
    pub p_prime: [f64; 2],
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub camera: Camera,
    /// Scaled ground-truth translation before normalization.
    pub translation: Vector3<f64>,
    pub gt: RelativePose,
    pub points: Vec<SyntheticPoint>,
}

impl SyntheticProblem {
    /// Noisy correspondences with the given pixel covariances.
    pub fn problem_with(
        &self,
        covs: impl Fn(usize, &SyntheticPoint) -> (Cov2, Cov2),
    ) -> PnecProblem {
        let corr = self
            .points
            .iter()
            .enumerate()
            .map(|(i, sp)| {
                let (cov, cov_prime) = covs(i, sp);
                Correspondence {
                    p: sp.p.into(),
                    p_prime: sp.p_prime.into(),
                    cov,
                    cov_prime,
                }
            })
            .collect();
        PnecProblem::new(self.camera, corr)
    }

    /// Noisy correspondences carrying the generator's covariances.
    pub fn problem_gt(&self) -> PnecProblem {
        self.problem_with(|_, sp| (sp.cov, sp.cov_prime))
    }

    /// Noisy correspondences with isotropic covariance `variance · I`.
    pub fn problem_isotropic(&self, variance: f64) -> PnecProblem {
        self.problem_with(|_, _| (Cov2::identity() * variance, Cov2::identity() * variance))
    }

    /// Noise-free correspondences with the generator's covariances.
    pub fn problem_clean(&self) -> PnecProblem {
        let corr = self
            .points
            .iter()
            .map(|sp| Correspondence {
                p: sp.p_clean.into(),
                p_prime: sp.p_prime_clean.into(),
                cov: sp.cov,
                cov_prime: sp.cov_prime,
            })
            .collect();
        PnecProblem::new(self.camera, corr)
    }

    pub fn outlier_count(&self) -> usize {
        self.points.iter().filter(|p| p.outlier).count()
    }
}

fn inside(p: &Vector2<f64>, cam: &Camera, image: [f64; 2]) -> bool {
    let _ = cam;
    p.x >= 0.0 && p.x <= image[0] && p.y >= 0.0 && p.y <= image[1]
}

fn random_axis(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sample_pose(sampling: &PoseSampling, rng: &mut impl Rng) -> (RelativePose, Vector3<f64>) {
    match *sampling {
        PoseSampling::Fixed {
            rotation,
            translation,
        } => {
            let t = Vector3::from(translation);
            (RelativePose::new(so3_exp(&Vector3::from(rotation)), t), t)
        }
        PoseSampling::Random {
            max_rotation,
            baseline,
            lateral,
        } => {
            let angle = uniform(rng, [0.0, max_rotation]);
            let rot = so3_exp(&(random_axis(rng) * angle));
            let j = [
                uniform(rng, [-lateral, lateral]),
                uniform(rng, [-lateral, lateral]),
            ];
            let t = Vector3::new(j[0], j[1], 1.0).normalize() * baseline;
            (RelativePose::new(rot, t), t)
        }
    }
}

fn project_second(
    x: &Vector3<f64>,
    pose: &RelativePose,
    t: &Vector3<f64>,
    cam: &Camera,
    image: [f64; 2],
) -> Option<Vector2<f64>> {
    let x2 = pose.rotation.transpose().rotate(&(x - t));
    if x2.z <= 1e-6 {
        return None;
    }
    let p = project(&x2, cam);
    inside(&p, cam, image).then_some(p)
}

fn sample_noise(rng: &mut impl Rng, cov: &Cov2) -> Vector2<f64> {
    let eig = cov.symmetric_eigen();
    let z: Vector2<f64> = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
    let scaled = Vector2::new(
        eig.eigenvalues[0].max(0.0).sqrt() * z.x,
        eig.eigenvalues[1].max(0.0).sqrt() * z.y,
    );
    eig.eigenvectors * scaled
}

/// Draws fresh observation noise for every point from its stored covariances.
fn resample_noise(points: &mut [SyntheticPoint], seed: u64) {
    let mut rng = stream(split(seed, domain::NOISE, 0), 0);
    for sp in points {
        let p = Vector2::from(sp.p_clean) + sample_noise(&mut rng, &sp.cov);
        let pp = Vector2::from(sp.p_prime_clean) + sample_noise(&mut rng, &sp.cov_prime);
        sp.p = p.into();
        sp.p_prime = pp.into();
    }
}

/// Generates one problem from `cfg.seed`, including outliers.
pub fn generate_problem(cfg: &SceneConfig) -> Result<SyntheticProblem> {
    cfg.validate()?;
    let cam = cfg.camera();
    let mut rng = stream(split(cfg.seed, domain::GEOMETRY, 0), 0);
    let mut cov_rng = stream(split(cfg.seed, domain::COVARIANCES, 0), 0);
    let (gt, t) = sample_pose(&cfg.pose, &mut rng);
    let half = [
        0.5 * cfg.image[0] * cfg.sampling_window,
        0.5 * cfg.image[1] * cfg.sampling_window,
    ];
    let mut points = Vec::with_capacity(cfg.points);
    let mut attempts = 0;
    while points.len() < cfg.points {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "only {} of {} points visible in both frames after {MAX_ATTEMPTS} attempts",
                points.len(),
                cfg.points
            )));
        }
        let p = Vector2::new(
            cam.cx + rng.random_range(-half[0]..=half[0]),
            cam.cy + rng.random_range(-half[1]..=half[1]),
        );
        let z = uniform(&mut rng, cfg.depth);
        let x = Vector3::new((p.x - cam.cx) / cam.fx * z, (p.y - cam.cy) / cam.fy * z, z);
        let Some(pp) = project_second(&x, &gt, &t, &cam, cfg.image) else {
            continue;
        };
        points.push(SyntheticPoint {
            x: x.into(),
            p_clean: p.into(),
            p_prime_clean: pp.into(),
            cov: cfg.noise.sample(&mut cov_rng),
            cov_prime: cfg.noise_prime.sample(&mut cov_rng),
            p: p.into(),
            p_prime: pp.into(),
            outlier: false,
        });
    }
    resample_noise(&mut points, cfg.seed);
    let problem = SyntheticProblem {
        camera: cam,
        translation: t,
        gt,
        points,
    };
    Ok(inject_outliers(
        &problem,
        cfg.outlier_fraction,
        split(cfg.seed, domain::OUTLIERS, 0),
        cfg.image,
    ))
}

/// Replaces `round(fraction · n)` randomly chosen second-frame observations by
/// uniform draws over the image and flags them.
pub fn inject_outliers(
    problem: &SyntheticProblem,
    fraction: f64,
    seed: u64,
    image: [f64; 2],
) -> SyntheticProblem {
    let mut out = problem.clone();
    let n = out.points.len();
    let count = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if count == 0 {
        return out;
    }
    let mut rng = stream(seed, 0);
    for i in rand::seq::index::sample(&mut rng, n, count).into_vec() {
        let sp = &mut out.points[i];
        sp.p_prime = [
            rng.random_range(0.0..image[0]),
            rng.random_range(0.0..image[1]),
        ];
        sp.outlier = true;
    }
    out
}

/// How problems of a batch relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Shared geometry and covariances, fresh noise per problem.
    FixedGeometry,
    /// Shared 3D points and covariances, fresh relative pose and noise per
    /// problem; the first frame stays fixed.
    RandomPose,
}

/// Problem `index` of a batch; independent of the batch size.
pub fn batch_problem(
    base: &SyntheticProblem,
    cfg: &SceneConfig,
    mode: BatchMode,
    seed: u64,
    index: u64,
) -> Result<SyntheticProblem> {
    let mut p = base.clone();
    for sp in &mut p.points {
        sp.outlier = false;
    }
    if mode == BatchMode::RandomPose {
        let mut rng = stream(split(seed, domain::PROBLEM, index), 0);
        let mut attempts = 0;
        'pose: loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Generation(format!(
                    "no pose keeps all points visible after {MAX_ATTEMPTS} attempts"
                )));
            }
            let (gt, t) = sample_pose(&cfg.pose, &mut rng);
            let mut proj = Vec::with_capacity(p.points.len());
            for sp in &p.points {
                match project_second(&Vector3::from(sp.x), &gt, &t, &p.camera, cfg.image) {
                    Some(pp) => proj.push(pp),
                    None => continue 'pose,
                }
            }
            for (sp, pp) in p.points.iter_mut().zip(proj) {
                sp.p_prime_clean = pp.into();
            }
            p.gt = gt;
            p.translation = t;
            break;
        }
    }
    resample_noise(&mut p.points, split(seed, domain::NOISE, index));
    Ok(inject_outliers(
        &p,
        cfg.outlier_fraction,
        split(seed, domain::OUTLIERS, index),
        cfg.image,
    ))
}

/// `n` problems derived from the scene `cfg` (geometry from `cfg.seed`) with
/// per-problem randomness split from `seed`.
pub fn sample_batch(
    cfg: &SceneConfig,
    mode: BatchMode,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticProblem>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut clean_cfg = *cfg;
    clean_cfg.outlier_fraction = 0.0;
    let base = generate_problem(&clean_cfg)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| batch_problem(&base, cfg, mode, seed, i))
        .collect()
}

pub const PROBLEM_FORMAT: &str = "pnec-problem";
pub const PROBLEM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// 3×3 rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(pose: &RelativePose) -> Self {
        let m = pose.rotation.matrix();
        Self {
            rotation: std::array::from_fn(|k| m[(k / 3, k % 3)]),
            translation: (*pose.t()).into(),
        }
    }

    pub fn to_pose(&self) -> Result<RelativePose> {
        let m = nalgebra::Matrix3::from_row_slice(&self.rotation);
        let rot = crate::geometry::Rotation::from_matrix_unchecked(m);
        if !(rot.orthogonality_error() < 1e-9 && m.determinant() > 0.0) {
            return Err(Error::Parse("rotation is not orthonormal".into()));
        }
        let t = Vector3::from(self.translation);
        if !(t.norm() > 0.0) {
            return Err(Error::Parse("translation must be non-zero".into()));
        }
        Ok(RelativePose::new(rot, t))
    }
}

/// Upper triangle `(xx, xy, yy)` of a symmetric 2×2 matrix.
pub fn cov_to_triple(c: &Cov2) -> [f64; 3] {
    [c[(0, 0)], c[(0, 1)], c[(1, 1)]]
}

pub fn cov_from_triple(t: [f64; 3]) -> Cov2 {
    Matrix2::new(t[0], t[1], t[1], t[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub x: [f64; 3],
    pub p_clean: [f64; 2],
    pub p_prime_clean: [f64; 2],
    pub cov: [f64; 3],
    pub cov_prime: [f64; 3],
    pub p: [f64; 2],
    pub p_prime: [f64; 2],
    pub outlier: bool,
}

/// Versioned on-disk form of a [`SyntheticProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub format: String,
    pub version: u32,
    pub camera: Camera,
    /// Ground-truth pose; the translation keeps its scene-unit length.
    pub gt: PoseRecord,
    pub points: Vec<PointRecord>,
}

impl SyntheticProblem {
    pub fn to_record(&self) -> ProblemRecord {
        ProblemRecord {
            format: PROBLEM_FORMAT.into(),
            version: PROBLEM_FORMAT_VERSION,
            camera: self.camera,
            gt: PoseRecord {
                translation: self.translation.into(),
                ..PoseRecord::from_pose(&self.gt)
            },
            points: self
                .points
                .iter()
                .map(|sp| PointRecord {
                    x: sp.x,
                    p_clean: sp.p_clean,
                    p_prime_clean: sp.p_prime_clean,
                    cov: cov_to_triple(&sp.cov),
                    cov_prime: cov_to_triple(&sp.cov_prime),
                    p: sp.p,
                    p_prime: sp.p_prime,
                    outlier: sp.outlier,
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &ProblemRecord) -> Result<Self> {
        if rec.format != PROBLEM_FORMAT || rec.version != PROBLEM_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported problem format {} v{}",
                rec.format, rec.version
            )));
        }
        let gt = rec.gt.to_pose()?;
        Ok(Self {
            camera: Camera::new(rec.camera.fx, rec.camera.fy, rec.camera.cx, rec.camera.cy)?,
            translation: Vector3::from(rec.gt.translation),
            gt,
            points: rec
                .points
                .iter()
                .map(|r| SyntheticPoint {
                    x: r.x,
                    p_clean: r.p_clean,
                    p_prime_clean: r.p_prime_clean,
                    cov: cov_from_triple(r.cov),
                    cov_prime: cov_from_triple(r.cov_prime),
                    p: r.p,
                    p_prime: r.p_prime,
                    outlier: r.outlier,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("problem records always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: ProblemRecord =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_record(&rec)
    }
}
