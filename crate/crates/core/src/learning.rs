//! Covariance learning with ADAM on implicit gradients of the rotational error.
//!
//! Every correspondence index owns its own pixel covariance parameters. Each
//! training problem is solved with the symmetric PNEC energy from a perturbed
//! ground-truth pose, and the gradient of the rotational error at the
//! minimizer is pushed back onto the parameters.

use crate::energy::{sigma_n_full, variance_sym, BearingPair, RelativePose};
use crate::geometry::{propagate_cov, pullback_cov_gradient, so3_log, unproject, Cov2, Rotation};
use crate::gradients::{chain_to_params, implicit_erot_gradient, CovFrames, CovarianceParams};
use crate::metrics::{e_rot, sigma_norm_error};
use crate::rng::{domain, split, stream};
use crate::solver::{perturb_pose, solve_nec_ls, solve_pnec, SolverConfig};
use crate::synthgen::{
    batch_problem, generate_problem, BatchMode, NoiseSpec, PoseSampling, SceneConfig,
    SyntheticProblem,
};
use crate::{Error, Result};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid ADAM settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            config,
        }
    }
}

/// Bias-corrected ADAM update. A non-finite gradient leaves both the state and
/// the parameters untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "ADAM shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure {
            message: format!("non-finite gradient at parameter {k}: {}", grads[k]),
            last: None,
        });
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
    }
    Ok(())
}

/// Supervised training loss, the rotational error.
pub fn supervised_loss(r_est: &Rotation, r_gt: &Rotation) -> f64 {
    e_rot(r_est, r_gt)
}

/// Pairs of the image triplet, in the order of the rotations passed around.
pub const CYCLE_SET: [(usize, usize); 3] = [(1, 2), (2, 3), (3, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletLossConfig {
    pub lambda_anchor: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self { lambda_anchor: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLoss {
    pub total: f64,
    pub cycle: f64,
    pub anchor: f64,
    /// Loss derivatives under left perturbations of R₁₂, R₂₃, R₃₁.
    pub grads: [Vector3<f64>; 3],
}

fn unit_axis(r: &Rotation) -> (f64, Vector3<f64>) {
    let phi = so3_log(r);
    let theta = phi.norm();
    if theta < crate::gradients::MIN_ROTATION_ERROR {
        (theta, Vector3::zeros())
    } else {
        (theta, phi / theta)
    }
}

/// Cycle-consistency loss ∠(R₃₁R₂₃R₁₂) plus λ times the anchor distances
/// Σ ∠(R_ij R_ij,NECᵀ), with derivatives.
pub fn self_supervised_loss_grad(
    poses: &[Rotation; 3],
    anchors: &[Rotation; 3],
    cfg: &TripletLossConfig,
) -> Result<TripletLoss> {
    if !(cfg.lambda_anchor >= 0.0) {
        return Err(Error::InvalidInput(
            "lambda_anchor must be non-negative".into(),
        ));
    }
    let [r12, r23, r31] = poses;
    let cyc = r31.compose(r23).compose(r12);
    let (cycle, axis) = unit_axis(&cyc);
    let mut grads = [
        r31.compose(r23).transpose().rotate(&axis),
        r31.transpose().rotate(&axis),
        axis,
    ];
    let mut anchor = 0.0;
    for k in 0..3 {
        let (a, ax) = unit_axis(&poses[k].compose(&anchors[k].transpose()));
        anchor += a;
        grads[k] += ax * cfg.lambda_anchor;
    }
    Ok(TripletLoss {
        total: cycle + cfg.lambda_anchor * anchor,
        cycle,
        anchor,
        grads,
    })
}

pub fn self_supervised_loss(
    poses: &[Rotation; 3],
    anchors: &[Rotation; 3],
    cfg: &TripletLossConfig,
) -> Result<f64> {
    Ok(self_supervised_loss_grad(poses, anchors, cfg)?.total)
}

/// Initial covariance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovInit {
    /// `init_variance · I` for every point.
    ScaledIdentity,
    /// The generator's covariances.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scene: SceneConfig,
    /// Problems per epoch.
    pub problems: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub init: CovInit,
    pub init_variance: f64,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Abort once an epoch-mean loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Problems whose geometry enters the normalized-variance error.
    pub sigma_eval_problems: usize,
    /// Evaluate NEC-LS, unit-covariance and ground-truth-covariance baselines
    /// on the evaluation problems after the last epoch.
    pub evaluate_baselines: bool,
    /// Draw fresh noise (and, for random poses, fresh poses) every epoch.
    /// Otherwise every epoch revisits the evaluation problems.
    pub resample_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::overfit_default()
    }
}

impl TrainConfig {
    /// Fixed geometry, fresh noise per problem, both frames learned.
    pub fn overfit_default() -> Self {
        Self {
            scene: SceneConfig {
                noise: NoiseSpec {
                    trace: [0.5, 4.0],
                    beta: [0.02, 0.3],
                },
                noise_prime: NoiseSpec {
                    trace: [0.5, 4.0],
                    beta: [0.02, 0.3],
                },
                ..SceneConfig::default()
            },
            problems: 12_800,
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig {
                lr: 5e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
            init: CovInit::ScaledIdentity,
            init_variance: 1.0,
            solver: SolverConfig::default(),
            seed: 0,
            divergence_factor: 10.0,
            sigma_eval_problems: 1,
            evaluate_baselines: true,
            resample_each_epoch: true,
        }
    }

    /// Random second pose per problem, small isotropic first-frame noise,
    /// only second-frame covariances learned.
    pub fn diverse_default() -> Self {
        let base = Self::overfit_default();
        Self {
            scene: SceneConfig {
                pose: PoseSampling::Random {
                    max_rotation: 3f64.to_radians(),
                    baseline: 0.5,
                    lateral: 1.0,
                },
                noise: NoiseSpec::isotropic(0.1),
                noise_prime: NoiseSpec {
                    trace: [0.5, 4.0],
                    beta: [0.02, 0.3],
                },
                sampling_window: 0.5,
                ..base.scene
            },
            adam: AdamConfig {
                lr: 5e-3,
                ..base.adam
            },
            sigma_eval_problems: 32,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.solver.validate()?;
        self.adam.validate()?;
        if self.problems == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "problems and batch_size must be positive".into(),
            ));
        }
        if !(self.init_variance > 0.0) {
            return Err(Error::InvalidInput("init_variance must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::InvalidInput(
                "divergence_factor must exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// One learning-curve row, evaluated on the evaluation problems with the
/// parameters at the end of the epoch (epoch 0: initial parameters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_e_rot: f64,
    pub mean_sigma_norm_err: f64,
    pub mean_cov_err: f64,
    /// Mean loss over the epoch's training problems.
    pub train_e_rot: Option<f64>,
    /// Problems skipped during evaluation and training.
    pub skipped: usize,
}

/// Mean rotational error on the evaluation problems after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub nec_ls: f64,
    pub pnec_unit: f64,
    pub pnec_ground_truth: f64,
    pub pnec_learned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub loss: f64,
    pub initial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub params: Vec<CovarianceParams>,
    pub params_prime: Vec<CovarianceParams>,
    pub ground_truth: Vec<Cov2>,
    pub ground_truth_prime: Vec<Cov2>,
    /// Per-point normalized Frobenius error of the learned covariances.
    pub cov_errors: Vec<f64>,
    pub baselines: Option<Baselines>,
    pub diverged: Option<Divergence>,
}

impl TrainOutcome {
    /// Turns a divergence into an error.
    pub fn check(&self) -> Result<()> {
        match &self.diverged {
            Some(d) => Err(Error::Divergence {
                epoch: d.epoch,
                loss: d.loss,
                initial: d.initial,
            }),
            None => Ok(()),
        }
    }

    pub fn learned_covariances(&self) -> (Vec<Cov2>, Vec<Cov2>) {
        (
            self.params.iter().map(|p| p.cov2()).collect(),
            self.params_prime.iter().map(|p| p.cov2()).collect(),
        )
    }
}

pub fn learning_curve_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,mean_e_rot,mean_sigma_norm_err,mean_cov_err\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            r.epoch, r.mean_e_rot, r.mean_sigma_norm_err, r.mean_cov_err
        ));
    }
    out
}

/// Covariance recovery table: one row per point.
pub fn cov_recovery_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::from("point,normalized_frobenius_error\n");
    for (i, e) in outcome.cov_errors.iter().enumerate() {
        out.push_str(&format!("{i},{e:.12e}\n"));
    }
    out
}

/// Mean over points of ‖Σ̂ᵢ − Σ̂ᵢ,gt‖_F / ‖Σ̂ᵢ,gt‖_F where both sets are divided
/// by their mean trace.
pub fn normalized_cov_errors(learned: &[Cov2], truth: &[Cov2]) -> Vec<f64> {
    let mean_trace = |s: &[Cov2]| s.iter().map(|c| c.trace()).sum::<f64>() / s.len().max(1) as f64;
    let (ml, mt) = (mean_trace(learned), mean_trace(truth));
    learned
        .iter()
        .zip(truth)
        .map(|(l, t)| {
            let tn = t / mt;
            (l / ml - tn).norm() / tn.norm()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Noisy observations of one training problem.
struct Sample {
    gt: RelativePose,
    p: Vec<Vector2<f64>>,
    p_prime: Vec<Vector2<f64>>,
}

struct Dataset {
    base: SyntheticProblem,
    samples: Vec<Sample>,
    /// Noise-free problems for the normalized-variance error.
    clean: Vec<SyntheticProblem>,
}

fn scene_of(cfg: &TrainConfig) -> SceneConfig {
    SceneConfig {
        outlier_fraction: 0.0,
        ..cfg.scene
    }
}

fn build_samples(
    base: &SyntheticProblem,
    cfg: &TrainConfig,
    mode: BatchMode,
    seed: u64,
    keep: usize,
) -> Result<(Vec<Sample>, Vec<SyntheticProblem>)> {
    let scene = scene_of(cfg);
    let problems: Vec<(Sample, Option<SyntheticProblem>)> = (0..cfg.problems as u64)
        .into_par_iter()
        .map(|i| {
            let sp = batch_problem(base, &scene, mode, seed, i)?;
            let sample = Sample {
                gt: sp.gt,
                p: sp.points.iter().map(|q| Vector2::from(q.p)).collect(),
                p_prime: sp.points.iter().map(|q| Vector2::from(q.p_prime)).collect(),
            };
            Ok((sample, ((i as usize) < keep).then_some(sp)))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(problems.len());
    let mut clean = Vec::new();
    for (s, c) in problems {
        samples.push(s);
        clean.extend(c);
    }
    Ok((samples, clean))
}

fn build_dataset(cfg: &TrainConfig, mode: BatchMode) -> Result<Dataset> {
    let base = generate_problem(&scene_of(cfg))?;
    let (samples, clean) = build_samples(
        &base,
        cfg,
        mode,
        cfg.seed,
        cfg.sigma_eval_problems.min(cfg.problems),
    )?;
    Ok(Dataset {
        base,
        samples,
        clean,
    })
}

/// Seed of the problems drawn for a training epoch; epoch 0 is the
/// evaluation set.
fn epoch_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    if cfg.resample_each_epoch && epoch > 0 {
        split(cfg.seed, domain::PROBLEM, epoch as u64)
    } else {
        cfg.seed
    }
}

fn pairs_for(
    sample: &Sample,
    cam: &crate::geometry::Camera,
    covs: &[Cov2],
    covs_prime: &[Cov2],
) -> Vec<BearingPair> {
    sample
        .p
        .iter()
        .zip(&sample.p_prime)
        .enumerate()
        .map(|(k, (p, pp))| BearingPair {
            f: unproject(p, cam),
            f_prime: unproject(pp, cam),
            cov: propagate_cov(p, &covs[k], cam),
            cov_prime: propagate_cov(pp, &covs_prime[k], cam),
        })
        .collect()
}

fn init_pose(cfg: &TrainConfig, sample: &Sample, index: usize) -> RelativePose {
    let mut rng = stream(split(cfg.seed, domain::INIT_JITTER, index as u64), 0);
    perturb_pose(&sample.gt, cfg.solver.perturbation_scale, &mut rng)
}

/// Mean e_rot over all problems for fixed covariances.
fn evaluate(
    cfg: &TrainConfig,
    data: &Dataset,
    covs: &[Cov2],
    covs_prime: &[Cov2],
    nec_ls: bool,
) -> (f64, usize) {
    let cam = data.base.camera;
    let errs: Vec<Option<f64>> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pairs = pairs_for(s, &cam, covs, covs_prime);
            let init = init_pose(cfg, s, i);
            let out = if nec_ls {
                solve_nec_ls(&pairs, &init, &cfg.solver)
            } else {
                solve_pnec(&pairs, &init, &cfg.solver)
            };
            out.ok().map(|o| e_rot(&o.pose.rotation, &s.gt.rotation))
        })
        .collect();
    let ok: Vec<f64> = errs.iter().flatten().copied().collect();
    (mean(&ok), errs.len() - ok.len())
}

fn sigma_error(data: &Dataset, covs: &[Cov2], covs_prime: &[Cov2]) -> f64 {
    let errs: Vec<f64> = data
        .clean
        .iter()
        .filter_map(|sp| {
            let learned = sp.problem_clean();
            let learned: Vec<f64> = learned
                .correspondences
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let bp = BearingPair {
                        cov: propagate_cov(&c.p, &covs[k], &sp.camera),
                        cov_prime: propagate_cov(&c.p_prime, &covs_prime[k], &sp.camera),
                        ..learned.pairs[k]
                    };
                    variance_sym(&sp.gt, &bp)
                })
                .collect();
            let truth: Vec<f64> = sp
                .problem_clean()
                .pairs
                .iter()
                .map(|bp| {
                    let t = sp.gt.t();
                    t.dot(&(sigma_n_full(&sp.gt, bp) * t))
                })
                .collect();
            sigma_norm_error(&learned, &truth).ok()
        })
        .collect();
    mean(&errs)
}

fn check_params(params: &[CovarianceParams]) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        let (s, b) = (p.scale(), p.beta());
        if !(s > 0.0 && s.is_finite() && b > 0.0 && b < 1.0 && p.alpha().is_finite()) {
            return Err(Error::NumericalFailure {
                message: format!("covariance parameters of point {i} left the valid range: {p:?}"),
                last: None,
            });
        }
    }
    Ok(())
}

/// Covariance learning loop shared by both synthetic experiments.
pub fn train(cfg: &TrainConfig, mode: BatchMode, frames: CovFrames) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = build_dataset(cfg, mode)?;
    let n_pts = data.base.points.len();
    let cam = data.base.camera;
    let gt1: Vec<Cov2> = data.base.points.iter().map(|p| p.cov).collect();
    let gt2: Vec<Cov2> = data.base.points.iter().map(|p| p.cov_prime).collect();
    let init_params = |gt: &[Cov2]| -> Vec<CovarianceParams> {
        match cfg.init {
            CovInit::ScaledIdentity => vec![CovarianceParams::isotropic(cfg.init_variance); n_pts],
            CovInit::GroundTruth => gt.iter().map(CovarianceParams::from_cov2).collect(),
        }
    };
    let learn_first = frames == CovFrames::Both;
    let mut params = init_params(&gt1);
    let mut params_prime = init_params(&gt2);
    let covs_of = |p: &[CovarianceParams], fixed: Option<&[Cov2]>| -> Vec<Cov2> {
        match fixed {
            Some(f) => f.to_vec(),
            None => p.iter().map(|q| q.cov2()).collect(),
        }
    };
    let fixed_first = (!learn_first).then_some(&gt1[..]);
    let cov_err = |p1: &[CovarianceParams], p2: &[CovarianceParams]| -> (f64, Vec<f64>) {
        let mut errs = normalized_cov_errors(&covs_of(p2, None), &gt2);
        if learn_first {
            let e1 = normalized_cov_errors(&covs_of(p1, None), &gt1);
            errs = errs.iter().zip(&e1).map(|(a, b)| 0.5 * (a + b)).collect();
        }
        (mean(&errs), errs)
    };

    let stride = if learn_first { 6 } else { 3 };
    let mut flat: Vec<f64> = Vec::with_capacity(stride * n_pts);
    let pack = |p1: &[CovarianceParams], p2: &[CovarianceParams], out: &mut Vec<f64>| {
        out.clear();
        for k in 0..n_pts {
            if learn_first {
                out.extend(p1[k].to_array());
            }
            out.extend(p2[k].to_array());
        }
    };
    let mut adam = AdamState::new(stride * n_pts, cfg.adam);

    let (c1, c2) = (covs_of(&params, fixed_first), covs_of(&params_prime, None));
    let (initial, skipped0) = evaluate(cfg, &data, &c1, &c2, false);
    let mut rows = vec![EpochRow {
        epoch: 0,
        mean_e_rot: initial,
        mean_sigma_norm_err: sigma_error(&data, &c1, &c2),
        mean_cov_err: cov_err(&params, &params_prime).0,
        train_e_rot: None,
        skipped: skipped0,
    }];
    let mut diverged = None;

    for epoch in 1..=cfg.epochs {
        let fresh;
        let samples = if epoch_seed(cfg, epoch) == cfg.seed {
            &data.samples
        } else {
            fresh = build_samples(&data.base, cfg, mode, epoch_seed(cfg, epoch), 0)?.0;
            &fresh
        };
        let mut order: Vec<usize> = (0..cfg.problems).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream(split(cfg.seed, domain::SHUFFLE, epoch as u64), 0);
            order.shuffle(&mut rng);
        }
        let mut losses = Vec::with_capacity(cfg.problems);
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let c1 = covs_of(&params, fixed_first);
            let c2 = covs_of(&params_prime, None);
            let results: Vec<Option<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let pairs = pairs_for(s, &cam, &c1, &c2);
                    let star = solve_pnec(&pairs, &init_pose(cfg, s, i), &cfg.solver)
                        .ok()?
                        .pose;
                    let g = implicit_erot_gradient(
                        &pairs,
                        &star,
                        &s.gt.rotation,
                        frames,
                        &cfg.solver.energy,
                    )
                    .ok()?;
                    let mut grad = Vec::with_capacity(stride * n_pts);
                    for k in 0..n_pts {
                        if learn_first {
                            let g2 = pullback_cov_gradient(&s.p[k], &g.d_cov[k], &cam);
                            grad.extend(chain_to_params(&g2, &params[k]));
                        }
                        let g2 = pullback_cov_gradient(&s.p_prime[k], &g.d_cov_prime[k], &cam);
                        grad.extend(chain_to_params(&g2, &params_prime[k]));
                    }
                    Some((g.loss, grad))
                })
                .collect();
            let mut sum = vec![0.0; stride * n_pts];
            let mut count = 0usize;
            for r in &results {
                match r {
                    Some((loss, grad)) => {
                        losses.push(*loss);
                        for (a, b) in sum.iter_mut().zip(grad) {
                            *a += b;
                        }
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
            if count == 0 {
                continue;
            }
            for a in &mut sum {
                *a /= count as f64;
            }
            pack(&params, &params_prime, &mut flat);
            adam_step(&mut adam, &mut flat, &sum)?;
            for k in 0..n_pts {
                let base = stride * k;
                if learn_first {
                    params[k] =
                        CovarianceParams::from_array([flat[base], flat[base + 1], flat[base + 2]]);
                }
                let o = base + stride - 3;
                params_prime[k] = CovarianceParams::from_array([flat[o], flat[o + 1], flat[o + 2]]);
            }
            check_params(&params)?;
            check_params(&params_prime)?;
        }
        let (c1, c2) = (covs_of(&params, fixed_first), covs_of(&params_prime, None));
        let (loss, eval_skipped) = evaluate(cfg, &data, &c1, &c2, false);
        rows.push(EpochRow {
            epoch,
            mean_e_rot: loss,
            mean_sigma_norm_err: sigma_error(&data, &c1, &c2),
            mean_cov_err: cov_err(&params, &params_prime).0,
            train_e_rot: Some(mean(&losses)),
            skipped: skipped + eval_skipped,
        });
        if !(loss <= cfg.divergence_factor * initial) {
            diverged = Some(Divergence {
                epoch,
                loss,
                initial,
            });
            break;
        }
    }

    let baselines = (cfg.evaluate_baselines && diverged.is_none()).then(|| {
        let unit = vec![Cov2::identity(); n_pts];
        Baselines {
            nec_ls: evaluate(cfg, &data, &unit, &unit, true).0,
            pnec_unit: evaluate(cfg, &data, &unit, &unit, false).0,
            pnec_ground_truth: evaluate(cfg, &data, &gt1, &gt2, false).0,
            pnec_learned: rows.last().map_or(f64::NAN, |r| r.mean_e_rot),
        }
    });
    let (_, cov_errors) = cov_err(&params, &params_prime);
    Ok(TrainOutcome {
        rows,
        params: if learn_first {
            params
        } else {
            gt1.iter().map(CovarianceParams::from_cov2).collect()
        },
        params_prime,
        ground_truth: gt1,
        ground_truth_prime: gt2,
        cov_errors,
        baselines,
        diverged,
    })
}

/// Experiment with one fixed geometry and fresh noise per problem; both
/// frames' covariances are learned.
pub fn train_overfit_fixed_geometry(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(cfg, BatchMode::FixedGeometry, CovFrames::Both)
}

/// Experiment with a random relative pose per problem and a fixed first
/// frame; only second-frame covariances are learned, first-frame covariances
/// are the generator's.
pub fn train_diverse_geometry(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(cfg, BatchMode::RandomPose, CovFrames::SecondOnly)
}
