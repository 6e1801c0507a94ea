//! Verification suites: finite-difference checks of every analytic
//! derivative, the perturb-and-re-solve oracle for implicit gradients,
//! Monte-Carlo validation of the residual variance, gradient-direction
//! sampling, and the reprojection-error covariance oracle.

use crate::energy::{
    nec_residual, sigma_n_full, variance_sym, BearingPair, EnergyConfig, RelativePose,
};
use crate::geometry::{
    project, propagate_cov, pullback_cov_gradient, so3_exp, unproject, Camera, Cov2,
};
use crate::gradients::{
    chain_to_params, cov_step, energy_gradient, energy_hessian, grad_erot_wrt_pose,
    implicit_covariance_gradient, implicit_erot_gradient, residual_jacobians, retract, CovFrames,
    CovarianceParams,
};
use crate::metrics::e_rot;
use crate::rng::{domain, split, stream};
use crate::solver::{lm_minimize, solve_pnec, triangulate_depths, PnecObjective, SolverConfig};
use crate::synthgen::{batch_problem, generate_problem, BatchMode, PoseSampling, SceneConfig};
use crate::{Error, Result};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Deliberate corruption of an analytic derivative, used to check that the
/// suite catches sign errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    FlipDnDx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random residual configurations for the first-derivative checks.
    pub configurations: usize,
    /// Problems for the implicit-gradient oracle.
    pub argmin_problems: usize,
    pub argmin_points: usize,
    pub derivative_tolerance: f64,
    pub implicit_tolerance: f64,
    pub pairing_tolerance: f64,
    #[serde(skip)]
    pub mutation: Option<Mutation>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            configurations: 100,
            argmin_problems: 20,
            argmin_points: 20,
            derivative_tolerance: 1e-5,
            implicit_tolerance: 1e-3,
            pairing_tolerance: 1e-6,
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub samples: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,samples,max_error,tolerance,passed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6e},{:.1e},{}\n",
                r.name, r.samples, r.max_error, r.tolerance, r.passed
            ));
        }
        out
    }
}

fn row(name: &str, samples: usize, max_error: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        name: name.into(),
        samples,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn rand_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

fn rand_cov2(rng: &mut impl Rng, trace_max: f64) -> Cov2 {
    let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let c = a * a.transpose() + Matrix2::identity() * 0.05;
    c * (rng.random_range(0.1..1.0) * trace_max / c.trace())
}

/// Random pose and correspondence with KITTI-like intrinsics and pixel
/// covariances of trace at most 4 px².
pub fn random_configuration(rng: &mut impl Rng) -> (RelativePose, BearingPair) {
    let cam = Camera::centered(720.0, 1240.0, 370.0);
    let pose = RelativePose::new(
        so3_exp(&(rand_unit(rng) * rng.random_range(0.05..0.5))),
        rand_unit(rng),
    );
    let p = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
    let pp = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
    let (c1, c2) = (rand_cov2(rng, 4.0), rand_cov2(rng, 4.0));
    let bp = BearingPair {
        f: unproject(&p, &cam),
        f_prime: unproject(&pp, &cam),
        cov: propagate_cov(&p, &c1, &cam),
        cov_prime: propagate_cov(&pp, &c2, &cam),
    };
    (pose, bp)
}

/// |a − b| relative to |b|, floored at `floor`.
fn rel(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs().max(floor)
    }
}

fn rotated(pose: &RelativePose, x: &Vector3<f64>) -> RelativePose {
    RelativePose {
        rotation: so3_exp(x).compose(&pose.rotation),
        translation: pose.translation,
    }
}

/// Worst relative errors of the six residual derivatives on one configuration:
/// [∂n/∂x, ∂d_Σ/∂x, ∂d_Σ′/∂x, ∂e_s/∂x, ∂e_s/∂Σ, ∂e_s/∂Σ′].
fn residual_errors(
    pose: &RelativePose,
    bp: &BearingPair,
    cfg: &EnergyConfig,
    mutation: Option<Mutation>,
) -> Result<[f64; 6]> {
    let j = residual_jacobians(pose, bp, cfg)?;
    let eval = |p: &RelativePose, q: &BearingPair| residual_jacobians(p, q, cfg);
    let h = 1e-6;
    let mut fd = [Vector3::zeros(); 4];
    for k in 0..3 {
        let mut d = Vector3::zeros();
        d[k] = h;
        let (p, m) = (
            eval(&rotated(pose, &d), bp)?,
            eval(&rotated(pose, &-d), bp)?,
        );
        fd[0][k] = (p.n - m.n) / (2.0 * h);
        fd[1][k] = (p.d_sigma - m.d_sigma) / (2.0 * h);
        fd[2][k] = (p.d_sigma_prime - m.d_sigma_prime) / (2.0 * h);
        fd[3][k] = (p.e_s - m.e_s) / (2.0 * h);
    }
    let mut dn = j.dn_dx;
    if mutation == Some(Mutation::FlipDnDx) {
        dn = -dn;
    }
    let mut out = [0.0; 6];
    for (slot, (a, b)) in [dn, j.dd_sigma_dx, j.dd_sigma_prime_dx, j.des_dx]
        .iter()
        .zip(&fd)
        .enumerate()
    {
        let floor = 1e-6 * b.amax();
        out[slot] = (0..3).map(|k| rel(a[k], b[k], floor)).fold(0.0, f64::max);
    }
    for (slot, prime) in [(4, false), (5, true)] {
        let hc = cov_step(pose, bp, cfg.regularization, prime, 1e-5);
        let g = if prime {
            j.des_dsigma_prime
        } else {
            j.des_dsigma
        };
        let floor = 1e-6 * g.amax();
        for a in 0..3 {
            for b in a..3 {
                let mut dir = Matrix3::zeros();
                dir[(a, b)] = 1.0;
                dir[(b, a)] = 1.0;
                let (mut qp, mut qm) = (*bp, *bp);
                if prime {
                    qp.cov_prime += dir * hc;
                    qm.cov_prime -= dir * hc;
                } else {
                    qp.cov += dir * hc;
                    qm.cov -= dir * hc;
                }
                let fd = (eval(pose, &qp)?.e_s - eval(pose, &qm)?.e_s) / (2.0 * hc);
                let an = if a == b { g[(a, a)] } else { 2.0 * g[(a, b)] };
                out[slot] = out[slot].max(rel(an, fd, floor));
            }
        }
    }
    Ok(out)
}

/// Minimizer of the symmetric energy to near machine precision: LM with zero
/// tolerances followed by Newton steps on the full Hessian.
pub fn polished_argmin(
    pairs: &[BearingPair],
    init: &RelativePose,
    energy: &EnergyConfig,
) -> Result<RelativePose> {
    let cfg = SolverConfig {
        lm_max_iterations: 400,
        lm_step_tolerance: 0.0,
        lm_function_tolerance: 0.0,
        energy: *energy,
        ..Default::default()
    };
    let obj = PnecObjective {
        pairs,
        config: *energy,
    };
    let mut pose = lm_minimize(&obj, init, &cfg)?.pose;
    for _ in 0..8 {
        let g = energy_gradient(&pose, pairs, energy);
        let h = energy_hessian(&pose, pairs, energy);
        let step = -h
            .cholesky()
            .ok_or(Error::RankDeficient {
                condition: f64::INFINITY,
            })?
            .solve(&g);
        pose = retract(&pose, &step);
    }
    Ok(pose)
}

/// Implicit gradient against perturb-and-re-solve on one generated problem.
/// Returns (relative error over all covariance entries, scaling pairing).
pub fn implicit_oracle_errors(seed: u64, points: usize) -> Result<(f64, f64)> {
    let ecfg = EnergyConfig::default();
    let sp = generate_problem(&SceneConfig {
        points,
        seed,
        ..Default::default()
    })?;
    let (pairs, gt) = (sp.problem_gt().pairs, sp.gt);
    let star = polished_argmin(&pairs, &gt, &ecfg)?;
    let g = implicit_covariance_gradient(&pairs, &star, &gt.rotation, &ecfg)?;
    let entries: Vec<(usize, bool, usize, usize)> = (0..pairs.len())
        .flat_map(|i| [false, true].into_iter().map(move |p| (i, p)))
        .flat_map(|(i, p)| (0..3).flat_map(move |a| (a..3).map(move |b| (i, p, a, b))))
        .collect();
    let terms: Vec<(f64, f64)> = entries
        .par_iter()
        .map(|&(i, prime, a, b)| {
            let base = if prime {
                pairs[i].cov_prime
            } else {
                pairs[i].cov
            };
            let h = 1e-4 * base.norm();
            let mut dir = Matrix3::zeros();
            dir[(a, b)] = 1.0;
            dir[(b, a)] = 1.0;
            let eval = |s: f64| -> Result<f64> {
                let mut q = pairs.clone();
                if prime {
                    q[i].cov_prime += dir * (s * h);
                } else {
                    q[i].cov += dir * (s * h);
                }
                Ok(e_rot(
                    &polished_argmin(&q, &star, &ecfg)?.rotation,
                    &gt.rotation,
                ))
            };
            let fd = (eval(1.0)? - eval(-1.0)?) / (2.0 * h);
            let an = if prime { g.d_cov_prime[i] } else { g.d_cov[i] };
            let analytic = if a == b { an[(a, a)] } else { 2.0 * an[(a, b)] };
            Ok(((fd - analytic).powi(2), fd * fd))
        })
        .collect::<Result<_>>()?;
    let (num, den) = terms
        .iter()
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    let pairing: f64 = pairs
        .iter()
        .enumerate()
        .map(|(i, bp)| {
            g.d_cov[i].component_mul(&bp.cov).sum()
                + g.d_cov_prime[i].component_mul(&bp.cov_prime).sum()
        })
        .sum();
    Ok(((num / den).sqrt(), pairing))
}

fn erot_gradient_error(rng: &mut impl Rng) -> Result<f64> {
    let r_gt = so3_exp(&(rand_unit(rng) * rng.random_range(0.0..3.0)));
    let r = so3_exp(&(rand_unit(rng) * rng.random_range(0.01..3.0))).compose(&r_gt);
    let g = grad_erot_wrt_pose(&r, &r_gt)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let mut d = Vector3::zeros();
        d[k] = h;
        let fd = (e_rot(&so3_exp(&d).compose(&r), &r_gt) - e_rot(&so3_exp(&-d).compose(&r), &r_gt))
            / (2.0 * h);
        worst = worst.max(rel(g[k], fd, 1e-6));
    }
    Ok(worst)
}

fn chain_error(rng: &mut impl Rng) -> f64 {
    let params = CovarianceParams::from_array([
        rng.random_range(-2.0..2.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-2.0..2.0),
    ]);
    let m = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let d = (m + m.transpose()) * 0.5;
    let an = chain_to_params(&d, &params);
    let raw = params.to_array();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let (mut p, mut q) = (raw, raw);
        p[k] += h;
        q[k] -= h;
        let f = |a: [f64; 3]| {
            d.component_mul(&CovarianceParams::from_array(a).cov2())
                .sum()
        };
        let fd = (f(p) - f(q)) / (2.0 * h);
        worst = worst.max(rel(an[k], fd, 1e-6 * d.amax()));
    }
    worst
}

/// dL/dΣ′_2D of one tracked point across `n` problems of a batch, solved
/// from the ground truth with ground-truth covariances.
pub fn gradient_direction_samples(mode: BatchMode, n: usize, seed: u64) -> Result<Vec<Cov2>> {
    let scene = SceneConfig {
        points: 30,
        pose: PoseSampling::Random {
            max_rotation: 3f64.to_radians(),
            baseline: 0.5,
            lateral: 1.0,
        },
        sampling_window: 0.5,
        seed,
        ..Default::default()
    };
    let base = generate_problem(&scene)?;
    let ecfg = EnergyConfig::default();
    let solver = SolverConfig::default();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let sp = batch_problem(&base, &scene, mode, split(seed, domain::VERIFY, 1), i)?;
            let pairs = sp.problem_gt().pairs;
            let star = solve_pnec(&pairs, &sp.gt, &solver)?.pose;
            let g = implicit_erot_gradient(
                &pairs,
                &star,
                &sp.gt.rotation,
                CovFrames::SecondOnly,
                &ecfg,
            )?;
            Ok(pullback_cov_gradient(
                &Vector2::from(sp.points[0].p_prime),
                &g.d_cov_prime[0],
                &sp.camera,
            ))
        })
        .collect()
}

/// Runs every derivative check and the implicit-gradient oracle.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let ecfg = EnergyConfig::default();
    let mut worst = [0.0f64; 6];
    let mut rng = stream(split(cfg.seed, domain::VERIFY, 0), 0);
    for _ in 0..cfg.configurations {
        let (pose, bp) = random_configuration(&mut rng);
        let e = residual_errors(&pose, &bp, &ecfg, cfg.mutation)?;
        for k in 0..6 {
            worst[k] = worst[k].max(e[k]);
        }
    }
    let names = [
        "dn_dx",
        "dd_sigma_dx",
        "dd_sigma_prime_dx",
        "des_dx",
        "des_dsigma",
        "des_dsigma_prime",
    ];
    let mut rows: Vec<CheckRow> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| row(n, cfg.configurations, w, cfg.derivative_tolerance))
        .collect();

    let mut rng = stream(split(cfg.seed, domain::VERIFY, 1), 0);
    let mut erot: f64 = 0.0;
    let mut chain: f64 = 0.0;
    for _ in 0..cfg.configurations {
        erot = erot.max(erot_gradient_error(&mut rng)?);
        chain = chain.max(chain_error(&mut rng));
    }
    rows.push(row("derot_dx", cfg.configurations, erot, 1e-6));
    rows.push(row("chain_to_params", cfg.configurations, chain, 1e-6));

    let mut implicit: f64 = 0.0;
    let mut pairing: f64 = 0.0;
    for k in 0..cfg.argmin_problems as u64 {
        let (r, p) =
            implicit_oracle_errors(split(cfg.seed, domain::VERIFY, 100 + k), cfg.argmin_points)?;
        implicit = implicit.max(r);
        pairing = pairing.max(p.abs());
    }
    rows.push(row(
        "implicit_dl_dsigma",
        cfg.argmin_problems,
        implicit,
        cfg.implicit_tolerance,
    ));
    rows.push(row(
        "scaling_pairing",
        cfg.argmin_problems,
        pairing,
        cfg.pairing_tolerance,
    ));
    Ok(GradcheckReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarApproxConfig {
    pub seed: u64,
    pub focal_lengths: Vec<f64>,
    /// Monte-Carlo samples per correspondence.
    pub samples: usize,
    pub points: usize,
    /// Largest pixel-covariance trace, px².
    pub max_trace: f64,
    /// Scales every covariance; 0 gives the degenerate noise-free sweep.
    pub covariance_scale: f64,
}

impl Default for VarApproxConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            focal_lengths: vec![180.0, 360.0, 720.0, 1440.0],
            samples: 1_000_000,
            points: 10,
            max_trace: 4.0,
            covariance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarApproxRow {
    pub focal: f64,
    /// Mean over points of the first-order symmetric variance.
    pub sigma_s2: f64,
    /// Mean over points of the Monte-Carlo residual variance.
    pub sigma_mc2: f64,
    /// Mean over points of |σ_s² − σ²_MC| / σ²_MC.
    pub rel_error: f64,
    /// Same for tᵀΣₙt including the second-order term.
    pub rel_error_full: f64,
    /// Mean relative standard error of the Monte-Carlo estimates.
    pub mc_rel_std_error: f64,
}

pub fn varapprox_csv(rows: &[VarApproxRow]) -> String {
    let mut out =
        String::from("focal,sigma_s2,sigma_mc2,rel_error,rel_error_full,mc_rel_std_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6e},{:.6e},{:.3e}\n",
            r.focal, r.sigma_s2, r.sigma_mc2, r.rel_error, r.rel_error_full, r.mc_rel_std_error
        ));
    }
    out
}

/// Residual variance by Monte Carlo over pixel noise in both images, pushed
/// through the exact unprojection. The linearized residual, whose variance
/// is known in closed form, serves as a control variate.
///
/// Returns (estimate, standard error).
#[allow(clippy::too_many_arguments)]
fn monte_carlo_variance(
    pose: &RelativePose,
    cam: &Camera,
    p: &Vector2<f64>,
    pp: &Vector2<f64>,
    cov: &Cov2,
    cov_prime: &Cov2,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let bp = BearingPair {
        f: unproject(p, cam),
        f_prime: unproject(pp, cam),
        cov: propagate_cov(p, cov, cam),
        cov_prime: propagate_cov(pp, cov_prime, cam),
    };
    let linear_var = variance_sym(pose, &bp);
    let l1 = cov.cholesky().map(|c| c.l()).unwrap_or_else(Matrix2::zeros);
    let l2 = cov_prime
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(Matrix2::zeros);
    let (jf, jfp) = (
        crate::geometry::unproject_jacobian(p, cam),
        crate::geometry::unproject_jacobian(pp, cam),
    );
    let t = pose.t();
    let v = pose.rotation.rotate(&bp.f_prime);
    let w = v.cross(t);
    let u = pose.rotation.transpose().rotate(&t.cross(&bp.f));
    let e0 = nec_residual(pose, &bp);
    let chunks = 64usize;
    let per = samples.div_ceil(chunks);
    // (Σe, Σl, Σe², Σl², Σel) per chunk, with e and l centred at e0.
    let sums: Vec<[f64; 5]> = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c);
            let mut s = [0.0; 5];
            for _ in 0..per {
                let z1 = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let z2 = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (n1, n2) = (l1 * z1, l2 * z2);
                let q = BearingPair {
                    f: unproject(&(p + n1), cam),
                    f_prime: unproject(&(pp + n2), cam),
                    ..bp
                };
                let e = nec_residual(pose, &q) - e0;
                let l = w.dot(&(jf * n1)) + u.dot(&(jfp * n2));
                s[0] += e;
                s[1] += l;
                s[2] += e * e;
                s[3] += l * l;
                s[4] += e * l;
            }
            s
        })
        .collect();
    let mut s = [0.0; 5];
    for c in &sums {
        for k in 0..5 {
            s[k] += c[k];
        }
    }
    let n = (per * chunks) as f64;
    let (me, ml) = (s[0] / n, s[1] / n);
    let var_e = (s[2] - n * me * me) / (n - 1.0);
    let var_l = (s[3] - n * ml * ml) / (n - 1.0);
    if !(var_l > 0.0) {
        return (var_e.max(0.0), 0.0);
    }
    // Second pass for the control-variate coefficient and the error bar:
    // the squared deviations of e and l are strongly correlated.
    let moments: Vec<[f64; 5]> = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c);
            let mut s = [0.0; 5];
            for _ in 0..per {
                let z1 = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let z2 = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (n1, n2) = (l1 * z1, l2 * z2);
                let q = BearingPair {
                    f: unproject(&(p + n1), cam),
                    f_prime: unproject(&(pp + n2), cam),
                    ..bp
                };
                let a = (nec_residual(pose, &q) - e0 - me).powi(2) - var_e;
                let b = (w.dot(&(jf * n1)) + u.dot(&(jfp * n2)) - ml).powi(2) - var_l;
                s[0] += a * b;
                s[1] += b * b;
                s[2] += a * a;
            }
            s
        })
        .collect();
    let (mut sab, mut sbb, mut saa) = (0.0, 0.0, 0.0);
    for m in &moments {
        sab += m[0];
        sbb += m[1];
        saa += m[2];
    }
    let beta = sab / sbb;
    let estimate = var_e - beta * (var_l - linear_var);
    let resid = (saa - 2.0 * beta * sab + beta * beta * sbb).max(0.0) / n;
    (estimate, (resid / n).sqrt())
}

/// Analytic against Monte-Carlo residual variance over a sweep of focal
/// lengths. The scene is fixed in 3D and the field of view is held constant,
/// so only the angular size of a pixel changes.
pub fn varapprox(cfg: &VarApproxConfig) -> Result<Vec<VarApproxRow>> {
    if cfg.points == 0
        || cfg.samples < 2
        || !(cfg.covariance_scale >= 0.0)
        || cfg.focal_lengths.iter().any(|f| !(*f > 0.0))
    {
        return Err(Error::InvalidInput(
            "varapprox needs points, samples ≥ 2, positive focal lengths".into(),
        ));
    }
    let mut rng = stream(split(cfg.seed, domain::MONTE_CARLO, 0), 0);
    let pose = RelativePose::new(
        so3_exp(&Vector3::new(0.01, -0.03, 0.005)),
        Vector3::new(0.1, -0.05, -1.0),
    );
    let points: Vec<(Vector3<f64>, Cov2, Cov2)> = (0..cfg.points)
        .map(|_| {
            let z = rng.random_range(5.0..20.0);
            let x = Vector3::new(
                rng.random_range(-0.8..0.8) * z,
                rng.random_range(-0.2..0.2) * z,
                z,
            );
            let c1 = rand_cov2(&mut rng, cfg.max_trace) * cfg.covariance_scale;
            let c2 = rand_cov2(&mut rng, cfg.max_trace) * cfg.covariance_scale;
            (x, c1, c2)
        })
        .collect();
    let mut rows = Vec::new();
    for (fi, &f) in cfg.focal_lengths.iter().enumerate() {
        let cam = Camera::centered(f, 1240.0 * f / 720.0, 370.0 * f / 720.0);
        let mut acc = [0.0; 5];
        for (k, (x, c1, c2)) in points.iter().enumerate() {
            let x2 = pose.rotation.transpose().rotate(&(x - pose.t()));
            let (p, pp) = (project(x, &cam), project(&x2, &cam));
            let bp = BearingPair {
                f: unproject(&p, &cam),
                f_prime: unproject(&pp, &cam),
                cov: propagate_cov(&p, c1, &cam),
                cov_prime: propagate_cov(&pp, c2, &cam),
            };
            let s2 = variance_sym(&pose, &bp);
            let full = pose.t().dot(&(sigma_n_full(&pose, &bp) * pose.t()));
            let seed = split(
                cfg.seed,
                domain::MONTE_CARLO,
                1 + (fi * cfg.points + k) as u64,
            );
            let (mc, se) = monte_carlo_variance(&pose, &cam, &p, &pp, c1, c2, cfg.samples, seed);
            let guarded = |a: f64| {
                if mc == 0.0 && a == 0.0 {
                    0.0
                } else {
                    (a - mc).abs() / mc
                }
            };
            acc[0] += s2;
            acc[1] += mc;
            acc[2] += guarded(s2);
            acc[3] += guarded(full);
            acc[4] += if mc == 0.0 { 0.0 } else { se / mc };
        }
        let n = cfg.points as f64;
        rows.push(VarApproxRow {
            focal: f,
            sigma_s2: acc[0] / n,
            sigma_mc2: acc[1] / n,
            rel_error: acc[2] / n,
            rel_error_full: acc[3] / n,
            mc_rel_std_error: acc[4] / n,
        });
    }
    Ok(rows)
}

/// Clip range for reprojection-error covariances, px².
pub const REPROJECTION_CLIP: (f64, f64) = (0.01, 4.0);

/// Isotropic covariances ‖p̃ − p‖² I from the reprojection error of each
/// correspondence under `pose`, clipped to [`REPROJECTION_CLIP`]. The point
/// is triangulated at the midpoint of the two rays.
pub fn reprojection_covariances(
    pose: &RelativePose,
    cam: &Camera,
    pixels: &[(Vector2<f64>, Vector2<f64>)],
) -> Vec<(Cov2, Cov2)> {
    let clip = |d2: f64| Cov2::identity() * d2.clamp(REPROJECTION_CLIP.0, REPROJECTION_CLIP.1);
    pixels
        .iter()
        .map(|(p, pp)| {
            let bp = BearingPair {
                f: unproject(p, cam),
                f_prime: unproject(pp, cam),
                cov: Matrix3::zeros(),
                cov_prime: Matrix3::zeros(),
            };
            match triangulate_depths(pose, &bp) {
                Some((lambda, mu)) if lambda > 0.0 && mu > 0.0 => {
                    let v = pose.rotation.rotate(&bp.f_prime);
                    let x = (bp.f.into_inner() * lambda + pose.t() + v * mu) * 0.5;
                    let x2 = pose.rotation.transpose().rotate(&(x - pose.t()));
                    (
                        clip((project(&x, cam) - p).norm_squared()),
                        clip((project(&x2, cam) - pp).norm_squared()),
                    )
                }
                _ => (clip(f64::INFINITY), clip(f64::INFINITY)),
            }
        })
        .collect()
}
