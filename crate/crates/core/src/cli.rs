//! Command-line front end.
//!
//! Every command reads an optional TOML [`RunConfig`] (keys mirror the config
//! types; absent keys keep their defaults), writes its artifacts into `--out`
//! and finishes with a `manifest.json`. Output bytes depend only on the
//! config, the master seed and the inputs, never on the thread count, which
//! is taken from `PNEC_THREADS`.
//!
//! Exit codes: 0 success, 2 usage or parse error, 3 numerical failure or
//! divergence, 4 verification breach.

use crate::energy::{PnecProblem, RelativePose};
use crate::geometry::Camera;
use crate::gradients::CovarianceParams;
use crate::io::{self, FileDigest, Manifest};
use crate::learning::{
    cov_recovery_csv, learning_curve_csv, train_diverse_geometry, train_overfit_fixed_geometry,
    TrainConfig, TrainOutcome,
};
use crate::metrics::{self, MetricRow, DEFAULT_TRANSLATION_THRESHOLD};
use crate::solver::{estimate_pose_multistage, SolverConfig};
use crate::synthgen::{cov_to_triple, generate_problem, PoseRecord, SceneConfig, SyntheticProblem};
use crate::verify::{self, GradcheckConfig, Mutation, VarApproxConfig};
use crate::{Error, Stage};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BREACH: i32 = 4;

pub const THREADS_ENV: &str = "PNEC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    /// Intrinsics for correspondence CSV input; problem JSON carries its own.
    pub camera: Camera,
    /// Replace input covariances by clipped reprojection errors under the
    /// ground-truth pose (problem JSON input only).
    pub reprojection_oracle: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            camera: SceneConfig::default().camera(),
            reprojection_oracle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Relative translations shorter than this are left out of e_t.
    pub translation_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            translation_threshold: DEFAULT_TRANSLATION_THRESHOLD,
        }
    }
}

/// Full configuration of a run. The master `seed` overrides every component
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub format: Format,
    pub scene: SceneConfig,
    pub solver: SolverConfig,
    pub overfit: TrainConfig,
    pub diverse: TrainConfig,
    pub estimate: EstimateConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub varapprox: VarApproxConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            format: Format::Csv,
            scene: SceneConfig::default(),
            solver: SolverConfig::default(),
            overfit: TrainConfig::overfit_default(),
            diverse: TrainConfig::diverse_default(),
            estimate: EstimateConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            varapprox: VarApproxConfig::default(),
        }
    }
}

/// Overlays `user` onto `base`. Tables carrying a `kind` tag replace the
/// default wholesale; keys unknown to the defaults are rejected.
fn merge(base: &mut toml::Value, user: toml::Value, path: &str) -> crate::Result<()> {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) if !u.contains_key("kind") => {
            for (k, v) in u {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Parse(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> crate::Result<Self> {
        let user: toml::Value =
            toml::from_str(s).map_err(|e| Error::Parse(format!("config: {e}")))?;
        let mut base =
            toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        merge(&mut base, user, "")?;
        let mut cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("config: {e}")))?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the master seed and every component seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = seed;
        self.solver.seed = seed;
        for t in [&mut self.overfit, &mut self.diverse] {
            t.seed = seed;
            t.scene.seed = seed;
            t.solver.seed = seed;
        }
        self.gradcheck.seed = seed;
        self.varapprox.seed = seed;
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pnec",
    version,
    about = "Symmetric PNEC relative pose and covariance learning"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MutationArg {
    FlipDnDx,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn per-point covariances on one fixed geometry.
    SynthOverfit {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        problems: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Learn second-frame covariances under random relative poses.
    SynthDiverse {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        problems: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Start from the generator's covariances.
        #[arg(long)]
        gt_init: bool,
    },
    /// Write one synthetic problem as JSON and as correspondence CSV.
    SynthProblem {
        /// Generate without pixel noise.
        #[arg(long)]
        noise_free: bool,
        #[arg(long)]
        outliers: Option<f64>,
    },
    /// Estimate a relative pose with RANSAC, NEC-LS and PNEC.
    Estimate {
        /// Correspondence CSV, or a problem JSON from `synth-problem`.
        #[arg(long)]
        input: PathBuf,
        /// Use clipped reprojection-error covariances (problem JSON only).
        #[arg(long)]
        reprojection_oracle: bool,
    },
    /// Trajectory metrics from two pose files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "00")]
        seq: String,
    },
    /// Finite-difference and re-solve checks of every derivative.
    Gradcheck {
        /// Corrupt a derivative on purpose (test hook).
        #[arg(long, value_enum)]
        mutation: Option<MutationArg>,
    },
    /// Analytic against Monte-Carlo residual variance over focal lengths.
    Varapprox {
        #[arg(long)]
        samples: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthOverfit { .. } => "synth-overfit",
            Command::SynthDiverse { .. } => "synth-diverse",
            Command::SynthProblem { .. } => "synth-problem",
            Command::Estimate { .. } => "estimate",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Varapprox { .. } => "varapprox",
        }
    }
}

/// Failure of a command, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_)
            | Error::InsufficientData { .. }
            | Error::Parse(_)
            | Error::Io(_) => EXIT_USAGE,
            Error::Stage { source, .. }
                if matches!(
                    **source,
                    Error::InsufficientData { .. } | Error::InvalidInput(_)
                ) =>
            {
                EXIT_USAGE
            }
            _ => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

struct Writer {
    dir: PathBuf,
    manifest: Manifest,
}

impl Writer {
    fn new(dir: &Path, manifest: Manifest) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), Failure> {
        std::fs::write(self.dir.join(name), content).map_err(Error::from)?;
        self.manifest.outputs.push(FileDigest {
            path: name.into(),
            sha256: io::blob_sha256(content.as_bytes()),
        });
        Ok(())
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: io::blob_sha256(bytes),
        });
    }

    fn finish(self) -> Result<(), Failure> {
        std::fs::write(self.dir.join("manifest.json"), self.manifest.to_json())
            .map_err(Error::from)?;
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes") + "\n"
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn utf8(path: &Path, bytes: &[u8]) -> Result<String, Failure> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Failure {
        code: EXIT_USAGE,
        message: format!("{} is not UTF-8", path.display()),
    })
}

#[derive(Serialize)]
struct CovarianceDump<'a> {
    /// Learned covariances, `[xx, xy, yy]` per point, px².
    learned: Vec<[f64; 3]>,
    learned_prime: Vec<[f64; 3]>,
    ground_truth: Vec<[f64; 3]>,
    ground_truth_prime: Vec<[f64; 3]>,
    params: &'a [CovarianceParams],
    params_prime: &'a [CovarianceParams],
    baselines: &'a Option<crate::learning::Baselines>,
    diverged: &'a Option<crate::learning::Divergence>,
}

fn write_training(
    w: &mut Writer,
    out: &TrainOutcome,
    format: Format,
    recovery: bool,
) -> Result<(), Failure> {
    let curve = match format {
        Format::Csv => learning_curve_csv(&out.rows),
        Format::Json => json(&out.rows),
    };
    w.write(&format!("learning_curve.{}", format.ext()), &curve)?;
    let (l1, l2) = out.learned_covariances();
    let triples = |v: &[crate::Cov2]| v.iter().map(cov_to_triple).collect::<Vec<_>>();
    let dump = CovarianceDump {
        learned: triples(&l1),
        learned_prime: triples(&l2),
        ground_truth: triples(&out.ground_truth),
        ground_truth_prime: triples(&out.ground_truth_prime),
        params: &out.params,
        params_prime: &out.params_prime,
        baselines: &out.baselines,
        diverged: &out.diverged,
    };
    w.write("covariances.json", &json(&dump))?;
    if recovery {
        let table = match format {
            Format::Csv => cov_recovery_csv(out),
            Format::Json => json(&out.cov_errors),
        };
        w.write(&format!("cov_recovery.{}", format.ext()), &table)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StageRecord {
    stage: Stage,
    energy: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct PoseOutput {
    pose: PoseRecord,
    inliers: Vec<bool>,
    inlier_count: usize,
    stages: Vec<StageRecord>,
    converged: bool,
    low_parallax: bool,
    /// Rotational error in radians when the input carries ground truth.
    e_rot: Option<f64>,
}

fn cmd_estimate(
    cfg: &RunConfig,
    input: &Path,
    oracle: bool,
    w: &mut Writer,
) -> Result<(), Failure> {
    let bytes = read(input)?;
    w.input(input, &bytes);
    let text = utf8(input, &bytes)?;
    let is_json = input.extension().is_some_and(|e| e == "json");
    let (problem, gt): (PnecProblem, Option<RelativePose>) = if is_json {
        let sp = SyntheticProblem::from_json(&text)?;
        let mut problem = sp.problem_gt();
        if oracle {
            let pixels: Vec<_> = sp
                .points
                .iter()
                .map(|q| (q.p.into(), q.p_prime.into()))
                .collect();
            for (i, (c1, c2)) in verify::reprojection_covariances(&sp.gt, &sp.camera, &pixels)
                .into_iter()
                .enumerate()
            {
                problem.set_covariances(i, c1, c2);
            }
        }
        (problem, Some(sp.gt))
    } else {
        if oracle {
            return Err(Failure {
                code: EXIT_USAGE,
                message: "--reprojection-oracle needs a problem JSON with a ground-truth pose"
                    .into(),
            });
        }
        (
            PnecProblem::new(cfg.estimate.camera, io::parse_correspondences(&text)?),
            None,
        )
    };
    if problem.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: problem.len(),
        }
        .into());
    }
    let report = estimate_pose_multistage(&problem, None, &cfg.solver)?;
    let out = PoseOutput {
        pose: PoseRecord::from_pose(&report.pose),
        inlier_count: report.inlier_count(),
        inliers: report.inliers.clone(),
        stages: report
            .stages
            .iter()
            .map(|s| StageRecord {
                stage: s.stage,
                energy: s.energy,
                iterations: s.iterations,
                converged: s.converged,
            })
            .collect(),
        converged: report.converged,
        low_parallax: report.low_parallax,
        e_rot: gt.map(|g| metrics::e_rot(&report.pose.rotation, &g.rotation)),
    };
    w.write("pose.json", &json(&out))
}

fn cmd_eval(
    cfg: &RunConfig,
    est: &Path,
    gt: &Path,
    seq: &str,
    w: &mut Writer,
) -> Result<(), Failure> {
    let (eb, gb) = (read(est)?, read(gt)?);
    w.input(est, &eb);
    w.input(gt, &gb);
    let te = io::parse_poses(&utf8(est, &eb)?)?;
    let tg = io::parse_poses(&utf8(gt, &gb)?)?;
    let row: MetricRow = metrics::evaluate(seq, &te, &tg, cfg.eval.translation_threshold)?;
    let rows = [row];
    let table = match cfg.format {
        Format::Csv => metrics::metric_table_csv(&rows),
        Format::Json => json(&rows),
    };
    w.write(&format!("metrics.{}", cfg.format.ext()), &table)
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or(Failure {
            code: EXIT_USAGE,
            message: format!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        })?;
        // A pool that already exists (repeated in-process runs) is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn load_config(cli: &Cli, w_inputs: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let bytes = read(path)?;
            let cfg = RunConfig::from_toml_str(&utf8(path, &bytes)?)?;
            w_inputs.push((path.clone(), bytes));
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<i32, Failure> {
    init_threads()?;
    let mut inputs = Vec::new();
    let mut cfg = load_config(&cli, &mut inputs)?;
    match &cli.command {
        Command::SynthOverfit {
            epochs,
            problems,
            lr,
        }
        | Command::SynthDiverse {
            epochs,
            problems,
            lr,
            ..
        } => {
            let t = if matches!(cli.command, Command::SynthOverfit { .. }) {
                &mut cfg.overfit
            } else {
                &mut cfg.diverse
            };
            t.epochs = epochs.unwrap_or(t.epochs);
            t.problems = problems.unwrap_or(t.problems);
            t.adam.lr = lr.unwrap_or(t.adam.lr);
            if let Command::SynthDiverse { gt_init: true, .. } = cli.command {
                t.init = crate::learning::CovInit::GroundTruth;
            }
        }
        Command::SynthProblem {
            noise_free,
            outliers,
        } => {
            if *noise_free {
                cfg.scene.noise = crate::synthgen::NoiseSpec::isotropic(0.0);
                cfg.scene.noise_prime = crate::synthgen::NoiseSpec::isotropic(0.0);
            }
            cfg.scene.outlier_fraction = outliers.unwrap_or(cfg.scene.outlier_fraction);
        }
        Command::Estimate {
            reprojection_oracle,
            ..
        } => {
            cfg.estimate.reprojection_oracle |= *reprojection_oracle;
        }
        Command::Gradcheck { .. } => {}
        Command::Varapprox { samples } => {
            cfg.varapprox.samples = samples.unwrap_or(cfg.varapprox.samples);
        }
        Command::Eval { .. } => {}
    }
    let mut manifest = Manifest::new(
        cli.command.name(),
        cfg.seed,
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    for (p, b) in &inputs {
        manifest.inputs.push(FileDigest {
            path: p.display().to_string(),
            sha256: io::blob_sha256(b),
        });
    }
    let mut w = Writer::new(&cli.out, manifest)?;
    let mut code = EXIT_OK;
    let result = match &cli.command {
        Command::SynthOverfit { .. } | Command::SynthDiverse { .. } => (|| {
            let overfit = matches!(cli.command, Command::SynthOverfit { .. });
            let out = if overfit {
                train_overfit_fixed_geometry(&cfg.overfit)?
            } else {
                train_diverse_geometry(&cfg.diverse)?
            };
            write_training(&mut w, &out, cfg.format, !overfit)?;
            if let Err(e) = out.check() {
                eprintln!("{e}");
                code = EXIT_NUMERICAL;
            }
            Ok(())
        })(),
        Command::SynthProblem { .. } => (|| {
            let sp = generate_problem(&cfg.scene)?;
            w.write("problem.json", &(sp.to_json() + "\n"))?;
            let corrs = sp.problem_gt().correspondences;
            w.write(
                "correspondences.csv",
                &io::format_correspondences(&corrs, true),
            )?;
            Ok(())
        })(),
        Command::Estimate { input, .. } => {
            cmd_estimate(&cfg, input, cfg.estimate.reprojection_oracle, &mut w)
        }
        Command::Eval { est, gt, seq } => cmd_eval(&cfg, est, gt, seq, &mut w),
        Command::Gradcheck { mutation } => (|| {
            let mut g = cfg.gradcheck;
            g.mutation = mutation.map(|MutationArg::FlipDnDx| Mutation::FlipDnDx);
            let report = verify::gradcheck(&g)?;
            let body = match cfg.format {
                Format::Csv => report.to_csv(),
                Format::Json => json(&report),
            };
            w.write(&format!("gradcheck.{}", cfg.format.ext()), &body)?;
            print!("{}", report.to_csv());
            if !report.passed() {
                code = EXIT_BREACH;
            }
            Ok(())
        })(),
        Command::Varapprox { .. } => (|| {
            let rows = verify::varapprox(&cfg.varapprox)?;
            let body = match cfg.format {
                Format::Csv => verify::varapprox_csv(&rows),
                Format::Json => json(&rows),
            };
            w.write(&format!("varapprox.{}", cfg.format.ext()), &body)?;
            Ok(())
        })(),
    };
    match result {
        Ok(()) => {
            w.finish()?;
            Ok(code)
        }
        Err(f) => {
            // Partial artifacts stay on disk; the manifest records what exists.
            let _ = w.finish();
            Err(f)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(7);
        cfg.overfit.epochs = 3;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_keeps_section_defaults() {
        let cfg =
            RunConfig::from_toml_str("seed = 5\n[diverse]\nepochs = 2\n[diverse.adam]\nlr = 0.1\n")
                .unwrap();
        let mut expect = RunConfig::default();
        expect.apply_seed(5);
        expect.diverse.epochs = 2;
        expect.diverse.adam.lr = 0.1;
        assert_eq!(cfg, expect);
        assert_eq!(cfg.diverse.scene.seed, 5);
    }

    #[test]
    fn tagged_tables_replace_defaults() {
        let cfg = RunConfig::from_toml_str(
            "[scene.pose]\nkind = \"fixed\"\nrotation = [0.0, 0.1, 0.0]\ntranslation = [0.0, 0.0, 1.0]\n",
        );
        assert!(cfg.is_ok(), "{cfg:?}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_parse_errors() {
        assert!(matches!(
            RunConfig::from_toml_str("sede = 1\n"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[solver]\nlm_max_iter = 1\n"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("seed = \"x\"\n"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn manifest_config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(11);
        let m = Manifest::new("x", 11, serde_json::to_value(&cfg).unwrap());
        let back: RunConfig =
            serde_json::from_value(Manifest::from_json(&m.to_json()).unwrap().config).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["pnec", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["pnec", "estimate"]), EXIT_USAGE);
    }
}
