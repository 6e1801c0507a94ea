//! Text formats: correspondence CSV, KITTI-style pose files, run manifests.
//!
//! Correspondence CSV: a header `x1,y1,x2,y2` optionally followed by
//! `s1,a1,b1,s2,a2,b2`, one correspondence per row. The optional columns give
//! each frame's pixel covariance `s R_a diag(b, 1−b) R_aᵀ` with `s > 0` the
//! trace, `a` the major-axis angle in radians and `b ∈ (0, 1)` the share of
//! the trace along it. Rows without them get the isotropic 1 px² covariance.
//!
//! Pose file: one pose per line, twelve whitespace-separated numbers, the
//! row-major 3×4 matrix `[R | p]` of a camera-to-world transform.

use crate::energy::Correspondence;
use crate::geometry::{Cov2, Rotation};
use crate::gradients::cov2_from_shape;
use crate::metrics::Trajectory;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CORRESPONDENCE_COLUMNS: [&str; 4] = ["x1", "y1", "x2", "y2"];
pub const COVARIANCE_COLUMNS: [&str; 6] = ["s1", "a1", "b1", "s2", "a2", "b2"];

/// Orthonormality tolerance for rotations read from pose files.
pub const POSE_ORTHONORMALITY_TOLERANCE: f64 = 1e-6;

fn parse_f64(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::Parse(format!(
            "line {line}: column {column}: cannot parse {field:?}"
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Parse(format!(
            "line {line}: column {column}: non-finite value"
        )));
    }
    Ok(v)
}

fn shape_cov(s: f64, a: f64, b: f64, line: usize) -> Result<Cov2> {
    if !(s > 0.0) || !(b > 0.0 && b < 1.0) {
        return Err(Error::Parse(format!(
            "line {line}: covariance needs s > 0 and 0 < b < 1, got s={s} b={b}"
        )));
    }
    Ok(cov2_from_shape(s, a, b))
}

pub fn parse_correspondences(text: &str) -> Result<Vec<Correspondence>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("correspondence header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let with_cov = match header.len() {
        4 => false,
        10 => true,
        n => {
            return Err(Error::Parse(format!(
                "correspondence header has {n} columns, expected 4 or 10"
            )))
        }
    };
    let expected: Vec<&str> = CORRESPONDENCE_COLUMNS
        .iter()
        .chain(COVARIANCE_COLUMNS.iter().take(if with_cov { 6 } else { 0 }))
        .copied()
        .collect();
    if header != expected {
        return Err(Error::Parse(format!(
            "correspondence header {header:?}, expected {expected:?}"
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let v: Vec<f64> = rec
            .iter()
            .zip(&expected)
            .map(|(f, c)| parse_f64(f, line, c))
            .collect::<Result<_>>()?;
        let (p, pp) = (Vector2::new(v[0], v[1]), Vector2::new(v[2], v[3]));
        let (cov, cov_prime) = if with_cov {
            (
                shape_cov(v[4], v[5], v[6], line)?,
                shape_cov(v[7], v[8], v[9], line)?,
            )
        } else {
            (Cov2::identity(), Cov2::identity())
        };
        out.push(Correspondence {
            p,
            p_prime: pp,
            cov,
            cov_prime,
        });
    }
    Ok(out)
}

/// Trace, major-axis angle and major-axis share of a 2D covariance.
pub fn cov_shape(c: &Cov2) -> (f64, f64, f64) {
    let eig = c.symmetric_eigen();
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let s = eig.eigenvalues[i] + eig.eigenvalues[j];
    let u = eig.eigenvectors.column(i);
    (s, u[1].atan2(u[0]), eig.eigenvalues[i] / s)
}

/// Writes correspondences, including the covariance columns when asked.
pub fn format_correspondences(corrs: &[Correspondence], with_cov: bool) -> String {
    let mut out = CORRESPONDENCE_COLUMNS.join(",");
    if with_cov {
        out.push(',');
        out.push_str(&COVARIANCE_COLUMNS.join(","));
    }
    out.push('\n');
    for c in corrs {
        out.push_str(&format!(
            "{},{},{},{}",
            c.p.x, c.p.y, c.p_prime.x, c.p_prime.y
        ));
        if with_cov {
            for cov in [&c.cov, &c.cov_prime] {
                let (s, a, b) = cov_shape(cov);
                out.push_str(&format!(",{s},{a},{b}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_poses(text: &str) -> Result<Trajectory> {
    let mut rotations = Vec::new();
    let mut positions = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = raw
            .split_whitespace()
            .enumerate()
            .map(|(c, f)| parse_f64(f, line, &c.to_string()))
            .collect::<Result<_>>()?;
        if v.len() != 12 {
            return Err(Error::Parse(format!(
                "line {line}: expected 12 numbers, got {}",
                v.len()
            )));
        }
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let r = Rotation::from_matrix_unchecked(m);
        if r.orthogonality_error() > POSE_ORTHONORMALITY_TOLERANCE || m.determinant() <= 0.0 {
            return Err(Error::Parse(format!(
                "line {line}: rotation block is not a rotation"
            )));
        }
        rotations.push(r);
        positions.push(Vector3::new(v[3], v[7], v[11]));
    }
    Trajectory::new(rotations, positions)
}

pub fn format_poses(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (r, p) in traj.rotations.iter().zip(&traj.positions) {
        let m = r.matrix();
        let row = |i: usize| format!("{} {} {} {}", m[(i, 0)], m[(i, 1)], m[(i, 2)], p[i]);
        out.push_str(&format!("{} {} {}\n", row(0), row(1), row(2)));
    }
    out
}

/// SHA-256 of the git blob object for `bytes` (`"blob <len>\0"` prefix).
pub fn blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: blob_sha256(&std::fs::read(path)?),
        })
    }
}

pub const MANIFEST_FORMAT: &str = "pnec-run";
pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to reproduce a run. Output paths are relative to the
/// output directory; input paths are as given on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub rng: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            seed,
            rng: crate::rng::RNG_ALGORITHM.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(s).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!(
                "unsupported manifest {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}
