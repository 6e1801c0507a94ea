//! Linear eight-point estimate on bearing vectors.

use crate::energy::{nec_residual, BearingPair, RelativePose};
use crate::geometry::Rotation;
use crate::{Error, Result};
use nalgebra::{DMatrix, Matrix3, Unit, Vector3};

/// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;
/// Conditioning ratio below which the estimate is flagged as low parallax.
const LOW_PARALLAX_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EightPointEstimate {
    /// Essential matrix with `f_iᵀ E f′_i ≈ 0`, singular values (1, 1, 0).
    pub essential: Matrix3<f64>,
    /// The four (R, t) decompositions of `E`.
    pub candidates: [RelativePose; 4],
    /// Ratio of the second-smallest to the largest singular value of the
    /// constraint matrix.
    pub conditioning: f64,
    pub low_parallax: bool,
}

pub fn eight_point(pairs: &[BearingPair]) -> Result<EightPointEstimate> {
    if pairs.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: pairs.len(),
        });
    }
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, bp) in pairs.iter().enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = bp.f[r] * bp.f_prime[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if !(s[0] > 0.0) || !s.iter().all(|x| x.is_finite()) {
        return Err(Error::Degenerate("constraint matrix is zero".into()));
    }
    let rank = s.iter().filter(|&&x| x > RANK_TOLERANCE * s[0]).count();
    if rank < 6 {
        return Err(Error::Degenerate(format!(
            "constraint matrix has rank {rank}"
        )));
    }
    let conditioning = s[7] / s[0];
    let null = v_t.row(order[8]);
    let e_raw = Matrix3::from_fn(|r, c| null[3 * r + c]);

    let esvd = e_raw.svd(true, true);
    let (mut u, mut vt) = (esvd.u.unwrap(), esvd.v_t.unwrap());
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| esvd.singular_values[j].total_cmp(&esvd.singular_values[i]));
    u = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    vt = Matrix3::from_rows(&[vt.row(idx[0]), vt.row(idx[1]), vt.row(idx[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let essential = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = Rotation::from_matrix_unchecked(u * w * vt);
    let r2 = Rotation::from_matrix_unchecked(u * w.transpose() * vt);
    let t: Vector3<f64> = u.column(2).into_owned();
    let pose = |r: Rotation, t: Vector3<f64>| RelativePose {
        rotation: r,
        translation: Unit::new_normalize(t),
    };
    Ok(EightPointEstimate {
        essential,
        candidates: [pose(r1, t), pose(r1, -t), pose(r2, t), pose(r2, -t)],
        conditioning,
        low_parallax: conditioning < LOW_PARALLAX_RATIO,
    })
}

/// Depths (λ, μ) of the midpoint triangulation `λ f ≈ μ R f′ + t`.
///
/// `None` for (near-)parallel rays.
pub fn triangulate_depths(pose: &RelativePose, bp: &BearingPair) -> Option<(f64, f64)> {
    let v = pose.rotation.rotate(&bp.f_prime);
    let c = bp.f.dot(&v);
    let det = 1.0 - c * c;
    if det < 1e-12 {
        return None;
    }
    let (bf, bv) = (bp.f.dot(pose.t()), -v.dot(pose.t()));
    let lambda = (bf + c * bv) / det;
    let mu = (c * bf + bv) / det;
    Some((lambda, mu))
}

/// Picks the decomposition with the most points in front of both cameras.
///
/// Ties keep the earliest candidate.
pub fn select_by_cheirality(
    candidates: &[RelativePose; 4],
    pairs: &[BearingPair],
    mask: Option<&[bool]>,
) -> RelativePose {
    let votes = |pose: &RelativePose| {
        pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
            .filter(|(_, bp)| matches!(triangulate_depths(pose, bp), Some((l, m)) if l > 0.0 && m > 0.0))
            .count()
    };
    let mut best = 0;
    let mut best_votes = votes(&candidates[0]);
    for (k, c) in candidates.iter().enumerate().skip(1) {
        let v = votes(c);
        if v > best_votes {
            best = k;
            best_votes = v;
        }
    }
    candidates[best]
}

/// Sum of squared NEC residuals, the same for every decomposition.
pub fn algebraic_error(pose: &RelativePose, bp: &BearingPair) -> f64 {
    let e = nec_residual(pose, bp);
    e * e
}
