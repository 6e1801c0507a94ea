//! Eight-point RANSAC on the algebraic epipolar error.

use super::eight_point::{algebraic_error, eight_point, select_by_cheirality};
use super::{solve_nec_ls, SolverConfig};
use crate::energy::{BearingPair, RelativePose};
use crate::rng::{domain, split, stream};
use crate::{Error, Result};
use rayon::prelude::*;

/// Refinement rounds after the best minimal hypothesis.
const LOCAL_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: RelativePose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
    pub low_parallax: bool,
}

fn score(pose: &RelativePose, pairs: &[BearingPair], threshold: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for bp in pairs {
        let e2 = algebraic_error(pose, bp);
        if e2 <= threshold {
            count += 1;
            sum += e2;
        }
    }
    (count, sum)
}

/// Runs a fixed number of hypotheses. Hypotheses are drawn from a seeded
/// stream and scored in parallel; the winner (most inliers, then lowest inlier
/// error, then lowest index) does not depend on the thread count.
pub fn ransac(pairs: &[BearingPair], cfg: &SolverConfig) -> Result<RansacOutcome> {
    let n = pairs.len();
    if n < 8 {
        return Err(Error::InsufficientData { needed: 8, got: n });
    }
    let mut rng = stream(split(cfg.seed, domain::RANSAC, 0), 0);
    let samples: Vec<Vec<usize>> = (0..cfg.ransac_iterations)
        .map(|_| rand::seq::index::sample(&mut rng, n, 8).into_vec())
        .collect();
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(k, idx)| {
            let sub: Vec<BearingPair> = idx.iter().map(|&i| pairs[i]).collect();
            let est = eight_point(&sub).ok()?;
            let (count, sum) = score(&est.candidates[0], pairs, cfg.ransac_threshold);
            Some((count, sum, k, est))
        })
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (count, _, _, est) =
        best.ok_or_else(|| Error::Degenerate("every minimal sample is degenerate".into()))?;

    let mask_for = |pose: &RelativePose| -> Vec<bool> {
        pairs
            .iter()
            .map(|bp| algebraic_error(pose, bp) <= cfg.ransac_threshold)
            .collect()
    };
    // All four decompositions share ±E, so the mask is candidate-independent.
    let mut inliers = mask_for(&est.candidates[0]);
    let mut pose = select_by_cheirality(&est.candidates, pairs, Some(&inliers));
    let mut inlier_count = count;
    // Local optimization: refine on the inliers, re-threshold, until the set
    // stops changing or stops growing.
    for _ in 0..LOCAL_ROUNDS {
        let inlier_pairs: Vec<BearingPair> = pairs
            .iter()
            .zip(&inliers)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect();
        let Ok(refined) = solve_nec_ls(&inlier_pairs, &pose, cfg) else {
            break;
        };
        let mask = mask_for(&refined.pose);
        let c = mask.iter().filter(|&&m| m).count();
        if c < inlier_count || c < 8 {
            break;
        }
        let done = mask == inliers;
        pose = refined.pose;
        inliers = mask;
        inlier_count = c;
        if done {
            break;
        }
    }
    Ok(RansacOutcome {
        pose,
        inliers,
        inlier_count,
        iterations: cfg.ransac_iterations,
        low_parallax: est.low_parallax,
    })
}
