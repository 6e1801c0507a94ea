//! Rotation, trajectory and variance error metrics.
//!
//! RPE₁ is the mean rotational error of consecutive-frame relative motions.
//! RPEₙ is the rotational drift between the first and last frame, the angle
//! between the composed estimated and composed true rotations. Both are
//! reported in degrees.

use crate::geometry::{so3_log, Rotation};
use crate::{Error, Result};
use nalgebra::Vector3;

/// Below this ground-truth translation norm the direction is undefined.
pub const DEFAULT_TRANSLATION_THRESHOLD: f64 = 1e-3;

/// Geodesic angle ∠(R_gtᵀ R_est) in radians.
pub fn e_rot(r_est: &Rotation, r_gt: &Rotation) -> f64 {
    r_gt.transpose().compose(r_est).angle()
}

/// Sign-invariant angle between translation directions, in degrees.
pub fn e_t(t_est: &Vector3<f64>, t_gt: &Vector3<f64>, threshold: f64) -> Result<f64> {
    let n = t_gt.norm();
    if !(n > threshold) {
        return Err(Error::DerivativeUndefined(format!(
            "ground-truth translation norm {n:.3e} below {threshold:.1e}; direction undefined"
        )));
    }
    let ne = t_est.norm();
    if !(ne > 0.0) {
        return Err(Error::InvalidInput("estimated translation is zero".into()));
    }
    let c = (t_est.dot(t_gt) / (ne * n)).abs().min(1.0);
    Ok(c.acos().to_degrees())
}

/// Absolute camera poses, camera-to-world, `X_w = R_k X_k + p_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rotations: Vec<Rotation>,
    pub positions: Vec<Vector3<f64>>,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(rotations: Vec<Rotation>, positions: Vec<Vector3<f64>>) -> Result<Self> {
        if rotations.len() != positions.len() {
            return Err(Error::InvalidInput(
                "rotation and position counts differ".into(),
            ));
        }
        Ok(Self {
            rotations,
            positions,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// Relative rotation from frame `i` to `i + 1`, `R_iᵀ R_{i+1}`.
    pub fn relative_rotation(&self, i: usize) -> Rotation {
        self.rotations[i]
            .transpose()
            .compose(&self.rotations[i + 1])
    }

    /// Translation of frame `i + 1` expressed in frame `i`.
    pub fn relative_translation(&self, i: usize) -> Vector3<f64> {
        self.rotations[i]
            .transpose()
            .rotate(&(self.positions[i + 1] - self.positions[i]))
    }

    /// Chains relative motions `(R_{k,k+1}, t_{k,k+1})` from an identity first pose.
    pub fn from_relative(rel: &[(Rotation, Vector3<f64>)]) -> Self {
        let mut rotations = vec![Rotation::identity()];
        let mut positions = vec![Vector3::zeros()];
        for (r, t) in rel {
            let (rk, pk) = (*rotations.last().unwrap(), *positions.last().unwrap());
            positions.push(pk + rk.rotate(t));
            rotations.push(rk.compose(r));
        }
        Self {
            rotations,
            positions,
            timestamps: None,
        }
    }
}

fn check_pair(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: est.len(),
        });
    }
    Ok(())
}

pub fn rpe1(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_pair(est, gt)?;
    let n = est.len() - 1;
    let sum: f64 = (0..n)
        .map(|i| e_rot(&est.relative_rotation(i), &gt.relative_rotation(i)))
        .sum();
    Ok((sum / n as f64).to_degrees())
}

pub fn rpen(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_pair(est, gt)?;
    let last = est.len() - 1;
    let de = est.rotations[0].transpose().compose(&est.rotations[last]);
    let dg = gt.rotations[0].transpose().compose(&gt.rotations[last]);
    Ok(e_rot(&de, &dg).to_degrees())
}

/// Mean consecutive-frame e_t in degrees over frames whose true motion exceeds
/// `threshold`; `None` when every frame is excluded.
pub fn mean_e_t(est: &Trajectory, gt: &Trajectory, threshold: f64) -> Result<Option<f64>> {
    check_pair(est, gt)?;
    let vals: Vec<f64> = (0..est.len() - 1)
        .filter_map(|i| {
            e_t(
                &est.relative_translation(i),
                &gt.relative_translation(i),
                threshold,
            )
            .ok()
        })
        .collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Mean absolute difference of unit-mean-normalized variances.
pub fn sigma_norm_error(learned: &[f64], truth: &[f64]) -> Result<f64> {
    if learned.len() != truth.len() {
        return Err(Error::InvalidInput("variance set sizes differ".into()));
    }
    if learned.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = learned.len() as f64;
    let (sl, st): (f64, f64) = (learned.iter().sum(), truth.iter().sum());
    if !(sl > 0.0 && st > 0.0) {
        return Err(Error::InvalidInput(
            "variance set sums must be positive".into(),
        ));
    }
    let err: f64 = learned
        .iter()
        .zip(truth)
        .map(|(l, t)| (n * l / sl - n * t / st).abs())
        .sum();
    Ok(err / n)
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricRow {
    pub seq: String,
    pub rpe1_deg: f64,
    pub rpen_deg: f64,
    pub et_deg: Option<f64>,
}

pub fn evaluate(seq: &str, est: &Trajectory, gt: &Trajectory, threshold: f64) -> Result<MetricRow> {
    Ok(MetricRow {
        seq: seq.into(),
        rpe1_deg: rpe1(est, gt)?,
        rpen_deg: rpen(est, gt)?,
        et_deg: mean_e_t(est, gt, threshold)?,
    })
}

pub fn metric_table_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("seq,rpe1_deg,rpen_deg,et_deg\n");
    for r in rows {
        let et = r
            .et_deg
            .map_or_else(|| "nan".to_string(), |v| format!("{v:.12}"));
        out.push_str(&format!(
            "{},{:.12},{:.12},{}\n",
            r.seq, r.rpe1_deg, r.rpen_deg, et
        ));
    }
    out
}

/// Norm of the rotation vector, the same quantity as [`e_rot`] through the log map.
pub fn e_rot_log(r_est: &Rotation, r_gt: &Rotation) -> f64 {
    so3_log(&r_gt.transpose().compose(r_est)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn rand_rot(rng: &mut impl Rng, max: f64) -> Rotation {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        so3_exp(&(v.normalize() * rng.random_range(0.0..max)))
    }

    #[test]
    fn e_rot_examples() {
        let r = so3_exp(&Vector3::new(0.3, 0.1, -0.2));
        assert_eq!(e_rot(&r, &r), 0.0);
        let flip = so3_exp(&Vector3::new(0.0, PI, 0.0));
        assert!((e_rot(&flip, &Rotation::identity()) - PI).abs() < 1e-12);
        let mut rng = stream(1, 0);
        for _ in 0..500 {
            let (a, b) = (rand_rot(&mut rng, 3.1), rand_rot(&mut rng, 3.1));
            assert!((e_rot(&a, &b) - e_rot_log(&a, &b)).abs() < 1e-12);
            assert!((e_rot(&a, &b) - e_rot(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn e_rot_triangle_inequality() {
        let mut rng = stream(2, 0);
        for _ in 0..1000 {
            let (a, b, c) = (
                rand_rot(&mut rng, 3.1),
                rand_rot(&mut rng, 3.1),
                rand_rot(&mut rng, 3.1),
            );
            assert!(e_rot(&a, &c) <= e_rot(&a, &b) + e_rot(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn e_t_examples() {
        let z = Vector3::z();
        assert!(e_t(&z, &(z * 3.0), 1e-3).unwrap().abs() < 1e-12);
        assert!(e_t(&-z, &z, 1e-3).unwrap().abs() < 1e-12);
        assert!((e_t(&Vector3::x(), &z, 1e-3).unwrap() - 90.0).abs() < 1e-12);
        assert!(e_t(&z, &(z * 1e-4), 1e-3).is_err());
    }

    fn offset_traj(gt: &Trajectory, offsets: &[f64], axis: Vector3<f64>) -> Trajectory {
        let rel: Vec<(Rotation, Vector3<f64>)> = (0..gt.len() - 1)
            .map(|i| {
                (
                    gt.relative_rotation(i)
                        .compose(&so3_exp(&(axis * offsets[i]))),
                    gt.relative_translation(i),
                )
            })
            .collect();
        Trajectory::from_relative(&rel)
    }

    fn rand_traj(rng: &mut impl Rng, n: usize) -> Trajectory {
        let rel: Vec<(Rotation, Vector3<f64>)> = (0..n - 1)
            .map(|_| {
                (
                    rand_rot(rng, 0.2),
                    Vector3::new(rng.random_range(-0.2..0.2), 0.0, 1.0),
                )
            })
            .collect();
        Trajectory::from_relative(&rel)
    }

    #[test]
    fn rpe_examples() {
        let mut rng = stream(3, 0);
        let gt = rand_traj(&mut rng, 12);
        assert_eq!(rpe1(&gt, &gt).unwrap(), 0.0);
        assert_eq!(rpen(&gt, &gt).unwrap(), 0.0);
        let d = 0.1f64.to_radians();
        let axis = Vector3::new(0.0, 1.0, 0.0);
        let est = offset_traj(&gt, &[d; 11], axis);
        assert!((rpe1(&est, &gt).unwrap() - 0.1).abs() < 1e-9);

        let straight = Trajectory::from_relative(&vec![(Rotation::identity(), Vector3::z()); 10]);
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { d } else { -d }).collect();
        let est = offset_traj(&straight, &alt, axis);
        assert!((rpe1(&est, &straight).unwrap() - 0.1).abs() < 1e-9);
        assert!(rpen(&est, &straight).unwrap() < 1e-9);
        assert!(rpe1(&est, &rand_traj(&mut rng, 5)).is_err());
    }

    #[test]
    fn rpe_matches_naive_loops() {
        let mut rng = stream(4, 0);
        for _ in 0..20 {
            let gt = rand_traj(&mut rng, 8);
            let est = rand_traj(&mut rng, 8);
            let mut sum = 0.0;
            let mut ce = Rotation::identity();
            let mut cg = Rotation::identity();
            for i in 0..7 {
                let re = est.rotations[i].transpose() * est.rotations[i + 1];
                let rg = gt.rotations[i].transpose() * gt.rotations[i + 1];
                sum += so3_log(&(rg.transpose() * re)).norm();
                ce = ce * re;
                cg = cg * rg;
            }
            assert!((rpe1(&est, &gt).unwrap() - (sum / 7.0).to_degrees()).abs() < 1e-12);
            assert!(
                (rpen(&est, &gt).unwrap() - so3_log(&(cg.transpose() * ce)).norm().to_degrees())
                    .abs()
                    < 1e-10
            );
            let de = est.rotations[0].transpose() * est.rotations[7];
            let dg = gt.rotations[0].transpose() * gt.rotations[7];
            assert_eq!(rpen(&est, &gt).unwrap(), e_rot(&de, &dg).to_degrees());
        }
    }

    #[test]
    fn sigma_norm_error_examples() {
        let x = [1.0, 2.0, 3.5, 0.25];
        assert_eq!(sigma_norm_error(&x, &x).unwrap(), 0.0);
        for c in [0.5, 4.0, 1024.0] {
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            assert_eq!(sigma_norm_error(&x, &y).unwrap(), 0.0);
        }
        let y = [2.0, 1.0, 1.0, 1.0];
        let direct = ((1.0f64 / 6.75 * 4.0 - 2.0 / 5.0 * 4.0).abs()
            + (2.0f64 / 6.75 * 4.0 - 4.0 / 5.0).abs()
            + (3.5f64 / 6.75 * 4.0 - 4.0 / 5.0).abs()
            + (0.25f64 / 6.75 * 4.0 - 4.0 / 5.0).abs())
            / 4.0;
        assert!((sigma_norm_error(&x, &y).unwrap() - direct).abs() < 1e-14);
        assert!(sigma_norm_error(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(sigma_norm_error(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn sigma_norm_error_is_scale_invariant(
            x in proptest::collection::vec(1e-6f64..10.0, 1..50),
            c in 1e-3f64..1e3,
        ) {
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            prop_assert!(sigma_norm_error(&x, &y).unwrap() <= 1e-14);
            prop_assert!(sigma_norm_error(&x, &y).unwrap() >= 0.0);
        }
    }

    #[test]
    fn table_format() {
        let rows = vec![MetricRow {
            seq: "00".into(),
            rpe1_deg: 0.1,
            rpen_deg: 0.0,
            et_deg: None,
        }];
        let csv = metric_table_csv(&rows);
        assert!(csv.starts_with("seq,rpe1_deg,rpen_deg,et_deg\n00,0.100000000000,"));
    }
}
