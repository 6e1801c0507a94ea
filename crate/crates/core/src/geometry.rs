//! Rotation-group arithmetic, pinhole unprojection and first-order
//! propagation of image-plane covariances onto unit bearing vectors.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// 2×2 image-plane covariance in px².
pub type Cov2 = Matrix2<f64>;
/// 3×3 bearing-vector covariance (dimensionless).
pub type Cov3 = Matrix3<f64>;
/// Unit-norm 3-vector (bearing or translation direction).
pub type UnitVector3 = Unit<Vector3<f64>>;

const SMALL_ANGLE: f64 = 1e-8;

/// Element of SO(3), stored as a 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthogonality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary 3×3 matrix onto the closest rotation (Frobenius).
    pub fn from_matrix_orthonormalized(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn exp(x: &Vector3<f64>) -> Self {
        so3_exp(x)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle of this rotation, in [0, π].
    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near 0 and π; use atan2 with the skew part.
        let s = 0.5
            * Vector3::new(
                self.0[(2, 1)] - self.0[(1, 2)],
                self.0[(0, 2)] - self.0[(2, 0)],
                self.0[(1, 0)] - self.0[(0, 1)],
            )
            .norm();
        s.atan2(c)
    }

    /// Frobenius distance of RᵀR from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, crate::Error> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(crate::Error::InvalidInput(format!(
                "camera focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera with equal focal lengths and the principal point at the image centre.
    pub fn centered(f: f64, width: f64, height: f64) -> Self {
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width,
            cy: 0.5 * height,
        }
    }
}

pub fn skew(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Rodrigues exponential of a rotation vector.
pub fn so3_exp(x: &Vector3<f64>) -> Rotation {
    let theta2 = x.norm_squared();
    let k = skew(x);
    let k2 = k * k;
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// Principal logarithm; the result has norm in [0, π].
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let theta = r.angle();
    let vee = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        // sin θ / θ ≈ 1 - θ²/6
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta > 1e-3 {
        return vee * (0.5 * theta / theta.sin());
    }
    // Near π: (R + Rᵀ)/2 = cos θ I + (1 - cos θ) a aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let c = theta.cos();
    let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
    let mut k = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vector3<f64> = aat.column(k).into_owned();
    axis /= axis.norm();
    // Sign from the skew part; at exactly π it vanishes and the largest
    // diagonal entry fixes the axis.
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3): d exp(x + δ) ≈ exp(J_l(x) δ) exp(x).
pub fn so3_left_jacobian(x: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = x.norm_squared();
    let k = skew(x);
    let k2 = k * k;
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k2 * b
}

/// R Σ Rᵀ.
pub fn rotate_cov(r: &Rotation, cov: &Cov3) -> Cov3 {
    r.matrix() * cov * r.matrix().transpose()
}

/// Pinhole forward projection of a point in camera coordinates (z > 0).
pub fn project(v: &Vector3<f64>, cam: &Camera) -> Vector2<f64> {
    Vector2::new(cam.fx * v.x / v.z + cam.cx, cam.fy * v.y / v.z + cam.cy)
}

pub fn unproject(p: &Vector2<f64>, cam: &Camera) -> UnitVector3 {
    Unit::new_normalize(Vector3::new(
        (p.x - cam.cx) / cam.fx,
        (p.y - cam.cy) / cam.fy,
        1.0,
    ))
}

/// Jacobian of `unproject` with respect to the pixel position.
pub fn unproject_jacobian(p: &Vector2<f64>, cam: &Camera) -> Matrix3x2<f64> {
    let v = Vector3::new((p.x - cam.cx) / cam.fx, (p.y - cam.cy) / cam.fy, 1.0);
    let norm = v.norm();
    let u = v / norm;
    let dn = (Matrix3::identity() - u * u.transpose()) / norm;
    let dv = Matrix3x2::new(1.0 / cam.fx, 0.0, 0.0, 1.0 / cam.fy, 0.0, 0.0);
    dn * dv
}

/// First-order propagation J Σ₂ Jᵀ of a pixel covariance onto the bearing.
///
/// The result is tangent to the unit sphere: the bearing direction is in its
/// null space.
pub fn propagate_cov(p: &Vector2<f64>, cov: &Cov2, cam: &Camera) -> Cov3 {
    let j = unproject_jacobian(p, cam);
    let c = j * cov * j.transpose();
    (c + c.transpose()) * 0.5
}

/// Pulls a gradient with respect to a propagated bearing covariance back to the
/// pixel covariance: dL/dΣ₂ = Jᵀ (dL/dΣ₃) J.
pub fn pullback_cov_gradient(p: &Vector2<f64>, grad: &Cov3, cam: &Camera) -> Cov2 {
    let j = unproject_jacobian(p, cam);
    let g = j.transpose() * grad * j;
    (g + g.transpose()) * 0.5
}

/// Orthonormal basis of the plane orthogonal to `t`.
pub fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = t.normalize();
    let helper = if n.x.abs() < 0.6 {
        Vector3::x()
    } else if n.y.abs() < 0.6 {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = (helper - n * n.dot(&helper)).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    #[test]
    fn skew_matches_cross_product() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let u = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(skew(&u) * Vector3::y(), Vector3::z());
        let mut rng = stream(1, 0);
        for _ in 0..100 {
            let u = random_vec(&mut rng, 3.0);
            let v = random_vec(&mut rng, 3.0);
            let c = Vector3::new(
                u.y * v.z - u.z * v.y,
                u.z * v.x - u.x * v.z,
                u.x * v.y - u.y * v.x,
            );
            assert!((skew(&u) * v - c).norm() < 1e-12);
            assert_eq!(skew(&u).transpose(), -skew(&u));
        }
    }

    #[test]
    fn exp_canonical_values() {
        assert_eq!(*so3_exp(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert!((r.rotate(&Vector3::x()) - Vector3::y()).norm() < 1e-15);
        let tiny = so3_exp(&Vector3::new(1e-10, -2e-10, 3e-10));
        assert!(tiny.orthogonality_error() < 1e-15);
    }

    #[test]
    fn log_canonical_values() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
        let rx = Rotation::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        ));
        let l = so3_log(&rx);
        assert!((l - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12, "{l}");
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = stream(2, 0);
        for i in 0..2000 {
            let axis = random_vec(&mut rng, 1.0).normalize();
            let angle = match i % 4 {
                0 => rng.random_range(1e-7..1e-3),
                1 => rng.random_range(PI - 1e-3..PI - 1e-6),
                _ => rng.random_range(0.0..PI - 1e-6),
            };
            let x = axis * angle;
            let r = so3_exp(&x);
            assert!(r.orthogonality_error() < 1e-12);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
            let back = so3_log(&r);
            assert!(
                (back - x).norm() < 1e-9,
                "angle {angle}: {}",
                (back - x).norm()
            );
            let again = so3_exp(&back);
            assert!((again.matrix() - r.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = stream(3, 0);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 1.0);
            let jl = so3_left_jacobian(&x);
            let r0 = so3_exp(&x);
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = 1e-6;
                let rp = so3_exp(&(x + d));
                let rm = so3_exp(&(x - d));
                // exp(x+δ) exp(x)ᵀ ≈ exp(J_l δ)
                let dp = so3_log(&rp.compose(&r0.transpose()));
                let dm = so3_log(&rm.compose(&r0.transpose()));
                let col = (dp - dm) / 2e-6;
                assert!((col - jl.column(k)).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn unproject_examples() {
        let cam = Camera::new(720.0, 700.0, 600.0, 180.0).unwrap();
        let f = unproject(&Vector2::new(600.0, 180.0), &cam);
        assert!((f.into_inner() - Vector3::z()).norm() < 1e-15);
        let cam0 = Camera::new(720.0, 720.0, 0.0, 0.0).unwrap();
        let f = unproject(&Vector2::new(720.0, 0.0), &cam0);
        let h = 0.5f64.sqrt();
        assert!((f.into_inner() - Vector3::new(h, 0.0, h)).norm() < 1e-15);
        let mut rng = stream(4, 0);
        for _ in 0..100 {
            let p = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
            let f = unproject(&p, &cam);
            assert!((f.norm() - 1.0).abs() < 1e-12);
            assert!((project(&f, &cam) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn camera_rejects_nonpositive_focal() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Camera::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn propagate_cov_principal_point() {
        let f = 720.0;
        let cam = Camera::new(f, f, 320.0, 240.0).unwrap();
        let p = Vector2::new(320.0, 240.0);
        assert_eq!(propagate_cov(&p, &Cov2::zeros(), &cam), Cov3::zeros());
        let c = propagate_cov(&p, &Cov2::identity(), &cam);
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0 / (f * f), 1.0 / (f * f), 0.0));
        assert!((c - expected).norm() < 1e-12);
    }

    #[test]
    fn propagate_cov_is_tangent_psd() {
        let cam = Camera::centered(720.0, 1240.0, 370.0);
        let mut rng = stream(5, 0);
        for _ in 0..200 {
            let p = Vector2::new(rng.random_range(0.0..1240.0), rng.random_range(0.0..370.0));
            let a = Matrix2::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let s = a * a.transpose();
            let c = propagate_cov(&p, &s, &cam);
            assert!((c - c.transpose()).norm() < 1e-18);
            let eig = c.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
            let f = unproject(&p, &cam);
            assert!((c * f.into_inner()).norm() <= 1e-9 * c.norm().max(1e-30));
        }
    }

    #[test]
    fn propagate_cov_matches_monte_carlo() {
        let cam = Camera::centered(720.0, 1240.0, 370.0);
        let mut rng = stream(6, 0);
        for case in 0..3 {
            let p = Vector2::new(
                rng.random_range(100.0..1140.0),
                rng.random_range(30.0..340.0),
            );
            let a = Matrix2::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let mut s = a * a.transpose() + Matrix2::identity() * 0.2;
            s *= 3.5 / s.norm();
            let chol = s.cholesky().unwrap().l();
            let mean_f = unproject(&p, &cam).into_inner();
            let n = 1_000_000;
            let mut sum = Vector3::zeros();
            let mut sum2 = Matrix3::zeros();
            let mut nrng = stream(600 + case, 0);
            for _ in 0..n {
                let z = Vector2::new(
                    StandardNormal.sample(&mut nrng),
                    StandardNormal.sample(&mut nrng),
                );
                let d = unproject(&(p + chol * z), &cam).into_inner() - mean_f;
                sum += d;
                sum2 += d * d.transpose();
            }
            let m = sum / n as f64;
            let mc = sum2 / n as f64 - m * m.transpose();
            let c = propagate_cov(&p, &s, &cam);
            let rel = (c - mc).norm() / mc.norm();
            assert!(rel < 0.02, "case {case}: rel {rel}");
        }
    }

    #[test]
    fn rotate_cov_preserves_spectrum() {
        let mut rng = stream(7, 0);
        for _ in 0..50 {
            let r = so3_exp(&random_vec(&mut rng, 2.0));
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = a * a.transpose();
            let rs = rotate_cov(&r, &s);
            assert!((rs.trace() - s.trace()).abs() < 1e-12);
            let mut e1: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut e2: Vec<f64> = rs.symmetric_eigen().eigenvalues.iter().copied().collect();
            e1.sort_by(f64::total_cmp);
            e2.sort_by(f64::total_cmp);
            for (a, b) in e1.iter().zip(&e2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        let mut rng = stream(8, 0);
        for _ in 0..100 {
            let t = random_vec(&mut rng, 1.0).normalize();
            let (b1, b2) = tangent_basis(&t);
            assert!(b1.dot(&t).abs() < 1e-14 && b2.dot(&t).abs() < 1e-14);
            assert!((b1.norm() - 1.0).abs() < 1e-14 && (b2.norm() - 1.0).abs() < 1e-14);
            assert!(b1.dot(&b2).abs() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn unproject_is_unit(x in -5000.0f64..5000.0, y in -5000.0f64..5000.0) {
            let cam = Camera::centered(720.0, 1240.0, 370.0);
            let f = unproject(&Vector2::new(x, y), &cam);
            proptest::prop_assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }
}
