//! C ABI for the pnec library.
//!
//! Problems and estimates are opaque handles created and released through
//! this API. Every fallible function returns a [`PnecStatus`]; on failure
//! [`pnec_last_error`] describes what went wrong on the calling thread.
//! Rotations cross the boundary as row-major 3×3 arrays, covariances as
//! `[xx, xy, yy]` in px².

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use nalgebra::{Matrix3, Vector2, Vector3};
use pnec::energy::{energy_sym, Correspondence, EnergyConfig, PnecProblem, RelativePose};
use pnec::geometry::{Camera, Cov2, Rotation};
use pnec::solver::{estimate_pose_multistage, solve_pnec, SolveReport, SolverConfig};
use pnec::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InsufficientData = 3,
    Degenerate = 4,
    NumericalFailure = 5,
    Panic = 6,
}

/// Correspondences with their camera.
pub struct PnecProblemHandle {
    camera: Camera,
    correspondences: Vec<Correspondence>,
}

/// Result of a multi-stage estimate.
pub struct PnecEstimateHandle {
    report: SolveReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PnecStatus {
    match e {
        Error::InvalidInput(_) | Error::Parse(_) => PnecStatus::InvalidInput,
        Error::InsufficientData { .. } => PnecStatus::InsufficientData,
        Error::Degenerate(_) | Error::IllPosedEnergy => PnecStatus::Degenerate,
        Error::Stage { source, .. } => status_of(source),
        _ => PnecStatus::NumericalFailure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PnecStatus, String)>) -> PnecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PnecStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PnecStatus::Panic
        }
    }
}

fn fail(e: Error) -> (PnecStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PnecStatus, String) {
    (PnecStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_pose(
    rotation: *const f64,
    translation: *const f64,
) -> Result<RelativePose, (PnecStatus, String)> {
    if rotation.is_null() || translation.is_null() {
        return Err(null("pose"));
    }
    let r = std::slice::from_raw_parts(rotation, 9);
    let t = std::slice::from_raw_parts(translation, 3);
    let m = Matrix3::from_row_slice(r);
    let rot = Rotation::from_matrix_unchecked(m);
    if rot.orthogonality_error() > 1e-6 || m.determinant() <= 0.0 {
        return Err((
            PnecStatus::InvalidInput,
            "rotation is not orthonormal".into(),
        ));
    }
    let t = Vector3::from_row_slice(t);
    if !(t.norm() > 0.0) || !t.iter().all(|v| v.is_finite()) {
        return Err((
            PnecStatus::InvalidInput,
            "translation must be finite and non-zero".into(),
        ));
    }
    Ok(RelativePose::new(rot, t))
}

unsafe fn write_pose(
    pose: &RelativePose,
    rotation: *mut f64,
    translation: *mut f64,
) -> Result<(), (PnecStatus, String)> {
    if rotation.is_null() || translation.is_null() {
        return Err(null("output pose"));
    }
    let m = pose.rotation.matrix();
    for i in 0..3 {
        for j in 0..3 {
            *rotation.add(3 * i + j) = m[(i, j)];
        }
        *translation.add(i) = pose.t()[i];
    }
    Ok(())
}

unsafe fn read_cov(c: *const f64) -> Result<Cov2, (PnecStatus, String)> {
    if c.is_null() {
        return Ok(Cov2::identity());
    }
    let v = std::slice::from_raw_parts(c, 3);
    let m = Cov2::new(v[0], v[1], v[1], v[2]);
    if !v.iter().all(|x| x.is_finite()) || v[0] < 0.0 || v[2] < 0.0 || m.determinant() < 0.0 {
        return Err((
            PnecStatus::InvalidInput,
            "covariance is not positive semi-definite".into(),
        ));
    }
    Ok(m)
}

impl PnecProblemHandle {
    fn problem(&self) -> PnecProblem {
        PnecProblem::new(self.camera, self.correspondences.clone())
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pnec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn pnec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an empty problem for a pinhole camera.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn pnec_problem_new(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    out: *mut *mut PnecProblemHandle,
) -> PnecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let camera = Camera::new(fx, fy, cx, cy).map_err(fail)?;
        let h = Box::new(PnecProblemHandle {
            camera,
            correspondences: Vec::new(),
        });
        *out = Box::into_raw(h);
        Ok(())
    })
}

/// Appends a correspondence. `cov` and `cov_prime` may be NULL for the unit
/// covariance.
///
/// # Safety
/// `problem` must come from [`pnec_problem_new`]; non-NULL covariance
/// pointers must reference three readable doubles.
#[no_mangle]
pub unsafe extern "C" fn pnec_problem_add(
    problem: *mut PnecProblemHandle,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    cov: *const f64,
    cov_prime: *const f64,
) -> PnecStatus {
    guard(|| {
        let p = problem.as_mut().ok_or_else(|| null("problem"))?;
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err((
                PnecStatus::InvalidInput,
                "pixel coordinates must be finite".into(),
            ));
        }
        p.correspondences.push(Correspondence {
            p: Vector2::new(x1, y1),
            p_prime: Vector2::new(x2, y2),
            cov: read_cov(cov)?,
            cov_prime: read_cov(cov_prime)?,
        });
        Ok(())
    })
}

/// Number of correspondences, 0 for NULL.
///
/// # Safety
/// `problem` must be NULL or come from [`pnec_problem_new`].
#[no_mangle]
pub unsafe extern "C" fn pnec_problem_len(problem: *const PnecProblemHandle) -> usize {
    problem.as_ref().map_or(0, |p| p.correspondences.len())
}

/// Releases a problem. NULL is ignored.
///
/// # Safety
/// `problem` must be NULL or come from [`pnec_problem_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pnec_problem_free(problem: *mut PnecProblemHandle) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Symmetric PNEC energy of a pose.
///
/// # Safety
/// `problem` must come from [`pnec_problem_new`], `rotation` must reference
/// nine doubles, `translation` three, `energy` one writable double.
#[no_mangle]
pub unsafe extern "C" fn pnec_energy(
    problem: *const PnecProblemHandle,
    rotation: *const f64,
    translation: *const f64,
    energy: *mut f64,
) -> PnecStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if energy.is_null() {
            return Err(null("energy"));
        }
        let pose = read_pose(rotation, translation)?;
        *energy = energy_sym(&pose, &p.problem().pairs, &EnergyConfig::default()).map_err(fail)?;
        Ok(())
    })
}

/// Refines a pose on the symmetric PNEC energy, writing the result in place.
///
/// # Safety
/// `problem` must come from [`pnec_problem_new`]; `rotation` must reference
/// nine and `translation` three readable and writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pnec_refine(
    problem: *const PnecProblemHandle,
    rotation: *mut f64,
    translation: *mut f64,
) -> PnecStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        let init = read_pose(rotation, translation)?;
        let out = solve_pnec(&p.problem().pairs, &init, &SolverConfig::default()).map_err(fail)?;
        write_pose(&out.pose, rotation, translation)
    })
}

/// Runs RANSAC, NEC least squares and PNEC refinement.
///
/// # Safety
/// `problem` must come from [`pnec_problem_new`]; `out` must be a valid
/// pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn pnec_estimate(
    problem: *const PnecProblemHandle,
    seed: u64,
    out: *mut *mut PnecEstimateHandle,
) -> PnecStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SolverConfig {
            seed,
            ..Default::default()
        };
        let report = estimate_pose_multistage(&p.problem(), None, &cfg).map_err(fail)?;
        *out = Box::into_raw(Box::new(PnecEstimateHandle { report }));
        Ok(())
    })
}

/// Copies the estimated pose.
///
/// # Safety
/// `estimate` must come from [`pnec_estimate`]; `rotation` must reference
/// nine writable doubles and `translation` three.
#[no_mangle]
pub unsafe extern "C" fn pnec_estimate_pose(
    estimate: *const PnecEstimateHandle,
    rotation: *mut f64,
    translation: *mut f64,
) -> PnecStatus {
    guard(|| {
        let e = estimate.as_ref().ok_or_else(|| null("estimate"))?;
        write_pose(&e.report.pose, rotation, translation)
    })
}

/// Writes the inlier mask (1 inlier, 0 outlier) into `mask`, which holds
/// `len` bytes, and the inlier count into `count` when it is non-NULL.
///
/// # Safety
/// `estimate` must come from [`pnec_estimate`]; `mask` must reference `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pnec_estimate_inliers(
    estimate: *const PnecEstimateHandle,
    mask: *mut u8,
    len: usize,
    count: *mut usize,
) -> PnecStatus {
    guard(|| {
        let e = estimate.as_ref().ok_or_else(|| null("estimate"))?;
        let inliers = &e.report.inliers;
        if len != inliers.len() {
            return Err((
                PnecStatus::InvalidInput,
                format!("mask holds {len} entries, problem has {}", inliers.len()),
            ));
        }
        if mask.is_null() {
            return Err(null("mask"));
        }
        for (i, &m) in inliers.iter().enumerate() {
            *mask.add(i) = m as u8;
        }
        if !count.is_null() {
            *count = e.report.inlier_count();
        }
        Ok(())
    })
}

/// Releases an estimate. NULL is ignored.
///
/// # Safety
/// `estimate` must be NULL or come from [`pnec_estimate`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pnec_estimate_free(estimate: *mut PnecEstimateHandle) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}
