//! C ABI for the egomotion estimation library.
//!
//! All functions return an `ego_status` code; `EGO_OK` (0) is success. On
//! failure a human-readable message is stored per thread and retrievable
//! with [`ego_last_error`]. Handles are opaque pointers created and
//! destroyed by this library; passing a handle after freeing it, or a
//! pointer that did not come from the matching constructor, is undefined
//! behavior (as is standard for C object lifetimes).
//!
//! Observation layout (all `double`, row-major):
//! - camera block, per frame: 2 views x 18 values (row-major 3x3 world
//!   rotation, world translation xyz, fx, fy, cx, cy, width, height)
//! - keypoint block, per frame: 2 views x 47 x 2 pixel coordinates
//! - confidence block, per frame: 2 views x 47 values in [0, 1]
//!
//! Estimated motion is written as `frames x 47 x 3` world coordinates in
//! meters.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use egomotion::cascade::{EstimatorMode, StreamSession, WholeBodyEstimator};
use egomotion::denoiser::Denoiser;
use egomotion::diffusion::DiffusionSchedule;
use egomotion::identity::{IdentityPrior, D_ID};
use egomotion::observe::{CameraPose, FrameObservation, ViewObservation};
use egomotion::skeleton::WholeBodySkeleton;

/// Status codes returned by every fallible function.
pub const EGO_OK: c_int = 0;
/// A required pointer argument was null.
pub const EGO_NULL_POINTER: c_int = 1;
/// An argument was out of range or inconsistent.
pub const EGO_INVALID_ARGUMENT: c_int = 2;
/// Loading a model or reading a path failed.
pub const EGO_IO_ERROR: c_int = 3;
/// The model combination does not support the requested mode.
pub const EGO_MODE_ERROR: c_int = 4;
/// Estimation itself failed.
pub const EGO_RUNTIME_ERROR: c_int = 5;

/// Number of whole-body joints in every motion buffer.
pub const EGO_NUM_JOINTS: usize = 47;
/// Number of camera views per frame.
pub const EGO_NUM_VIEWS: usize = 2;
/// Doubles per camera description (rotation 9, translation 3, intrinsics 6).
pub const EGO_CAMERA_DOUBLES: usize = 18;

const CAM_STRIDE: usize = EGO_NUM_VIEWS * EGO_CAMERA_DOUBLES;
const KP_STRIDE: usize = EGO_NUM_VIEWS * EGO_NUM_JOINTS * 2;
const CONF_STRIDE: usize = EGO_NUM_VIEWS * EGO_NUM_JOINTS;
const OUT_STRIDE: usize = EGO_NUM_JOINTS * 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(code: c_int, msg: &str) -> c_int {
    set_error(msg);
    code
}

/// Estimator handle: loaded models plus sampling configuration.
pub struct EgoEstimator {
    inner: WholeBodyEstimator,
    prior: Option<IdentityPrior>,
}

/// Streaming session handle. The estimator it was started from must outlive
/// the session.
pub struct EgoSession {
    // `StreamSession` borrows the estimator; the raw-pointer contract above
    // (estimator outlives session) makes the erased lifetime sound.
    inner: StreamSession<'static>,
}

/// Returns the message for the most recent error on this thread. The
/// pointer is valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ego_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Number of joints per frame in all motion buffers.
#[no_mangle]
pub extern "C" fn ego_num_joints() -> usize {
    EGO_NUM_JOINTS
}

unsafe fn cstr_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, String> {
    if p.is_null() {
        return Err(format!("{} is null", what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| format!("{} is not valid UTF-8", what))
}

fn mode_from_int(mode: c_int) -> Result<EstimatorMode, String> {
    match mode {
        0 => Ok(EstimatorMode::Cascaded),
        1 => Ok(EstimatorMode::ParallelJoint),
        2 => Ok(EstimatorMode::Separate),
        3 => Ok(EstimatorMode::Regression),
        _ => Err(format!("unknown mode {} (0 cascaded, 1 parallel-joint, 2 separate, 3 regression)", mode)),
    }
}

/// Loads an estimator from model directories written by the `egomotion`
/// CLI or library.
///
/// `hand_dir` may be null for parallel-joint mode. `steps`/`hand_steps`
/// are the DDIM step counts. The diffusion schedule is the default linear
/// schedule (K = 1000).
///
/// # Safety
/// `body_dir` (and `hand_dir` when non-null) must be valid NUL-terminated
/// strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ego_estimator_load(
    body_dir: *const c_char,
    hand_dir: *const c_char,
    mode: c_int,
    steps: usize,
    hand_steps: usize,
    fps: c_double,
    out: *mut *mut EgoEstimator,
) -> c_int {
    if out.is_null() {
        return fail(EGO_NULL_POINTER, "out is null");
    }
    *out = ptr::null_mut();
    let body_dir = match cstr_arg(body_dir, "body_dir") {
        Ok(s) => s,
        Err(e) => return fail(EGO_NULL_POINTER, &e),
    };
    let mode = match mode_from_int(mode) {
        Ok(m) => m,
        Err(e) => return fail(EGO_INVALID_ARGUMENT, &e),
    };
    let skel = WholeBodySkeleton::default_whole_body();
    let body = match Denoiser::load(Path::new(body_dir), &skel) {
        Ok(d) => d,
        Err(e) => return fail(EGO_IO_ERROR, &format!("loading body model: {}", e)),
    };
    let hand = if hand_dir.is_null() {
        None
    } else {
        let dir = match cstr_arg(hand_dir, "hand_dir") {
            Ok(s) => s,
            Err(e) => return fail(EGO_NULL_POINTER, &e),
        };
        match Denoiser::load(Path::new(dir), &skel) {
            Ok(d) => Some(d),
            Err(e) => return fail(EGO_IO_ERROR, &format!("loading hand model: {}", e)),
        }
    };
    match WholeBodyEstimator::new(mode, body, hand, DiffusionSchedule::default(), steps, hand_steps, skel, fps) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EgoEstimator { inner, prior: None }));
            EGO_OK
        }
        Err(e) => fail(EGO_MODE_ERROR, &e.to_string()),
    }
}

/// Attaches an exemplar-based identity prior used by subsequent estimates
/// and sessions: `exemplars` is `num_exemplars x 47 x 3` world keypoints.
/// Passing null clears the prior.
///
/// # Safety
/// `estimator` must be a live estimator handle; `exemplars`, when non-null,
/// must point to `num_exemplars * 141` doubles.
#[no_mangle]
pub unsafe extern "C" fn ego_estimator_set_identity(
    estimator: *mut EgoEstimator,
    exemplars: *const c_double,
    num_exemplars: usize,
) -> c_int {
    let est = match estimator.as_mut() {
        Some(e) => e,
        None => return fail(EGO_NULL_POINTER, "estimator is null"),
    };
    if exemplars.is_null() {
        est.prior = None;
        return EGO_OK;
    }
    if num_exemplars == 0 {
        return fail(EGO_INVALID_ARGUMENT, "num_exemplars is zero");
    }
    let vals = std::slice::from_raw_parts(exemplars, num_exemplars * OUT_STRIDE).to_vec();
    est.prior = Some(IdentityPrior {
        exemplars: vals,
        num_exemplars,
        num_joints: EGO_NUM_JOINTS,
        f_ex: vec![0.0; D_ID],
    });
    EGO_OK
}

/// Frees an estimator. Null is ignored.
///
/// # Safety
/// `estimator` must be a handle from [`ego_estimator_load`], not yet freed,
/// with no live sessions.
#[no_mangle]
pub unsafe extern "C" fn ego_estimator_free(estimator: *mut EgoEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

unsafe fn view_from_rows(cam: &[f64], kp: &[f64], conf: &[f64]) -> ViewObservation {
    let camera = CameraPose {
        rotation: nalgebra::Matrix3::from_fn(|r, c| cam[r * 3 + c]),
        translation: nalgebra::Vector3::new(cam[9], cam[10], cam[11]),
        fx: cam[12],
        fy: cam[13],
        cx: cam[14],
        cy: cam[15],
        width: cam[16],
        height: cam[17],
    };
    let kp2d = (0..EGO_NUM_JOINTS).map(|j| [kp[j * 2], kp[j * 2 + 1]]).collect();
    ViewObservation { camera, kp2d, conf: conf.to_vec() }
}

unsafe fn collect_observations(
    frames: usize,
    cameras: *const c_double,
    keypoints: *const c_double,
    confidences: *const c_double,
) -> Result<Vec<FrameObservation>, (c_int, String)> {
    if cameras.is_null() || keypoints.is_null() || confidences.is_null() {
        return Err((EGO_NULL_POINTER, "cameras/keypoints/confidences must be non-null".into()));
    }
    if frames == 0 {
        return Err((EGO_INVALID_ARGUMENT, "frames is zero".into()));
    }
    let cams = std::slice::from_raw_parts(cameras, frames * CAM_STRIDE);
    let kps = std::slice::from_raw_parts(keypoints, frames * KP_STRIDE);
    let confs = std::slice::from_raw_parts(confidences, frames * CONF_STRIDE);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let cam = &cams[t * CAM_STRIDE..(t + 1) * CAM_STRIDE];
        let kp = &kps[t * KP_STRIDE..(t + 1) * KP_STRIDE];
        let conf = &confs[t * CONF_STRIDE..(t + 1) * CONF_STRIDE];
        out.push(FrameObservation {
            left: view_from_rows(&cam[..EGO_CAMERA_DOUBLES], &kp[..EGO_NUM_JOINTS * 2], &conf[..EGO_NUM_JOINTS]),
            right: view_from_rows(&cam[EGO_CAMERA_DOUBLES..], &kp[EGO_NUM_JOINTS * 2..], &conf[EGO_NUM_JOINTS..]),
        });
    }
    Ok(out)
}

/// Offline estimation over a full observation sequence. Writes
/// `frames * 141` doubles to `out_motion`.
///
/// # Safety
/// `estimator` must be a live handle; the observation pointers must cover
/// `frames` frames in the documented layout; `out_motion` must have room
/// for `frames * 141` doubles.
#[no_mangle]
pub unsafe extern "C" fn ego_estimate(
    estimator: *mut EgoEstimator,
    frames: usize,
    cameras: *const c_double,
    keypoints: *const c_double,
    confidences: *const c_double,
    seed: u64,
    out_motion: *mut c_double,
) -> c_int {
    let est = match estimator.as_ref() {
        Some(e) => e,
        None => return fail(EGO_NULL_POINTER, "estimator is null"),
    };
    if out_motion.is_null() {
        return fail(EGO_NULL_POINTER, "out_motion is null");
    }
    let obs = match collect_observations(frames, cameras, keypoints, confidences) {
        Ok(o) => o,
        Err((code, msg)) => return fail(code, &msg),
    };
    match est.inner.estimate(&obs, seed, est.prior.as_ref()) {
        Ok(motion) => {
            let dst = std::slice::from_raw_parts_mut(out_motion, frames * OUT_STRIDE);
            dst.copy_from_slice(&motion.frames);
            EGO_OK
        }
        Err(e) => fail(EGO_RUNTIME_ERROR, &e.to_string()),
    }
}

/// Starts a causal streaming session (single-step student models only).
/// The estimator must outlive the session.
///
/// # Safety
/// `estimator` must be a live handle that stays alive (and is not mutated)
/// until `ego_session_free`; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ego_stream_start(estimator: *mut EgoEstimator, seed: u64, out: *mut *mut EgoSession) -> c_int {
    if out.is_null() {
        return fail(EGO_NULL_POINTER, "out is null");
    }
    *out = ptr::null_mut();
    let est = match estimator.as_ref() {
        Some(e) => e,
        None => return fail(EGO_NULL_POINTER, "estimator is null"),
    };
    // erase the borrow's lifetime; the documented contract is that the
    // estimator outlives the session
    let est_static: &'static EgoEstimator = &*(est as *const EgoEstimator);
    match est_static.inner.start_stream(seed, est_static.prior.as_ref()) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EgoSession { inner }));
            EGO_OK
        }
        Err(e) => fail(EGO_MODE_ERROR, &e.to_string()),
    }
}

/// Pushes one frame of observations and writes the 141 doubles of that
/// frame's whole-body estimate.
///
/// # Safety
/// `session` must be a live session handle; the observation pointers must
/// cover one frame; `out_frame` must have room for 141 doubles.
#[no_mangle]
pub unsafe extern "C" fn ego_stream_push(
    session: *mut EgoSession,
    cameras: *const c_double,
    keypoints: *const c_double,
    confidences: *const c_double,
    out_frame: *mut c_double,
) -> c_int {
    let ses = match session.as_mut() {
        Some(s) => s,
        None => return fail(EGO_NULL_POINTER, "session is null"),
    };
    if out_frame.is_null() {
        return fail(EGO_NULL_POINTER, "out_frame is null");
    }
    let obs = match collect_observations(1, cameras, keypoints, confidences) {
        Ok(o) => o,
        Err((code, msg)) => return fail(code, &msg),
    };
    let row = ses.inner.push(&obs[0]);
    std::slice::from_raw_parts_mut(out_frame, OUT_STRIDE).copy_from_slice(&row);
    EGO_OK
}

/// Number of frames pushed so far.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn ego_stream_frames_seen(session: *const EgoSession) -> usize {
    session.as_ref().map(|s| s.inner.frames_seen()).unwrap_or(0)
}

/// Frees a session. Null is ignored.
///
/// # Safety
/// `session` must be a handle from [`ego_stream_start`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ego_session_free(session: *mut EgoSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
