//! End-to-end checks of the C ABI against the Rust API: the FFI path must
//! reproduce the library's estimates bit for bit.

use std::ffi::{CStr, CString};
use std::os::raw::c_double;
use std::ptr;

use egomotion::cascade::{EstimatorMode, WholeBodyEstimator};
use egomotion::denoiser::{Denoiser, DenoiserConfig, Part};
use egomotion::diffusion::DiffusionSchedule;
use egomotion::observe::{FrameObservation, StereoRig};
use egomotion::skeleton::{WholeBodySkeleton, NUM_JOINTS};
use egomotion::tensor::DType;
use egomotion::train::synth_dataset;

use egomotion_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FPS: f64 = 30.0;

fn tiny_cfg(part: Part) -> DenoiserConfig {
    DenoiserConfig {
        d_model: 16,
        frame_blocks: 1,
        temporal_layers: 1,
        heads: 2,
        ws: 4,
        identity_conditioning: false,
        ..DenoiserConfig::student(part)
    }
}

fn save_models(dir: &std::path::Path) -> WholeBodySkeleton {
    let skel = WholeBodySkeleton::default_whole_body();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let body = Denoiser::new(tiny_cfg(Part::Body), &skel, &mut rng).unwrap();
    let hand = Denoiser::new(tiny_cfg(Part::Hand), &skel, &mut rng).unwrap();
    body.save(&dir.join("body"), DType::F64).unwrap();
    hand.save(&dir.join("hand"), DType::F64).unwrap();
    skel
}

fn flatten_obs(obs: &[FrameObservation]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut cams = Vec::new();
    let mut kps = Vec::new();
    let mut confs = Vec::new();
    for frame in obs {
        for view in frame.views() {
            let c = &view.camera;
            for r in 0..3 {
                for col in 0..3 {
                    cams.push(c.rotation[(r, col)]);
                }
            }
            cams.extend([c.translation.x, c.translation.y, c.translation.z]);
            cams.extend([c.fx, c.fy, c.cx, c.cy, c.width, c.height]);
            for kp in &view.kp2d {
                kps.extend(kp);
            }
            confs.extend(&view.conf);
        }
    }
    (cams, kps, confs)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ego_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn ffi_estimate_matches_rust_api_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let skel = save_models(dir.path());
    let data = synth_dataset(&skel, &StereoRig::default(), 1, 12, FPS, 4, 42);
    let obs = &data[0].obs;
    let (cams, kps, confs) = flatten_obs(obs);

    // reference result through the Rust API
    let body = Denoiser::load(&dir.path().join("body"), &skel).unwrap();
    let hand = Denoiser::load(&dir.path().join("hand"), &skel).unwrap();
    let est = WholeBodyEstimator::new(
        EstimatorMode::Cascaded,
        body,
        Some(hand),
        DiffusionSchedule::default(),
        2,
        2,
        skel,
        FPS,
    )
    .unwrap();
    let want = est.estimate(obs, 7, None).unwrap();

    // same result through the C ABI
    let body_c = CString::new(dir.path().join("body").to_str().unwrap()).unwrap();
    let hand_c = CString::new(dir.path().join("hand").to_str().unwrap()).unwrap();
    let mut handle: *mut EgoEstimator = ptr::null_mut();
    unsafe {
        let rc = ego_estimator_load(body_c.as_ptr(), hand_c.as_ptr(), 0, 2, 2, FPS, &mut handle);
        assert_eq!(rc, EGO_OK, "load failed: {}", last_error());
        let mut got = vec![0.0_f64; obs.len() * NUM_JOINTS * 3];
        let rc = ego_estimate(handle, obs.len(), cams.as_ptr(), kps.as_ptr(), confs.as_ptr(), 7, got.as_mut_ptr());
        assert_eq!(rc, EGO_OK, "estimate failed: {}", last_error());
        for (a, b) in want.frames.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        ego_estimator_free(handle);
    }
}

#[test]
fn ffi_stream_matches_rust_stream_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let skel = save_models(dir.path());
    let data = synth_dataset(&skel, &StereoRig::default(), 1, 10, FPS, 4, 43);
    let obs = &data[0].obs;
    let (cams, kps, confs) = flatten_obs(obs);

    let body = Denoiser::load(&dir.path().join("body"), &skel).unwrap();
    let hand = Denoiser::load(&dir.path().join("hand"), &skel).unwrap();
    let est = WholeBodyEstimator::new(
        EstimatorMode::Cascaded,
        body,
        Some(hand),
        DiffusionSchedule::default(),
        1,
        1,
        skel,
        FPS,
    )
    .unwrap();
    let mut session = est.start_stream(3, None).unwrap();
    let want: Vec<Vec<f64>> = obs.iter().map(|o| session.push(o)).collect();

    let body_c = CString::new(dir.path().join("body").to_str().unwrap()).unwrap();
    let hand_c = CString::new(dir.path().join("hand").to_str().unwrap()).unwrap();
    let mut handle: *mut EgoEstimator = ptr::null_mut();
    let mut ses: *mut EgoSession = ptr::null_mut();
    unsafe {
        assert_eq!(ego_estimator_load(body_c.as_ptr(), hand_c.as_ptr(), 0, 1, 1, FPS, &mut handle), EGO_OK);
        assert_eq!(ego_stream_start(handle, 3, &mut ses), EGO_OK, "{}", last_error());
        let cam_stride = EGO_NUM_VIEWS * EGO_CAMERA_DOUBLES;
        let kp_stride = EGO_NUM_VIEWS * EGO_NUM_JOINTS * 2;
        let conf_stride = EGO_NUM_VIEWS * EGO_NUM_JOINTS;
        for (t, row) in want.iter().enumerate() {
            let mut out = vec![0.0_f64; NUM_JOINTS * 3];
            let rc = ego_stream_push(
                ses,
                cams[t * cam_stride..].as_ptr(),
                kps[t * kp_stride..].as_ptr(),
                confs[t * conf_stride..].as_ptr(),
                out.as_mut_ptr(),
            );
            assert_eq!(rc, EGO_OK, "{}", last_error());
            for (a, b) in row.iter().zip(&out) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(ego_stream_frames_seen(ses), obs.len());
        ego_session_free(ses);
        ego_estimator_free(handle);
    }
}

#[test]
fn ffi_error_paths_report_codes_and_messages() {
    let mut handle: *mut EgoEstimator = ptr::null_mut();
    unsafe {
        // null body dir
        assert_eq!(
            ego_estimator_load(ptr::null(), ptr::null(), 0, 1, 1, FPS, &mut handle),
            EGO_NULL_POINTER
        );
        assert!(last_error().contains("body_dir"));

        // bad mode
        let p = CString::new("/nonexistent").unwrap();
        assert_eq!(
            ego_estimator_load(p.as_ptr(), ptr::null(), 9, 1, 1, FPS, &mut handle),
            EGO_INVALID_ARGUMENT
        );
        assert!(last_error().contains("mode"));

        // missing model directory
        assert_eq!(
            ego_estimator_load(p.as_ptr(), ptr::null(), 1, 1, 1, FPS, &mut handle),
            EGO_IO_ERROR
        );
        assert!(handle.is_null());

        // null estimator into estimate
        let mut out = [0.0_f64; 1];
        assert_eq!(
            ego_estimate(ptr::null_mut(), 1, ptr::null(), ptr::null(), ptr::null(), 0, out.as_mut_ptr()),
            EGO_NULL_POINTER
        );

        // freeing null handles is a no-op
        ego_estimator_free(ptr::null_mut());
        ego_session_free(ptr::null_mut());
    }
}

#[test]
fn ffi_rejects_multi_step_stream_and_zero_frames() {
    let dir = tempfile::tempdir().unwrap();
    let skel = save_models(dir.path());
    let data = synth_dataset(&skel, &StereoRig::default(), 1, 4, FPS, 4, 44);
    let (cams, kps, confs) = flatten_obs(&data[0].obs);

    let body_c = CString::new(dir.path().join("body").to_str().unwrap()).unwrap();
    let hand_c = CString::new(dir.path().join("hand").to_str().unwrap()).unwrap();
    let mut handle: *mut EgoEstimator = ptr::null_mut();
    let mut ses: *mut EgoSession = ptr::null_mut();
    unsafe {
        assert_eq!(ego_estimator_load(body_c.as_ptr(), hand_c.as_ptr(), 0, 4, 4, FPS, &mut handle), EGO_OK);
        // streaming needs single-step models
        assert_eq!(ego_stream_start(handle, 0, &mut ses), EGO_MODE_ERROR);
        assert!(ses.is_null());
        // zero frames is rejected before any model work
        let mut out = [0.0_f64; 1];
        assert_eq!(
            ego_estimate(handle, 0, cams.as_ptr(), kps.as_ptr(), confs.as_ptr(), 0, out.as_mut_ptr()),
            EGO_INVALID_ARGUMENT
        );
        ego_estimator_free(handle);
    }
    let _ = (kps, confs);
}

#[test]
fn identity_prior_round_trips_through_ffi() {
    let dir = tempfile::tempdir().unwrap();
    let skel = WholeBodySkeleton::default_whole_body();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = DenoiserConfig { identity_conditioning: true, ..tiny_cfg(Part::Whole) };
    let body = Denoiser::new(cfg, &skel, &mut rng).unwrap();
    body.save(&dir.path().join("body"), DType::F64).unwrap();

    let data = synth_dataset(&skel, &StereoRig::default(), 1, 6, FPS, 4, 45);
    let seq = &data[0];
    let (cams, kps, confs) = flatten_obs(&seq.obs);

    let body2 = Denoiser::load(&dir.path().join("body"), &skel).unwrap();
    let est = WholeBodyEstimator::new(
        EstimatorMode::ParallelJoint,
        body2,
        None,
        DiffusionSchedule::default(),
        2,
        1,
        skel,
        FPS,
    )
    .unwrap();
    let prior = egomotion::identity::IdentityPrior {
        exemplars: seq.exemplars.clone(),
        num_exemplars: seq.num_exemplars,
        num_joints: NUM_JOINTS,
        f_ex: vec![0.0; egomotion::identity::D_ID],
    };
    let want = est.estimate(&seq.obs, 5, Some(&prior)).unwrap();

    let body_c = CString::new(dir.path().join("body").to_str().unwrap()).unwrap();
    let mut handle: *mut EgoEstimator = ptr::null_mut();
    unsafe {
        assert_eq!(ego_estimator_load(body_c.as_ptr(), ptr::null(), 1, 2, 1, FPS, &mut handle), EGO_OK);
        let mut got = vec![0.0_f64; seq.obs.len() * NUM_JOINTS * 3];
        // without a prior an identity-conditioned model must refuse
        assert_eq!(
            ego_estimate(handle, seq.obs.len(), cams.as_ptr(), kps.as_ptr(), confs.as_ptr(), 5, got.as_mut_ptr()),
            EGO_RUNTIME_ERROR
        );
        assert_eq!(
            ego_estimator_set_identity(handle, seq.exemplars.as_ptr() as *const c_double, seq.num_exemplars),
            EGO_OK
        );
        assert_eq!(
            ego_estimate(handle, seq.obs.len(), cams.as_ptr(), kps.as_ptr(), confs.as_ptr(), 5, got.as_mut_ptr()),
            EGO_OK,
            "{}",
            last_error()
        );
        for (a, b) in want.frames.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        ego_estimator_free(handle);
    }
}
