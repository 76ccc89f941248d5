use super::*;
use crate::skeleton::{axis_angle_to_matrix, NUM_JOINTS};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq_from(frames: Vec<f64>, joints: usize) -> MotionSequence {
    MotionSequence::from_frames(frames, joints, 30.0)
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, joints: usize) -> MotionSequence {
    let frames = (0..t * joints * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    seq_from(frames, joints)
}

#[test]
fn mpjpe_zero_on_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_seq(&mut rng, 4, 5);
    assert_eq!(mpjpe(&a, &a), 0.0);
}

#[test]
fn mpjpe_uniform_translation_is_its_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_seq(&mut rng, 3, 7);
    let mut pred = gt.clone();
    for t in 0..3 {
        for j in 0..7 {
            pred.set_joint(t, j, gt.joint(t, j) + Vector3::new(0.03, 0.0, 0.04));
        }
    }
    assert!((mpjpe(&pred, &gt) - 50.0).abs() < 1e-9);
}

#[test]
fn mpjpe_averages_over_joints() {
    let gt = seq_from(vec![0.0; NUM_JOINTS * 3], NUM_JOINTS);
    let mut pred = gt.clone();
    pred.set_joint(0, 11, Vector3::new(0.047, 0.0, 0.0));
    assert!((mpjpe(&pred, &gt) - 1.0).abs() < 1e-9);
}

#[test]
#[should_panic(expected = "metric: prediction shape")]
fn mpjpe_rejects_shape_mismatch() {
    let a = seq_from(vec![0.0; 2 * 5 * 3], 5);
    let b = seq_from(vec![0.0; 2 * 4 * 3], 4);
    mpjpe(&a, &b);
}

#[test]
fn pa_mpjpe_removes_similarity_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_seq(&mut rng, 5, 9);
    let r = axis_angle_to_matrix(&Vector3::new(0.4, -0.8, 0.3));
    let t = Vector3::new(1.5, -0.2, 0.7);
    let scale = 1.3;
    let mut pred = gt.clone();
    for ti in 0..5 {
        for j in 0..9 {
            pred.set_joint(ti, j, r * gt.joint(ti, j) * scale + t);
        }
    }
    assert!(pa_mpjpe(&pred, &gt) < 1e-6, "pa {}", pa_mpjpe(&pred, &gt));
    assert!(pa_mpjpe(&gt, &gt) < 1e-9);
}

#[test]
fn pa_mpjpe_flags_degenerate_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_seq(&mut rng, 3, 6);
    let pred = seq_from(vec![0.25; 3 * 6 * 3], 6);
    let (mm, skipped) = pa_mpjpe_with_flags(&pred, &gt);
    assert_eq!(skipped, 3);
    assert_eq!(mm, 0.0);
}

#[test]
fn metrics_invariant_to_consistent_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random_seq(&mut rng, 4, 6);
    let pred = random_seq(&mut rng, 4, 6);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |s: &MotionSequence| {
        let mut out = s.clone();
        for t in 0..s.len() {
            for (new_j, &old_j) in perm.iter().enumerate() {
                out.set_joint(t, new_j, s.joint(t, old_j));
            }
        }
        out
    };
    assert!((mpjpe(&permute(&pred), &permute(&gt)) - mpjpe(&pred, &gt)).abs() < 1e-9);
    assert!((pa_mpjpe(&permute(&pred), &permute(&gt)) - pa_mpjpe(&pred, &gt)).abs() < 1e-9);
}

fn skel_motion(seed: u64, frames: usize) -> (crate::skeleton::WholeBodySkeleton, MotionSequence) {
    let skel = crate::skeleton::WholeBodySkeleton::default_whole_body();
    let id = crate::observe::sample_identity("ev", seed, &skel);
    let motion = crate::observe::generate_motion(&skel, &id, seed + 1, frames, 30.0);
    (skel, motion)
}

#[test]
fn foot_skate_zero_for_motionless_and_airborne_feet() {
    let (skel, motion) = skel_motion(6, 5);
    // motionless: repeat one frame
    let frozen = seq_from(
        (0..5).flat_map(|_| motion.frame(0).to_vec()).collect(),
        NUM_JOINTS,
    );
    assert_eq!(foot_skate(&frozen, &skel), 0.0);
    // airborne: raise everything above the contact threshold
    let mut high = motion.clone();
    for t in 0..high.len() {
        for j in 0..NUM_JOINTS {
            let p = high.joint(t, j);
            high.set_joint(t, j, p + Vector3::new(0.0, 0.0, 1.0));
        }
    }
    assert_eq!(foot_skate(&high, &skel), 0.0);
}

#[test]
fn foot_skate_closed_form_sliding() {
    let (skel, motion) = skel_motion(7, 2);
    let base = motion.frame(0).to_vec();
    let la = skel.joint_index("l_ankle").unwrap();
    let ra = skel.joint_index("r_ankle").unwrap();
    let t = 11usize;
    let mut frames = Vec::new();
    for ti in 0..t {
        let mut row = base.clone();
        for &f in &[la, ra] {
            row[f * 3] += ti as f64 * 0.002; // 2 mm per frame
            row[f * 3 + 2] = 0.0; // on the ground
        }
        frames.extend(row);
    }
    let pred = seq_from(frames, NUM_JOINTS);
    assert!((foot_skate(&pred, &skel) - 2.0).abs() < 1e-9);
}

#[test]
fn bone_err_zero_on_rigid_transform() {
    let (skel, motion) = skel_motion(8, 4);
    let r = axis_angle_to_matrix(&Vector3::new(-0.3, 0.5, 0.9));
    let t = Vector3::new(0.4, 0.1, -0.2);
    let mut pred = motion.clone();
    for ti in 0..4 {
        for j in 0..NUM_JOINTS {
            pred.set_joint(ti, j, r * motion.joint(ti, j) + t);
        }
    }
    assert_eq!(bone_err(&motion, &motion, &skel), 0.0);
    assert!(bone_err(&pred, &motion, &skel) < 1e-9);
}

#[test]
fn bone_err_uniform_scale_oracle() {
    let (skel, motion) = skel_motion(9, 3);
    let mut pred = motion.clone();
    for ti in 0..3 {
        for j in 0..NUM_JOINTS {
            pred.set_joint(ti, j, motion.joint(ti, j) * 1.1);
        }
    }
    // independent oracle: 0.1 x mean ground-truth bone length (in mm)
    let mut lengths = Vec::new();
    for ti in 0..3 {
        for (j, joint) in skel.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                lengths.push((motion.joint(ti, j) - motion.joint(ti, p)).norm());
            }
        }
    }
    let want = 0.1 * 1000.0 * lengths.iter().sum::<f64>() / lengths.len() as f64;
    assert!((bone_err(&pred, &motion, &skel) - want).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn pa_mpjpe_never_exceeds_mpjpe(seed in 0u64..1000, t in 1usize..5, joints in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_seq(&mut rng, t, joints);
        let pred = random_seq(&mut rng, t, joints);
        prop_assert!(pa_mpjpe(&pred, &gt) <= mpjpe(&pred, &gt) + 1e-9);
    }
}

fn small_estimator(steps: usize, seed: u64) -> WholeBodyEstimator {
    use crate::cascade::EstimatorMode;
    use crate::denoiser::{Denoiser, DenoiserConfig, Part, Role};
    let skel = crate::skeleton::WholeBodySkeleton::default_whole_body();
    let cfg = |part: Part, upper: bool| DenoiserConfig {
        part,
        role: Role::Student,
        d_model: 16,
        frame_blocks: 1,
        temporal_layers: 1,
        heads: 2,
        ws: 4,
        condition_upper_body: upper,
        identity_conditioning: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Denoiser::new(cfg(Part::Body, false), &skel, &mut rng).unwrap();
    let hand = Denoiser::new(cfg(Part::Hand, true), &skel, &mut rng).unwrap();
    WholeBodyEstimator::new(
        EstimatorMode::Cascaded,
        body,
        Some(hand),
        crate::diffusion::DiffusionSchedule::linear_beta(100, 1e-4, 0.02),
        steps,
        steps,
        skel,
        30.0,
    )
    .unwrap()
}

fn eval_split(n: usize, frames: usize, seed: u64) -> Vec<TrainSequence> {
    let skel = crate::skeleton::WholeBodySkeleton::default_whole_body();
    crate::train::synth_dataset(&skel, &crate::observe::StereoRig::default(), n, frames, 30.0, 4, seed)
}

#[test]
fn ablation_single_variant_single_row_and_reruns_identically() {
    let est = small_estimator(1, 10);
    let split = eval_split(2, 6, 11);
    let rows = run_ablation(&[("student", &est, 2)], &split, &[1, 2]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].variant, "student");
    for v in [rows[0].body_mpjpe, rows[0].hand_mpjpe, rows[0].pa_mpjpe, rows[0].foot_skate, rows[0].bone_err] {
        assert!(v.is_finite() && v >= 0.0);
    }
    let again = run_ablation(&[("student", &est, 2)], &split, &[1, 2]);
    assert_eq!(rows, again);
    let table = format_ablation(&rows);
    assert!(table.contains("student") && table.contains("body-mpjpe"));
}

#[test]
fn single_step_streaming_beats_ten_step_offline_latency() {
    let est1 = small_estimator(1, 12);
    let est10 = small_estimator(10, 12);
    let split = eval_split(1, 40, 13);
    let obs = &split[0].obs;
    let fast = bench_stream_latency(&est1, obs, 3, None, 5);
    let slow = bench_offline_latency(&est10, obs, 3, None, 2);
    assert!(
        fast.p50_ms < slow.p50_ms,
        "stream p50 {} ms vs 10-step offline p50 {} ms",
        fast.p50_ms,
        slow.p50_ms
    );
}
