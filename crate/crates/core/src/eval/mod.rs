//! Evaluation metrics (MPJPE, PA-MPJPE, foot skate, bone error), the
//! ablation matrix, and latency benchmarking.

use nalgebra::{Matrix3, Vector3};

use crate::cascade::WholeBodyEstimator;
use crate::identity::IdentityPrior;
use crate::skeleton::{MotionSequence, WholeBodySkeleton};
use crate::train::TrainSequence;

/// Predicted foot height below which a frame counts as in contact (meters).
pub const SKATE_CONTACT_HEIGHT: f64 = 0.05;

fn check_shapes(pred: &MotionSequence, gt: &MotionSequence) {
    assert_eq!(
        (pred.len(), pred.num_joints),
        (gt.len(), gt.num_joints),
        "metric: prediction shape ({}, {}) != ground truth ({}, {})",
        pred.len(),
        pred.num_joints,
        gt.len(),
        gt.num_joints
    );
}

/// Mean per-joint position error in millimeters over a joint subset.
pub fn mpjpe_subset(pred: &MotionSequence, gt: &MotionSequence, joints: &[usize]) -> f64 {
    check_shapes(pred, gt);
    assert!(!joints.is_empty(), "metric: empty joint subset");
    let mut sum = 0.0;
    for t in 0..pred.len() {
        for &j in joints {
            sum += (pred.joint(t, j) - gt.joint(t, j)).norm();
        }
    }
    1000.0 * sum / (pred.len() * joints.len()) as f64
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(pred: &MotionSequence, gt: &MotionSequence) -> f64 {
    let joints: Vec<usize> = (0..pred.num_joints).collect();
    mpjpe_subset(pred, gt, &joints)
}

/// Least-squares similarity alignment (rotation, translation, scale) of one
/// frame's points onto the target; returns None for a degenerate frame
/// (all source points coincident).
fn umeyama_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut var_s = 0.0;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        let ps = p - cs;
        let qd = q - cd;
        var_s += ps.norm_squared();
        h += qd * ps.transpose();
    }
    var_s /= n;
    if var_s < 1e-18 {
        return None;
    }
    let svd = (h / n).svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (svd.singular_values.component_mul(&s.diagonal())).sum() / var_s;
    let t = cd - r * cs * scale;
    Some((scale, r, t))
}

/// Procrustes-aligned MPJPE (mm): per frame, the prediction is aligned to
/// the ground truth by the best similarity transform before measuring.
/// Degenerate frames are skipped; the count of skipped frames is returned.
pub fn pa_mpjpe_with_flags(pred: &MotionSequence, gt: &MotionSequence) -> (f64, usize) {
    check_shapes(pred, gt);
    let n = pred.num_joints;
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for t in 0..pred.len() {
        let p: Vec<Vector3<f64>> = (0..n).map(|j| pred.joint(t, j)).collect();
        let q: Vec<Vector3<f64>> = (0..n).map(|j| gt.joint(t, j)).collect();
        match umeyama_align(&p, &q) {
            Some((s, r, tr)) => {
                for (pj, qj) in p.iter().zip(&q) {
                    sum += (r * pj * s + tr - qj).norm();
                }
                counted += n;
            }
            None => skipped += 1,
        }
    }
    let mm = if counted > 0 { 1000.0 * sum / counted as f64 } else { 0.0 };
    (mm, skipped)
}

pub fn pa_mpjpe(pred: &MotionSequence, gt: &MotionSequence) -> f64 {
    pa_mpjpe_with_flags(pred, gt).0
}

/// Foot skate (mm): mean horizontal per-frame displacement of the foot
/// keypoints over frames where the predicted foot is in contact
/// (height < 5 cm). Zero when no frame is in contact.
pub fn foot_skate(pred: &MotionSequence, skel: &WholeBodySkeleton) -> f64 {
    let feet = [
        skel.joint_index("l_ankle").expect("skeleton has ankles"),
        skel.joint_index("r_ankle").expect("skeleton has ankles"),
    ];
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 1..pred.len() {
        for &f in &feet {
            let cur = pred.joint(t, f);
            if cur.z < SKATE_CONTACT_HEIGHT {
                let prev = pred.joint(t - 1, f);
                let d = ((cur.x - prev.x).powi(2) + (cur.y - prev.y).powi(2)).sqrt();
                sum += d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        1000.0 * sum / count as f64
    }
}

/// Bone length error (mm): mean over frames and bones of the absolute
/// difference between predicted and ground-truth bone lengths.
pub fn bone_err(pred: &MotionSequence, gt: &MotionSequence, skel: &WholeBodySkeleton) -> f64 {
    check_shapes(pred, gt);
    let bones: Vec<(usize, usize)> = skel
        .joints
        .iter()
        .enumerate()
        .filter_map(|(j, joint)| joint.parent.map(|p| (j, p)))
        .collect();
    let mut sum = 0.0;
    for t in 0..pred.len() {
        for &(j, p) in &bones {
            let lp = (pred.joint(t, j) - pred.joint(t, p)).norm();
            let lg = (gt.joint(t, j) - gt.joint(t, p)).norm();
            sum += (lp - lg).abs();
        }
    }
    1000.0 * sum / (pred.len() * bones.len()) as f64
}

/// One evaluated variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub body_mpjpe: f64,
    pub hand_mpjpe: f64,
    pub whole_mpjpe: f64,
    pub pa_mpjpe: f64,
    pub foot_skate: f64,
    pub bone_err: f64,
}

/// Evaluates one estimator over a test split, averaging `evals` sampler
/// seeds per sequence per base seed (5 for diffusion variants per the
/// evaluation protocol, 1 for deterministic variants).
pub fn evaluate_estimator(
    est: &WholeBodyEstimator,
    split: &[TrainSequence],
    seeds: &[u64],
    evals: usize,
    variant: &str,
) -> AblationRow {
    let skel = &est.skel;
    let hand_joints: Vec<usize> = skel.left_hand.iter().chain(skel.right_hand.iter()).cloned().collect();
    let mut acc = [0.0f64; 6];
    let mut runs = 0usize;
    for &seed in seeds {
        for (si, seq) in split.iter().enumerate() {
            let prior = IdentityPrior {
                exemplars: seq.exemplars.clone(),
                num_exemplars: seq.num_exemplars,
                num_joints: skel.num_joints(),
                f_ex: vec![0.0; crate::identity::D_ID],
            };
            for e in 0..evals.max(1) {
                let run_seed = seed
                    .wrapping_add(si as u64)
                    .wrapping_add(7919 * e as u64);
                let pred = est
                    .estimate(&seq.obs, run_seed, Some(&prior))
                    .expect("estimate failed during evaluation");
                acc[0] += mpjpe_subset(&pred, &seq.motion, &skel.body);
                acc[1] += mpjpe_subset(&pred, &seq.motion, &hand_joints);
                acc[2] += mpjpe(&pred, &seq.motion);
                acc[3] += pa_mpjpe(&pred, &seq.motion);
                acc[4] += foot_skate(&pred, skel);
                acc[5] += bone_err(&pred, &seq.motion, skel);
                runs += 1;
            }
        }
    }
    let n = runs as f64;
    AblationRow {
        variant: variant.to_string(),
        body_mpjpe: acc[0] / n,
        hand_mpjpe: acc[1] / n,
        whole_mpjpe: acc[2] / n,
        pa_mpjpe: acc[3] / n,
        foot_skate: acc[4] / n,
        bone_err: acc[5] / n,
    }
}

/// Evaluates every named variant on the test split.
pub fn run_ablation(
    variants: &[(&str, &WholeBodyEstimator, usize)],
    split: &[TrainSequence],
    seeds: &[u64],
) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|(name, est, evals)| evaluate_estimator(est, split, seeds, *evals, name))
        .collect()
}

/// Formats ablation rows as an aligned plain-text table.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "variant", "body-mpjpe", "hand-mpjpe", "whole-mpjpe", "pa-mpjpe", "foot-skate", "bone-err"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3}\n",
            r.variant, r.body_mpjpe, r.hand_mpjpe, r.whole_mpjpe, r.pa_mpjpe, r.foot_skate, r.bone_err
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub frames: usize,
}

fn stats(mut times_ms: Vec<f64>) -> LatencyStats {
    assert!(!times_ms.is_empty());
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| times_ms[((times_ms.len() - 1) as f64 * q).round() as usize];
    LatencyStats {
        p50_ms: at(0.5),
        p95_ms: at(0.95),
        max_ms: *times_ms.last().unwrap(),
        frames: times_ms.len(),
    }
}

/// Per-frame wall-clock latency of a streaming session after `warmup`
/// frames.
pub fn bench_stream_latency(
    est: &WholeBodyEstimator,
    obs: &[crate::observe::FrameObservation],
    seed: u64,
    identity: Option<&IdentityPrior>,
    warmup: usize,
) -> LatencyStats {
    assert!(obs.len() > warmup, "bench: need more frames than warmup");
    let mut session = est.start_stream(seed, identity).expect("streaming estimator");
    let mut times = Vec::with_capacity(obs.len() - warmup);
    for (t, frame) in obs.iter().enumerate() {
        let start = std::time::Instant::now();
        session.push(frame);
        let dt = start.elapsed().as_secs_f64() * 1000.0;
        if t >= warmup {
            times.push(dt);
        }
    }
    stats(times)
}

/// Average per-frame wall-clock latency of offline estimation, repeated
/// `reps` times (for multi-step estimators that cannot stream).
pub fn bench_offline_latency(
    est: &WholeBodyEstimator,
    obs: &[crate::observe::FrameObservation],
    seed: u64,
    identity: Option<&IdentityPrior>,
    reps: usize,
) -> LatencyStats {
    assert!(reps >= 1 && !obs.is_empty());
    let mut times = Vec::with_capacity(reps);
    for r in 0..reps {
        let start = std::time::Instant::now();
        est.estimate(obs, seed.wrapping_add(r as u64), identity).expect("estimate failed");
        times.push(start.elapsed().as_secs_f64() * 1000.0 / obs.len() as f64);
    }
    stats(times)
}

#[cfg(test)]
mod tests;
