//! DDPM training of the teacher specialists, the regression variant, and
//! SDS distillation of the one-step student.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, Part, TargetNorm};
use crate::diffusion::{diffuse_forward, DiffusionSchedule};
use crate::observe::{generate_motion, render_observation, sample_identity, FrameObservation, StereoRig};
use crate::skeleton::{MotionSequence, WholeBodySkeleton, NUM_BODY, NUM_JOINTS, NUM_UPPER};
use crate::tensor::{Adam, Graph, Precision, Value};

/// A ground-truth foot is in contact when below this height (meters).
pub const CONTACT_HEIGHT: f64 = 0.05;
/// ... and moving slower than this horizontal speed (m/s).
pub const CONTACT_SPEED: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vel: f64,
    pub lambda_foot: f64,
    pub lambda_frame: f64,
}

impl LossWeights {
    /// Main-phase weights.
    pub fn early() -> LossWeights {
        LossWeights { lambda_vel: 300.0, lambda_foot: 100.0, lambda_frame: 1.0 }
    }

    /// Late-phase weights (final fraction of teacher training).
    pub fn late() -> LossWeights {
        LossWeights { lambda_vel: 4000.0, lambda_foot: 20000.0, lambda_frame: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Window length T: one batch is T consecutive frames.
    pub window: usize,
    pub lr: f64,
    /// Fraction of steps at the end trained with the late-phase weights.
    pub late_phase_fraction: f64,
    pub lambda_distill: f64,
    /// k_small for distillation is uniform in [1, K / k_small_divisor].
    pub k_small_divisor: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 2000,
            window: 50,
            lr: 5e-5,
            late_phase_fraction: 0.1,
            lambda_distill: 1.0,
            k_small_divisor: 20,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Diffusion,
    Regression,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("teacher/student mismatch: {0}")]
    Mismatch(String),
}

/// One training sequence: ground-truth motion, rendered observations, and
/// whole-body exemplar poses for identity conditioning.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub motion: MotionSequence,
    pub obs: Vec<FrameObservation>,
    /// [num_exemplars, 47 * 3] flattened keypoints.
    pub exemplars: Vec<f64>,
    pub num_exemplars: usize,
}

/// Generates one synthetic identity's sequence: motion, stereo observations,
/// and exemplar poses drawn from an independent clip of the same identity.
pub fn synth_sequence(
    skel: &WholeBodySkeleton,
    rig: &StereoRig,
    id_name: &str,
    seed: u64,
    frames: usize,
    fps: f64,
    num_exemplars: usize,
) -> TrainSequence {
    let identity = sample_identity(id_name, seed, skel);
    let motion = generate_motion(skel, &identity, seed.wrapping_add(1), frames, fps);
    let obs = render_observation(skel, &motion, rig, seed.wrapping_add(2));
    let ex_len = (2 * num_exemplars).max(2);
    let ex_motion = generate_motion(skel, &identity, seed.wrapping_add(3), ex_len, fps);
    let mut exemplars = Vec::with_capacity(num_exemplars * NUM_JOINTS * 3);
    for i in 0..num_exemplars {
        let t = i * (ex_motion.len() - 1) / num_exemplars.max(1);
        exemplars.extend_from_slice(ex_motion.frame(t));
    }
    TrainSequence { motion, obs, exemplars, num_exemplars }
}

/// A multi-identity synthetic dataset, deterministic in `seed`.
pub fn synth_dataset(
    skel: &WholeBodySkeleton,
    rig: &StereoRig,
    num_identities: usize,
    frames: usize,
    fps: f64,
    num_exemplars: usize,
    seed: u64,
) -> Vec<TrainSequence> {
    (0..num_identities)
        .map(|i| {
            synth_sequence(
                skel,
                rig,
                &format!("id{}", i),
                seed.wrapping_add(1000 * i as u64),
                frames,
                fps,
                num_exemplars,
            )
        })
        .collect()
}

/// Ground-truth targets for one specialist over frames [t0, t1): body and
/// whole parts are absolute keypoints, hands are wrist-relative.
pub fn part_targets(part: Part, skel: &WholeBodySkeleton, motion: &MotionSequence, t0: usize, t1: usize) -> Vec<f64> {
    let mut out = Vec::new();
    match part {
        Part::Body => {
            for t in t0..t1 {
                out.extend_from_slice(&motion.frame(t)[..NUM_BODY * 3]);
            }
        }
        Part::Whole => {
            for t in t0..t1 {
                out.extend_from_slice(motion.frame(t));
            }
        }
        Part::Hand => {
            let lw = skel.joint_index("l_wrist").expect("l_wrist");
            let rw = skel.joint_index("r_wrist").expect("r_wrist");
            for t in t0..t1 {
                let row = motion.frame(t);
                for (hand, w) in [(&skel.left_hand, lw), (&skel.right_hand, rw)] {
                    for &j in hand.iter() {
                        for c in 0..3 {
                            out.push(row[j * 3 + c] - row[w * 3 + c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fit the standardization used by the diffusion chain: per-axis mean and a
/// single isotropic standard deviation over every target coordinate in the
/// dataset. Isotropic scale keeps the noise schedule's SNR uniform across axes
/// while still centering each axis (the vertical axis has a large offset).
pub fn fit_target_norm(part: Part, skel: &WholeBodySkeleton, dataset: &[TrainSequence]) -> TargetNorm {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    let mut all = Vec::new();
    for seq in dataset {
        let vals = part_targets(part, skel, &seq.motion, 0, seq.motion.len());
        for (i, v) in vals.iter().enumerate() {
            sum[i % 3] += v;
        }
        count += vals.len() / 3;
        all.extend(vals);
    }
    let mean = [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64];
    let var = all
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = v - mean[i % 3];
            d * d
        })
        .sum::<f64>()
        / all.len() as f64;
    TargetNorm { mean, std: var.sqrt().max(1e-6) }
}

/// Ground-truth upper-body conditioning rows [t1 - t0, 21].
pub fn upper_rows(skel: &WholeBodySkeleton, motion: &MotionSequence, t0: usize, t1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((t1 - t0) * NUM_UPPER * 3);
    for t in t0..t1 {
        let row = motion.frame(t);
        for &u in &skel.upper_body {
            out.extend_from_slice(&row[u * 3..u * 3 + 3]);
        }
    }
    out
}

/// Token positions of the foot keypoints within a specialist's output.
pub fn foot_tokens(den: &Denoiser, skel: &WholeBodySkeleton) -> Vec<usize> {
    let feet = [skel.joint_index("l_ankle"), skel.joint_index("r_ankle")];
    den.joint_ids
        .iter()
        .enumerate()
        .filter(|(_, j)| feet.contains(&Some(**j)))
        .map(|(i, _)| i)
        .collect()
}

/// Loss terms of one training step.
pub struct LossBreakdown {
    pub total: Value,
    pub simple: f64,
    pub vel: f64,
    pub foot: f64,
    pub frame: f64,
    /// False when T < 2: velocity terms are structurally zero.
    pub velocity_valid: bool,
}

/// Eq. S1 training loss:
/// L = L_simple + lambda_vel L_vel + lambda_foot L_foot + lambda_frame L_frame.
///
/// L_simple / L_frame are MSEs of the prediction and the per-frame auxiliary
/// against ground truth; L_vel is the MSE of frame differences; L_foot is
/// the mean squared horizontal per-frame displacement (m/frame) of predicted
/// foot keypoints over frames where the ground-truth foot is in contact
/// (height < 5 cm, speed < 0.05 m/s).
pub fn total_loss(
    g: &Graph,
    x0_hat: &Value,
    frame_aux: &Value,
    x0_true: &[f64],
    fps: f64,
    weights: &LossWeights,
    foot: &[usize],
) -> LossBreakdown {
    let shape = x0_hat.shape();
    assert_eq!(shape.len(), 2, "total_loss: expected [T, N*3], got {:?}", shape);
    assert_eq!(frame_aux.shape(), shape, "total_loss: frame_aux shape {:?} != {:?}", frame_aux.shape(), shape);
    let (t, w) = (shape[0], shape[1]);
    assert_eq!(x0_true.len(), t * w, "total_loss: ground truth length {} != {}", x0_true.len(), t * w);
    let truth = g.constant(&[t, w], x0_true);
    let l_simple = x0_hat.sub(&truth).sqr().mean();
    let l_frame = frame_aux.sub(&truth).sqr().mean();
    let velocity_valid = t >= 2;
    let (l_vel, l_foot) = if velocity_valid {
        let pd = x0_hat.slice(0, 1, t - 1).sub(&x0_hat.slice(0, 0, t - 1));
        let mut td = vec![0.0; (t - 1) * w];
        for ti in 0..t - 1 {
            for c in 0..w {
                td[ti * w + c] = x0_true[(ti + 1) * w + c] - x0_true[ti * w + c];
            }
        }
        let l_vel = pd.sub(&g.constant(&[t - 1, w], &td)).sqr().mean();
        // ground-truth contact mask over prediction differences
        let mut mask = vec![0.0; (t - 1) * w];
        let mut pairs = 0usize;
        for &f in foot {
            for ti in 1..t {
                let z = x0_true[ti * w + f * 3 + 2];
                let dx = x0_true[ti * w + f * 3] - x0_true[(ti - 1) * w + f * 3];
                let dy = x0_true[ti * w + f * 3 + 1] - x0_true[(ti - 1) * w + f * 3 + 1];
                let speed = (dx * dx + dy * dy).sqrt() * fps;
                if z < CONTACT_HEIGHT && speed < CONTACT_SPEED {
                    mask[(ti - 1) * w + f * 3] = 1.0;
                    mask[(ti - 1) * w + f * 3 + 1] = 1.0;
                    pairs += 1;
                }
            }
        }
        let l_foot = if pairs > 0 {
            pd.sqr().mul(&g.constant(&[t - 1, w], &mask)).sum().scale(1.0 / pairs as f64)
        } else {
            g.scalar(0.0)
        };
        (l_vel, l_foot)
    } else {
        (g.scalar(0.0), g.scalar(0.0))
    };
    let total = l_simple
        .add(&l_vel.scale(weights.lambda_vel))
        .add(&l_foot.scale(weights.lambda_foot))
        .add(&l_frame.scale(weights.lambda_frame));
    LossBreakdown {
        simple: l_simple.item(),
        vel: l_vel.item(),
        foot: l_foot.item(),
        frame: l_frame.item(),
        total,
        velocity_valid,
    }
}

/// One logged point of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub simple: f64,
    pub vel: f64,
    pub foot: f64,
    pub frame: f64,
    pub distill: f64,
}

struct StepInputs<'a> {
    seq: &'a TrainSequence,
    t0: usize,
    t1: usize,
    x0: Vec<f64>,
}

fn sample_window<'a>(
    rng: &mut ChaCha8Rng,
    den: &Denoiser,
    skel: &WholeBodySkeleton,
    dataset: &'a [TrainSequence],
    window: usize,
) -> StepInputs<'a> {
    let seq = &dataset[rng.gen_range(0..dataset.len())];
    let t_len = window.min(seq.motion.len());
    let t0 = rng.gen_range(0..=seq.motion.len() - t_len);
    let t1 = t0 + t_len;
    let x0 = part_targets(den.cfg.part, skel, &seq.motion, t0, t1);
    StepInputs { seq, t0, t1, x0 }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One conditioned forward pass on a training window; returns the denoiser
/// outputs on the given graph.
fn forward_window(
    den: &Denoiser,
    skel: &WholeBodySkeleton,
    g: &Graph,
    inp: &StepInputs<'_>,
    x_k: &[f64],
    k: usize,
) -> crate::denoiser::DenoiseOutput {
    let t = inp.t1 - inp.t0;
    let n = den.joint_ids.len();
    let diffused = g.constant(&[t, n * 3], x_k);
    let obs = &inp.seq.obs[inp.t0..inp.t1];
    let upper = den
        .cfg
        .condition_upper_body
        .then(|| g.constant(&[t, NUM_UPPER * 3], &upper_rows(skel, &inp.seq.motion, inp.t0, inp.t1)));
    let f_ex = den.cfg.identity_conditioning.then(|| {
        let ex = g.constant(&[inp.seq.num_exemplars, NUM_JOINTS * 3], &inp.seq.exemplars);
        den.encode_identity(g, &ex)
    });
    den.denoise(g, &diffused, obs, k, upper.as_ref(), f_ex.as_ref())
}

/// DDPM training loop for one specialist (or the regression variant).
/// Deterministic in (initial weights, dataset, config, precision).
pub fn train_teacher(
    den: &Denoiser,
    skel: &WholeBodySkeleton,
    dataset: &[TrainSequence],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mode: TrainMode,
    precision: Precision,
) -> Result<Vec<LossRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let fps = dataset[0].motion.fps;
    let feet = foot_tokens(den, skel);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&den.params, cfg.lr);
    let late_from = ((1.0 - cfg.late_phase_fraction) * cfg.steps as f64).ceil() as usize;
    if mode == TrainMode::Diffusion {
        // the diffusion chain runs in the standardized target space
        den.set_target_norm(fit_target_norm(den.cfg.part, skel, dataset));
    }
    let norm = den.target_norm();
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let inp = sample_window(&mut rng, den, skel, dataset, cfg.window);
        let (x_k, k) = match mode {
            TrainMode::Diffusion => {
                let k = rng.gen_range(1..=sched.k_max);
                let eps = randn(&mut rng, inp.x0.len());
                (diffuse_forward(&norm.normalize(&inp.x0), k, &eps, sched), k)
            }
            TrainMode::Regression => (vec![0.0; inp.x0.len()], sched.k_max),
        };
        let weights = if step >= late_from { LossWeights::late() } else { LossWeights::early() };
        let g = Graph::new(precision);
        let out = forward_window(den, skel, &g, &inp, &x_k, k);
        let loss = total_loss(&g, &out.x0_hat, &out.frame_aux, &inp.x0, fps, &weights, &feet);
        let total = loss.total.item();
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        den.params.zero_grad();
        loss.total.backward();
        opt.step(&den.params);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(LossRecord {
                step,
                total,
                simple: loss.simple,
                vel: loss.vel,
                foot: loss.foot,
                frame: loss.frame,
                distill: 0.0,
            });
        }
    }
    Ok(curve)
}

/// SDS distillation of a one-step student against a frozen teacher (Eq. 5):
/// the student predicts x0 from the top-timestep noise; its prediction is
/// forward-diffused by a small k and reconstructed by the teacher, which is
/// treated as a constant target — no gradient flows into the teacher.
pub fn sds_distill(
    teacher: &Denoiser,
    student: &Denoiser,
    skel: &WholeBodySkeleton,
    dataset: &[TrainSequence],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    precision: Precision,
) -> Result<Vec<LossRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if teacher.cfg.part != student.cfg.part {
        return Err(TrainError::Mismatch("teacher and student cover different parts".into()));
    }
    if teacher.cfg.condition_upper_body != student.cfg.condition_upper_body
        || teacher.cfg.identity_conditioning != student.cfg.identity_conditioning
    {
        return Err(TrainError::Mismatch("teacher and student conditioning flags differ".into()));
    }
    let fps = dataset[0].motion.fps;
    let feet = foot_tokens(student, skel);
    let k_small_max = (sched.k_max / cfg.k_small_divisor).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&student.params, cfg.lr);
    // the student inherits the teacher's target standardization
    let norm = teacher.target_norm();
    student.set_target_norm(norm);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let inp = sample_window(&mut rng, student, skel, dataset, cfg.window);
        let eps = randn(&mut rng, inp.x0.len());
        let x_top = diffuse_forward(&norm.normalize(&inp.x0), sched.k_max, &eps, sched);
        let g = Graph::new(precision);
        let out = forward_window(student, skel, &g, &inp, &x_top, sched.k_max);
        let base = total_loss(&g, &out.x0_hat, &out.frame_aux, &inp.x0, fps, &LossWeights::early(), &feet);
        // constant teacher target from the noised student prediction
        let k_small = rng.gen_range(1..=k_small_max);
        let eps2 = randn(&mut rng, inp.x0.len());
        let x_ks = diffuse_forward(&norm.normalize(&out.x0_hat.values()), k_small, &eps2, sched);
        let gt = Graph::new(precision);
        gt.set_grad_enabled(false);
        let target = forward_window(teacher, skel, &gt, &inp, &x_ks, k_small).x0_hat.values();
        let t_len = inp.t1 - inp.t0;
        let w = inp.x0.len() / t_len;
        let l_distill = out.x0_hat.sub(&g.constant(&[t_len, w], &target)).sqr().mean();
        let loss = base.total.add(&l_distill.scale(cfg.lambda_distill));
        let total = loss.item();
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        student.params.zero_grad();
        loss.backward();
        opt.step(&student.params);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(LossRecord {
                step,
                total,
                simple: base.simple,
                vel: base.vel,
                foot: base.foot,
                frame: base.frame,
                distill: l_distill.item(),
            });
        }
    }
    Ok(curve)
}
