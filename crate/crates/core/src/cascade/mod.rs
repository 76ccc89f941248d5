//! Whole-body estimation by cascaded sampling: sample body motion, slice
//! the upper body, sample hand motion conditioned on it, and assemble the
//! 47-joint output. Includes the streaming single-step engine and the
//! ablation variants (parallel-joint, separate, regression).

use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserStream, Part, Role};
use crate::diffusion::{frame_noise, sample, DiffusionSchedule};
use crate::identity::{IdentityPrior, D_ID};
use crate::observe::FrameObservation;
use crate::skeleton::{MotionSequence, WholeBodySkeleton, NUM_BODY, NUM_HAND, NUM_JOINTS, NUM_UPPER};
use crate::tensor::{Graph, Precision};

/// Salt XORed into the seed for the hand sampler so body and hand draw
/// independent per-frame noise.
pub const HAND_SEED_SALT: u64 = 0x68616e64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Body first, hands conditioned on the predicted upper body (Eq. 3).
    Cascaded,
    /// One joint model over all 47 joints.
    ParallelJoint,
    /// Hand model without upper-body conditioning.
    Separate,
    /// Single forward pass, zeros in place of noise, fixed timestep.
    Regression,
}

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("mode/denoiser mismatch: {0}")]
    ModeMismatch(String),
    #[error("denoiser wants identity conditioning but no identity was given")]
    MissingIdentity,
    #[error("streaming requires a single-step student estimator")]
    StreamingNeedsStudent,
    #[error("empty observation sequence")]
    EmptyObservations,
}

pub struct WholeBodyEstimator {
    pub mode: EstimatorMode,
    pub body: Denoiser,
    pub hand: Option<Denoiser>,
    pub schedule: DiffusionSchedule,
    pub body_steps: usize,
    pub hand_steps: usize,
    pub skel: WholeBodySkeleton,
    pub fps: f64,
}

impl WholeBodyEstimator {
    pub fn new(
        mode: EstimatorMode,
        body: Denoiser,
        hand: Option<Denoiser>,
        schedule: DiffusionSchedule,
        body_steps: usize,
        hand_steps: usize,
        skel: WholeBodySkeleton,
        fps: f64,
    ) -> Result<WholeBodyEstimator, CascadeError> {
        let bad = |msg: &str| Err(CascadeError::ModeMismatch(msg.into()));
        match mode {
            EstimatorMode::ParallelJoint => {
                if body.cfg.part != Part::Whole {
                    return bad("parallel-joint mode needs a whole-body (47 joint) denoiser");
                }
                if hand.is_some() {
                    return bad("parallel-joint mode takes no hand denoiser");
                }
            }
            EstimatorMode::Cascaded | EstimatorMode::Separate | EstimatorMode::Regression => {
                if body.cfg.part != Part::Body {
                    return bad("body denoiser must cover the body part");
                }
                let h = match &hand {
                    Some(h) => h,
                    None => return bad("this mode needs a hand denoiser"),
                };
                if h.cfg.part != Part::Hand {
                    return bad("hand denoiser must cover the hand part");
                }
                match mode {
                    EstimatorMode::Cascaded if !h.cfg.condition_upper_body => {
                        return bad("cascaded mode needs a hand denoiser with upper-body conditioning")
                    }
                    EstimatorMode::Separate if h.cfg.condition_upper_body => {
                        return bad("separate mode needs a hand denoiser without upper-body conditioning")
                    }
                    _ => {}
                }
            }
        }
        if body_steps == 0 || hand_steps == 0 {
            return Err(CascadeError::ModeMismatch("steps must be >= 1".into()));
        }
        Ok(WholeBodyEstimator {
            mode,
            body,
            hand,
            schedule,
            body_steps,
            hand_steps,
            skel,
            fps,
        })
    }

    fn identity_feature(den: &Denoiser, identity: Option<&IdentityPrior>) -> Result<Option<Vec<f64>>, CascadeError> {
        if !den.cfg.identity_conditioning {
            return Ok(None);
        }
        match identity {
            Some(p) => {
                let g = Graph::new(Precision::F32);
                g.set_grad_enabled(false);
                let ex = g.constant(&[p.num_exemplars, p.num_joints * 3], &p.exemplars);
                Ok(Some(den.encode_identity(&g, &ex).values()))
            }
            None => Err(CascadeError::MissingIdentity),
        }
    }

    /// One full-sequence denoiser evaluation at 32-bit inference precision.
    fn run_denoiser(
        den: &Denoiser,
        obs: &[FrameObservation],
        x_k: &[f64],
        k: usize,
        upper: Option<&[f64]>,
        f_ex: Option<&[f64]>,
    ) -> Vec<f64> {
        let g = Graph::new(Precision::F32);
        g.set_grad_enabled(false);
        let t = obs.len();
        let n = den.joint_ids.len();
        let d = g.constant(&[t, n * 3], x_k);
        let u = upper.map(|u| g.constant(&[t, NUM_UPPER * 3], u));
        let idv = f_ex.map(|f| g.constant(&[1, D_ID], f));
        den.denoise(&g, &d, obs, k, u.as_ref(), idv.as_ref()).x0_hat.values()
    }

    fn sample_part(
        &self,
        den: &Denoiser,
        obs: &[FrameObservation],
        steps: usize,
        seed: u64,
        upper: Option<&[f64]>,
        f_ex: Option<&[f64]>,
    ) -> Vec<f64> {
        let t = obs.len();
        let n = den.joint_ids.len();
        if self.mode == EstimatorMode::Regression {
            // no diffusion: a single pass on zeros at the top timestep
            let zeros = vec![0.0; t * n * 3];
            return Self::run_denoiser(den, obs, &zeros, self.schedule.k_max, upper, f_ex);
        }
        sample(&self.schedule, t, n * 3, steps, seed, |x_k, k| {
            Self::run_denoiser(den, obs, x_k, k, upper, f_ex)
        })
    }

    /// Upper-body conditioning rows sliced from a body prediction:
    /// [T, 17*3] -> [T, 21] in skeleton upper-body order.
    pub fn upper_from_body(skel: &WholeBodySkeleton, body_x0: &[f64], t: usize) -> Vec<f64> {
        assert_eq!(body_x0.len(), t * NUM_BODY * 3);
        let mut out = Vec::with_capacity(t * NUM_UPPER * 3);
        for ti in 0..t {
            let row = &body_x0[ti * NUM_BODY * 3..(ti + 1) * NUM_BODY * 3];
            for &u in &skel.upper_body {
                assert!(u < NUM_BODY, "upper-body joint {} outside the body part", u);
                out.extend_from_slice(&row[u * 3..u * 3 + 3]);
            }
        }
        out
    }

    /// Assembles one whole-body frame from a body row and a wrist-relative
    /// hand row. Hand joints attach at the predicted body wrists, so each
    /// hand chain's root coincides with its wrist by construction.
    pub fn assemble_frame(skel: &WholeBodySkeleton, body_row: &[f64], hand_row: &[f64]) -> Vec<f64> {
        assert_eq!(body_row.len(), NUM_BODY * 3);
        assert_eq!(hand_row.len(), 2 * NUM_HAND * 3);
        let lw = skel.joint_index("l_wrist").expect("l_wrist");
        let rw = skel.joint_index("r_wrist").expect("r_wrist");
        let mut out = Vec::with_capacity(NUM_JOINTS * 3);
        out.extend_from_slice(body_row);
        for h in 0..2 * NUM_HAND {
            let w = if h < NUM_HAND { lw } else { rw };
            for c in 0..3 {
                out.push(body_row[w * 3 + c] + hand_row[h * 3 + c]);
            }
        }
        out
    }

    /// Offline whole-body estimate over a full observation sequence.
    /// Deterministic in (weights, obs, seed, identity); never reads future
    /// observations for any output row.
    pub fn estimate(
        &self,
        obs: &[FrameObservation],
        seed: u64,
        identity: Option<&IdentityPrior>,
    ) -> Result<MotionSequence, CascadeError> {
        if obs.is_empty() {
            return Err(CascadeError::EmptyObservations);
        }
        let t = obs.len();
        let body_fex = Self::identity_feature(&self.body, identity)?;
        if self.mode == EstimatorMode::ParallelJoint {
            let x0 = self.sample_part(&self.body, obs, self.body_steps, seed, None, body_fex.as_deref());
            return Ok(MotionSequence::from_frames(x0, NUM_JOINTS, self.fps));
        }
        let hand = self.hand.as_ref().expect("validated at construction");
        let hand_fex = Self::identity_feature(hand, identity)?;
        let body_x0 = self.sample_part(&self.body, obs, self.body_steps, seed, None, body_fex.as_deref());
        let upper = hand
            .cfg
            .condition_upper_body
            .then(|| Self::upper_from_body(&self.skel, &body_x0, t));
        let hand_x0 = self.sample_part(
            hand,
            obs,
            self.hand_steps,
            seed ^ HAND_SEED_SALT,
            upper.as_deref(),
            hand_fex.as_deref(),
        );
        let mut frames = Vec::with_capacity(t * NUM_JOINTS * 3);
        for ti in 0..t {
            frames.extend(Self::assemble_frame(
                &self.skel,
                &body_x0[ti * NUM_BODY * 3..(ti + 1) * NUM_BODY * 3],
                &hand_x0[ti * 2 * NUM_HAND * 3..(ti + 1) * 2 * NUM_HAND * 3],
            ));
        }
        Ok(MotionSequence::from_frames(frames, NUM_JOINTS, self.fps))
    }

    /// Starts a streaming session. Requires a single-step student estimator.
    pub fn start_stream(&self, seed: u64, identity: Option<&IdentityPrior>) -> Result<StreamSession<'_>, CascadeError> {
        let single_step = self.body_steps == 1 && self.hand_steps == 1;
        let student = self.body.cfg.role == Role::Student
            && self.hand.as_ref().map_or(true, |h| h.cfg.role == Role::Student);
        if !(single_step && student) {
            return Err(CascadeError::StreamingNeedsStudent);
        }
        let body_fex = Self::identity_feature(&self.body, identity)?;
        let hand_fex = match &self.hand {
            Some(h) => Self::identity_feature(h, identity)?,
            None => None,
        };
        Ok(StreamSession {
            est: self,
            body_stream: self.body.new_stream(),
            hand_stream: self.hand.as_ref().map(|h| h.new_stream()),
            body_fex,
            hand_fex,
            seed,
            t: 0,
        })
    }
}

/// One live estimation stream; push frames in order. Per-frame work is
/// O(ws), independent of how many frames have been seen.
pub struct StreamSession<'a> {
    est: &'a WholeBodyEstimator,
    body_stream: DenoiserStream,
    hand_stream: Option<DenoiserStream>,
    body_fex: Option<Vec<f64>>,
    hand_fex: Option<Vec<f64>>,
    seed: u64,
    t: usize,
}

impl StreamSession<'_> {
    pub fn frames_seen(&self) -> usize {
        self.t
    }

    fn stream_part(
        den: &Denoiser,
        stream: &mut DenoiserStream,
        obs: &FrameObservation,
        noise: &[f64],
        k: usize,
        upper_row: Option<&[f64]>,
        f_ex: Option<&[f64]>,
    ) -> Vec<f64> {
        let g = Graph::new(Precision::F32);
        g.set_grad_enabled(false);
        let n = den.joint_ids.len();
        let d = g.constant(&[1, n * 3], noise);
        let u = upper_row.map(|u| g.constant(&[1, NUM_UPPER * 3], u));
        let idv = f_ex.map(|f| g.constant(&[1, D_ID], f));
        den.stream_denoise(&g, stream, &d, obs, k, u.as_ref(), idv.as_ref()).x0_hat.values()
    }

    /// Processes one observation frame and returns the whole-body pose row
    /// [47 * 3]. Matches the corresponding row of the offline estimate on
    /// the same prefix.
    pub fn push(&mut self, obs: &FrameObservation) -> Vec<f64> {
        let est = self.est;
        let k_top = est.schedule.k_max;
        let regression = est.mode == EstimatorMode::Regression;
        let part_noise = |den: &Denoiser, seed: u64, t: usize| -> Vec<f64> {
            let n = den.joint_ids.len() * 3;
            if regression {
                vec![0.0; n]
            } else {
                frame_noise(seed, t, n)
            }
        };
        let body_noise = part_noise(&est.body, self.seed, self.t);
        let body_row = Self::stream_part(
            &est.body,
            &mut self.body_stream,
            obs,
            &body_noise,
            k_top,
            None,
            self.body_fex.as_deref(),
        );
        let out = match (&est.hand, &mut self.hand_stream) {
            (Some(hand), Some(hs)) => {
                let upper = hand
                    .cfg
                    .condition_upper_body
                    .then(|| WholeBodyEstimator::upper_from_body(&est.skel, &body_row, 1));
                let hand_noise = part_noise(hand, self.seed ^ HAND_SEED_SALT, self.t);
                let hand_row = Self::stream_part(
                    hand,
                    hs,
                    obs,
                    &hand_noise,
                    k_top,
                    upper.as_deref(),
                    self.hand_fex.as_deref(),
                );
                WholeBodyEstimator::assemble_frame(&est.skel, &body_row, &hand_row)
            }
            _ => body_row,
        };
        self.t += 1;
        out
    }
}

#[cfg(test)]
mod tests;
