//! Causal streaming whole-body motion estimation from egocentric observations.
//!
//! The pipeline estimates 3D whole-body keypoint motion from head-mounted
//! stereo camera poses and noisy 2D keypoint observations: a cascaded
//! body-then-hand denoising diffusion model built on a causal windowed
//! relative-temporal transformer, distilled into a one-step student for
//! real-time streaming inference, optionally conditioned on an
//! exemplar-based identity prior.

pub mod artifacts;
pub mod attention;
pub mod cascade;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod identity;
pub mod observe;
pub mod skeleton;
pub mod tensor;
pub mod train;
