//! DDPM forward process, noise schedules, and deterministic DDIM sampling
//! with an x0-parameterized denoiser.

use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_K: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    CosineAlphaBar,
}

/// Noise schedule over timesteps 1..=K, with the convention alpha_bar(0) = 1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub k_max: usize,
    /// beta_k for k = 1..=K (index k - 1).
    pub beta: Vec<f64>,
    /// alpha_bar_k for k = 0..=K (index k); alpha_bar[0] = 1.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear-in-beta schedule between the two endpoints (the default).
    pub fn linear_beta(k_max: usize, beta_1: f64, beta_k: f64) -> DiffusionSchedule {
        assert!(k_max >= 1, "schedule needs at least one step");
        let beta: Vec<f64> = (0..k_max)
            .map(|i| {
                if k_max == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_k - beta_1) * i as f64 / (k_max - 1) as f64
                }
            })
            .collect();
        DiffusionSchedule::from_betas(ScheduleKind::LinearBeta, beta)
    }

    /// Cosine alpha-bar schedule (offset s = 0.008, betas clipped at 0.999).
    pub fn cosine_alpha_bar(k_max: usize) -> DiffusionSchedule {
        assert!(k_max >= 1, "schedule needs at least one step");
        let s = 0.008;
        let f = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(k_max);
        let mut prev = 1.0;
        for k in 1..=k_max {
            let ab = f(k as f64 / k_max as f64) / f0;
            let b = (1.0 - ab / prev).clamp(1e-8, 0.999);
            beta.push(b);
            prev *= 1.0 - b;
        }
        DiffusionSchedule::from_betas(ScheduleKind::CosineAlphaBar, beta)
    }

    pub fn from_kind(kind: ScheduleKind, k_max: usize, beta_1: f64, beta_k: f64) -> DiffusionSchedule {
        match kind {
            ScheduleKind::LinearBeta => DiffusionSchedule::linear_beta(k_max, beta_1, beta_k),
            ScheduleKind::CosineAlphaBar => DiffusionSchedule::cosine_alpha_bar(k_max),
        }
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> DiffusionSchedule {
        let k_max = beta.len();
        let mut alpha_bar = Vec::with_capacity(k_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &b in &beta {
            assert!(b > 0.0 && b < 1.0, "beta {} outside (0, 1)", b);
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let sched = DiffusionSchedule {
            kind,
            k_max,
            beta,
            alpha_bar,
        };
        for k in 1..=k_max {
            assert!(
                sched.alpha_bar[k] < sched.alpha_bar[k - 1],
                "alpha_bar not strictly decreasing at k = {}",
                k
            );
        }
        sched
    }

    /// alpha_bar_k, defined for k = 0..=K with alpha_bar_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        assert!(k <= self.k_max, "timestep {} out of range 0..={}", k, self.k_max);
        self.alpha_bar[k]
    }
}

impl Default for DiffusionSchedule {
    fn default() -> DiffusionSchedule {
        DiffusionSchedule::linear_beta(DEFAULT_K, DEFAULT_BETA_1, DEFAULT_BETA_K)
    }
}

/// DDPM forward process: x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps.
pub fn diffuse_forward(x0: &[f64], k: usize, eps: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    assert_eq!(x0.len(), eps.len(), "x0 and eps length mismatch");
    let ab = sched.alpha_bar(k);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()
}

/// One deterministic DDIM step (eta = 0) from timestep k to k_prev using the
/// denoiser's clean-signal estimate x0_hat.
pub fn ddim_step(x_k: &[f64], x0_hat: &[f64], k: usize, k_prev: usize, sched: &DiffusionSchedule) -> Vec<f64> {
    assert!(k_prev < k && k <= sched.k_max, "ddim_step: need 0 <= k_prev < k <= K, got {} -> {}", k, k_prev);
    assert_eq!(x_k.len(), x0_hat.len(), "x_k and x0_hat length mismatch");
    let ab_k = sched.alpha_bar(k);
    let ab_p = sched.alpha_bar(k_prev);
    let (sa_k, sb_k) = (ab_k.sqrt(), (1.0 - ab_k).sqrt());
    let (sa_p, sb_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    x_k.iter()
        .zip(x0_hat)
        .map(|(xk, x0)| {
            let eps_hat = (xk - sa_k * x0) / sb_k;
            sa_p * x0 + sb_p * eps_hat
        })
        .collect()
}

/// Evenly spaced (k, k_prev) pairs from K down to 0 for a `steps`-step chain.
pub fn timestep_grid(k_max: usize, steps: usize) -> Vec<(usize, usize)> {
    assert!(steps >= 1 && steps <= k_max, "steps {} outside 1..={}", steps, k_max);
    let at = |i: usize| k_max * (steps - i) / steps;
    (0..steps).map(|i| (at(i), at(i + 1))).collect()
}

/// Unit Gaussian noise for one frame, drawn from a counter-based stream so a
/// frame's noise does not depend on sequence length or position of use.
pub fn frame_noise(seed: u64, frame: usize, frame_size: usize) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    (0..frame_size).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// DDIM sampling: starts from seeded unit Gaussian noise of shape
/// [frames, frame_size] and iterates denoise / ddim_step down the timestep
/// grid. `denoise(x_k, k)` returns the x0 estimate. Deterministic given
/// (seed, denoiser, schedule).
pub fn sample(
    sched: &DiffusionSchedule,
    frames: usize,
    frame_size: usize,
    steps: usize,
    seed: u64,
    mut denoise: impl FnMut(&[f64], usize) -> Vec<f64>,
) -> Vec<f64> {
    let mut x: Vec<f64> = Vec::with_capacity(frames * frame_size);
    for f in 0..frames {
        x.extend(frame_noise(seed, f, frame_size));
    }
    for (k, k_prev) in timestep_grid(sched.k_max, steps) {
        let x0_hat = denoise(&x, k);
        assert_eq!(x0_hat.len(), x.len(), "denoiser changed tensor size at step k = {}", k);
        assert!(
            x0_hat.iter().all(|v| v.is_finite()),
            "non-finite denoiser output at step k = {}",
            k
        );
        x = if k_prev == 0 {
            x0_hat
        } else {
            ddim_step(&x, &x0_hat, k, k_prev, sched)
        };
    }
    x
}
