//! Teacher-vs-regression scaling probe.

use egomotion::cascade::{EstimatorMode, WholeBodyEstimator};
use egomotion::denoiser::{Denoiser, DenoiserConfig, Part};
use egomotion::diffusion::DiffusionSchedule;
use egomotion::eval::evaluate_estimator;
use egomotion::observe::StereoRig;
use egomotion::skeleton::WholeBodySkeleton;
use egomotion::tensor::Precision;
use egomotion::train::{synth_dataset, train_teacher, TrainConfig, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const FPS: f64 = 30.0;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args[1].parse().unwrap();
    let d: usize = args[2].parse().unwrap();
    let late: f64 = args[3].parse().unwrap();
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    eprintln!("steps={} d={} late={} lr={}", steps, d, late, lr);
    let skel = WholeBodySkeleton::default_whole_body();
    let sched = DiffusionSchedule::default();
    let rig = StereoRig::default();
    let train_ds = synth_dataset(&skel, &rig, 6, 80, FPS, 10, 500);
    let test_ds = synth_dataset(&skel, &rig, 3, 40, FPS, 10, 900);

    let cfgd = |part| DenoiserConfig {
        d_model: d,
        frame_blocks: 1,
        temporal_layers: 2,
        heads: 2,
        ws: 4,
        identity_conditioning: false,
        ..DenoiserConfig::teacher(part)
    };
    let tc = |window: usize, seed: u64| TrainConfig {
        steps,
        window,
        lr,
        late_phase_fraction: late,
        log_every: steps / 4,
        seed,
        ..Default::default()
    };
    let new = |cfg: DenoiserConfig, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Denoiser::new(cfg, &skel, &mut rng).unwrap()
    };

    let t0 = Instant::now();
    let tb = new(cfgd(Part::Body), 1000);
    train_teacher(&tb, &skel, &train_ds, &sched, &tc(50, 100), TrainMode::Diffusion, Precision::F32).unwrap();
    eprintln!("tb done {:.0}s", t0.elapsed().as_secs_f64());
    let rb = new(cfgd(Part::Body), 2000);
    train_teacher(&rb, &skel, &train_ds, &sched, &tc(50, 200), TrainMode::Regression, Precision::F32).unwrap();
    eprintln!("rb done {:.0}s", t0.elapsed().as_secs_f64());
    let mut hc_cfg = cfgd(Part::Hand);
    hc_cfg.condition_upper_body = true;
    let hc = new(hc_cfg, 3000);
    // hand model only matters for estimator assembly; keep it cheap
    let mut hc_tc = tc(24, 300);
    hc_tc.steps = 2000;
    hc_tc.log_every = 500;
    train_teacher(&hc, &skel, &train_ds, &sched, &hc_tc, TrainMode::Diffusion, Precision::F32).unwrap();

    let est = |mode, body: &Denoiser, steps| {
        WholeBodyEstimator::new(mode, body.clone(), Some(hc.clone()), sched.clone(), steps, steps, skel.clone(), FPS).unwrap()
    };
    for ddim in [1usize, 2, 3, 5, 10] {
        let r = evaluate_estimator(&est(EstimatorMode::Cascaded, &tb, ddim), &test_ds, &[7], 2, "t");
        println!("teacher ddim={:2}   body {:6.1}", ddim, r.body_mpjpe);
    }
    let r = evaluate_estimator(&est(EstimatorMode::Regression, &rb, 1), &test_ds, &[7], 1, "r");
    println!("regression        body {:6.1}", r.body_mpjpe);
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
