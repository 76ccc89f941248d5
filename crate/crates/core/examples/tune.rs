//! Scratch calibration runs for the acceptance-suite hyperparameters.

use egomotion::cascade::{EstimatorMode, WholeBodyEstimator};
use egomotion::denoiser::{Denoiser, DenoiserConfig, Part, Role};
use egomotion::diffusion::DiffusionSchedule;
use egomotion::eval::evaluate_estimator;
use egomotion::observe::StereoRig;
use egomotion::skeleton::WholeBodySkeleton;
use egomotion::tensor::Precision;
use egomotion::train::{sds_distill, synth_dataset, train_teacher, TrainConfig, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const FPS: f64 = 30.0;

fn cfgd(part: Part, d: usize, tl: usize) -> DenoiserConfig {
    DenoiserConfig {
        d_model: d,
        frame_blocks: 1,
        temporal_layers: tl,
        heads: 2,
        ws: 4,
        identity_conditioning: false,
        ..DenoiserConfig::teacher(part)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6000);
    let d: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let late: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let distill_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2000);
    eprintln!("steps={} d={} late={} distill={}", steps, d, late, distill_steps);
    let skel = WholeBodySkeleton::default_whole_body();
    let sched = DiffusionSchedule::default();
    let rig = StereoRig::default();
    let train_ds = synth_dataset(&skel, &rig, 6, 80, FPS, 10, 500);
    let test_ds = synth_dataset(&skel, &rig, 3, 40, FPS, 10, 900);

    let tc = |window: usize, seed: u64, n: usize, lf: f64| TrainConfig {
        steps: n,
        window,
        lr: 3e-4,
        late_phase_fraction: lf,
        log_every: n / 4,
        seed,
        ..Default::default()
    };
    let new = |cfg: DenoiserConfig, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Denoiser::new(cfg, &skel, &mut rng).unwrap()
    };

    let t0 = Instant::now();
    let tb = new(cfgd(Part::Body, d, 2), 1000);
    train_teacher(&tb, &skel, &train_ds, &sched, &tc(50, 100, steps, late), TrainMode::Diffusion, Precision::F32).unwrap();
    eprintln!("tb done {:.0}s", t0.elapsed().as_secs_f64());

    let rb = new(cfgd(Part::Body, d, 2), 2000);
    train_teacher(&rb, &skel, &train_ds, &sched, &tc(24, 200, steps, late), TrainMode::Regression, Precision::F32).unwrap();

    let rb0 = new(cfgd(Part::Body, d, 2), 2000);
    train_teacher(&rb0, &skel, &train_ds, &sched, &tc(24, 200, steps, 0.0), TrainMode::Regression, Precision::F32).unwrap();
    eprintln!("rb done {:.0}s", t0.elapsed().as_secs_f64());

    let mut hc_cfg = cfgd(Part::Hand, d, 2);
    hc_cfg.condition_upper_body = true;
    let hc = new(hc_cfg, 3000);
    train_teacher(&hc, &skel, &train_ds, &sched, &tc(24, 300, steps, late), TrainMode::Diffusion, Precision::F32).unwrap();

    let mut hs_cfg = cfgd(Part::Hand, d, 2);
    hs_cfg.condition_upper_body = false;
    let hs = new(hs_cfg, 4000);
    train_teacher(&hs, &skel, &train_ds, &sched, &tc(24, 400, steps, late), TrainMode::Diffusion, Precision::F32).unwrap();

    let wh = new(cfgd(Part::Whole, d, 2), 5000);
    train_teacher(&wh, &skel, &train_ds, &sched, &tc(24, 500, steps, late), TrainMode::Diffusion, Precision::F32).unwrap();
    eprintln!("hands+whole done {:.0}s", t0.elapsed().as_secs_f64());

    let stu_cfg = DenoiserConfig {
        d_model: 16,
        frame_blocks: 1,
        temporal_layers: 1,
        heads: 2,
        ws: 4,
        identity_conditioning: false,
        role: Role::Student,
        ..DenoiserConfig::student(Part::Body)
    };
    let sp = new(stu_cfg.clone(), 6000);
    train_teacher(&sp, &skel, &train_ds, &sched, &tc(24, 600, steps, late), TrainMode::Diffusion, Precision::F32).unwrap();
    let sd = new(stu_cfg, 7000);
    sds_distill(&tb, &sd, &skel, &train_ds, &sched, &tc(24, 700, distill_steps, late), Precision::F32).unwrap();
    eprintln!("students done {:.0}s", t0.elapsed().as_secs_f64());

    let est = |mode, body: &Denoiser, hand: Option<&Denoiser>, steps| {
        WholeBodyEstimator::new(mode, body.clone(), hand.cloned(), sched.clone(), steps, steps, skel.clone(), FPS).unwrap()
    };
    for ddim in [1usize, 2, 3, 5, 10] {
        let r = evaluate_estimator(&est(EstimatorMode::Cascaded, &tb, Some(&hc), ddim), &test_ds, &[7], 2, "t");
        println!("teacher ddim={:2}   body {:6.1}  hand {:6.1}", ddim, r.body_mpjpe, r.hand_mpjpe);
    }
    let r = evaluate_estimator(&est(EstimatorMode::Regression, &rb, Some(&hc), 1), &test_ds, &[7], 1, "r");
    println!("regression        body {:6.1}  hand {:6.1}", r.body_mpjpe, r.hand_mpjpe);
    let r = evaluate_estimator(&est(EstimatorMode::Regression, &rb0, Some(&hc), 1), &test_ds, &[7], 1, "r0");
    println!("regression late0  body {:6.1}  hand {:6.1}", r.body_mpjpe, r.hand_mpjpe);
    for ddim in [2usize, 10] {
        let r = evaluate_estimator(&est(EstimatorMode::Separate, &tb, Some(&hs), ddim), &test_ds, &[7], 2, "s");
        println!("separate ddim={:2}  body {:6.1}  hand {:6.1}", ddim, r.body_mpjpe, r.hand_mpjpe);
        let r = evaluate_estimator(&est(EstimatorMode::ParallelJoint, &wh, None, ddim), &test_ds, &[7], 2, "p");
        println!("parallel ddim={:2}  body {:6.1}  hand {:6.1}", ddim, r.body_mpjpe, r.hand_mpjpe);
    }
    let r = evaluate_estimator(&est(EstimatorMode::Cascaded, &sp, Some(&hc), 1), &test_ds, &[7], 2, "sp");
    println!("plain student     body {:6.1}  hand {:6.1}", r.body_mpjpe, r.hand_mpjpe);
    let r = evaluate_estimator(&est(EstimatorMode::Cascaded, &sd, Some(&hc), 1), &test_ds, &[7], 2, "sd");
    println!("distilled student body {:6.1}  hand {:6.1}", r.body_mpjpe, r.hand_mpjpe);
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
