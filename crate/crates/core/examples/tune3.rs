//! Target-statistics probe.

use egomotion::denoiser::Part;
use egomotion::observe::StereoRig;
use egomotion::skeleton::WholeBodySkeleton;
use egomotion::train::{part_targets, synth_dataset};

fn stats(name: &str, vals: &[f64]) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{:6}  mean {:8.4}  std {:8.4}  min {:8.3}  max {:8.3}", name, mean, var.sqrt(), min, max);
}

fn main() {
    let skel = WholeBodySkeleton::default_whole_body();
    let ds = synth_dataset(&skel, &StereoRig::default(), 6, 80, 30.0, 10, 500);
    for part in [Part::Body, Part::Hand, Part::Whole] {
        let mut all = Vec::new();
        for seq in &ds {
            all.extend(part_targets(part, &skel, &seq.motion, 0, seq.motion.len()));
        }
        stats(&format!("{:?}", part), &all);
        // per-axis
        for (ai, axis) in ["x", "y", "z"].iter().enumerate() {
            let vals: Vec<f64> = all.iter().skip(ai).step_by(3).cloned().collect();
            stats(&format!("{:?}.{}", part, axis), &vals);
        }
    }
}
