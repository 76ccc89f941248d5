//! Identity registration: fits per-identity bone scales and per-pose joint
//! angles to multi-view 2D observations of static poses by differentiable
//! forward kinematics and reprojection.

use thiserror::Error;

use crate::observe::CameraPose;
use crate::skeleton::WholeBodySkeleton;
use crate::tensor::{AdamW, Graph, Param, ParamSet, Precision, Value};

use super::{IdentityEncoder, IdentityPrior};

/// One synthetic monocular view of a static pose.
#[derive(Debug, Clone)]
pub struct RegView {
    pub camera: CameraPose,
    /// N_J pixel keypoints.
    pub kp2d: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub iters: usize,
    pub lr: f64,
    /// Multiplicative per-iteration rate decay (0.00023 = 0.023%).
    pub lr_decay: f64,
    pub lambda_reg: f64,
    pub lambda_height: f64,
    /// Initial pelvis position guess, world frame.
    pub init_root: [f64; 3],
}

impl Default for RegistrationConfig {
    fn default() -> RegistrationConfig {
        RegistrationConfig {
            iters: 3000,
            lr: 5e-3,
            lr_decay: 0.00023,
            lambda_reg: 300.0,
            lambda_height: 1.0,
            init_root: [0.0, 0.0, 0.9],
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("no poses to register")]
    NoPoses,
    #[error("pose {pose} has {views} views; need at least 2")]
    TooFewViews { pose: usize, views: usize },
    #[error("pose {pose} view {view} has {got} keypoints, skeleton has {want}")]
    BadKeypointCount { pose: usize, view: usize, got: usize, want: usize },
    #[error("optimization diverged at iteration {iter}")]
    Diverged { iter: usize },
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Fitted per-joint bone scales.
    pub bone_scales: Vec<f64>,
    /// Fitted world keypoints per pose, each [N_J * 3].
    pub poses: Vec<Vec<f64>>,
    pub final_loss: f64,
    pub prior: IdentityPrior,
}

/// Rodrigues rotation from an axis-angle row vector [1, 3].
fn rodrigues(g: &Graph, aa: &Value) -> Value {
    let t2 = aa.sqr().sum_axis(1).reshape(&[1, 1]);
    let t2s = t2.add_scalar(1e-24);
    let theta = t2s.sqrt();
    let a = theta.sin().div(&theta);
    let b = g.scalar(1.0).reshape(&[1, 1]).sub(&theta.cos()).div(&t2s);
    let x = aa.slice(1, 0, 1);
    let y = aa.slice(1, 1, 1);
    let z = aa.slice(1, 2, 1);
    let zero = g.zeros(&[1, 1]);
    let r0 = Value::concat(&[&zero, &z.neg(), &y], 1);
    let r1 = Value::concat(&[&z, &zero, &x.neg()], 1);
    let r2 = Value::concat(&[&y.neg(), &x, &zero], 1);
    let k = Value::concat(&[&r0, &r1, &r2], 0);
    let k2 = k.matmul(&k);
    let eye = g.constant(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    eye.add(&k.mul(&a)).add(&k2.mul(&b))
}

/// Differentiable FK: world positions of all joints for one pose.
/// `angles`: [N_J, 3] axis-angle, `scales`: [N_J], `root`: [1, 3].
fn fk_graph(g: &Graph, skel: &WholeBodySkeleton, angles: &Value, scales: &Value, root: &Value) -> Vec<Value> {
    let n = skel.num_joints();
    let mut rot: Vec<Value> = Vec::with_capacity(n);
    let mut pos: Vec<Value> = Vec::with_capacity(n);
    for j in 0..n {
        let local = rodrigues(g, &angles.slice(0, j, 1));
        match skel.joints[j].parent {
            None => {
                rot.push(local);
                pos.push(root.clone());
            }
            Some(p) => {
                let off = g.constant(&[1, 3], &skel.joints[j].offset);
                let s = scales.slice(0, j, 1).reshape(&[1, 1]);
                let world_off = off.mul(&s).matmul(&rot[p].transpose());
                pos.push(pos[p].add(&world_off));
                rot.push(rot[p].matmul(&local));
            }
        }
    }
    pos
}

/// Squared-pixel reprojection error of one joint in one view.
fn reproject_sq(g: &Graph, cam: &CameraPose, p_world: &Value, obs: [f64; 2]) -> Value {
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[i * 3 + j] = cam.rotation[(i, j)];
        }
    }
    let rot = g.constant(&[3, 3], &r);
    let t = g.constant(&[1, 3], cam.translation.as_slice());
    let pc = p_world.sub(&t).matmul(&rot);
    let z = pc.slice(1, 2, 1);
    let u = pc.slice(1, 0, 1).scale(cam.fx).div(&z).add_scalar(cam.cx);
    let v = pc.slice(1, 1, 1).scale(cam.fy).div(&z).add_scalar(cam.cy);
    let du = u.add_scalar(-obs[0]);
    let dv = v.add_scalar(-obs[1]);
    du.sqr().add(&dv.sqr())
}

/// Per-joint coefficients c with rest height = scales . c: the head chain
/// minus the average of the two ankle chains, z components only.
pub(super) fn height_coeffs(skel: &WholeBodySkeleton) -> Vec<f64> {
    let n = skel.num_joints();
    let mut coeffs = vec![0.0; n];
    let add_chain = |name: &str, w: f64, coeffs: &mut Vec<f64>| {
        let mut j = skel.joint_index(name).expect("joint exists");
        loop {
            coeffs[j] += w * skel.joints[j].offset[2];
            match skel.joints[j].parent {
                Some(p) => j = p,
                None => break,
            }
        }
    };
    add_chain("head", 1.0, &mut coeffs);
    add_chain("l_ankle", -0.5, &mut coeffs);
    add_chain("r_ankle", -0.5, &mut coeffs);
    coeffs
}

/// Fits bone scales and per-pose angles to the observations, then encodes
/// the fitted poses as an identity prior.
///
/// Loss: mean squared reprojection error
///     + lambda_reg * (mean squared scale deviation from 1
///                     + mean squared angle deviation from rest)
///     + lambda_height * squared rest-height error.
pub fn register_identity(
    skel: &WholeBodySkeleton,
    observations: &[Vec<RegView>],
    height: f64,
    cfg: &RegistrationConfig,
    encoder: &IdentityEncoder,
) -> Result<RegistrationResult, RegistrationError> {
    if observations.is_empty() {
        return Err(RegistrationError::NoPoses);
    }
    let n = skel.num_joints();
    for (pi, views) in observations.iter().enumerate() {
        if views.len() < 2 {
            return Err(RegistrationError::TooFewViews { pose: pi, views: views.len() });
        }
        for (vi, view) in views.iter().enumerate() {
            if view.kp2d.len() != n {
                return Err(RegistrationError::BadKeypointCount {
                    pose: pi,
                    view: vi,
                    got: view.kp2d.len(),
                    want: n,
                });
            }
        }
    }
    let m = observations.len();
    let mut params = ParamSet::new();
    let scales = params.add(Param::new("reg.scales", &[n], vec![1.0; n]));
    let angles: Vec<Param> = (0..m)
        .map(|p| params.add(Param::zeros(&format!("reg.angles{}", p), &[n, 3])))
        .collect();
    let roots: Vec<Param> = (0..m)
        .map(|p| params.add(Param::new(&format!("reg.root{}", p), &[1, 3], cfg.init_root.to_vec())))
        .collect();
    let hc = height_coeffs(skel);
    let total_obs: usize = observations.iter().map(|v| v.len() * n).sum();
    let mut opt = AdamW::new(&params, cfg.lr);
    opt.lr_decay = cfg.lr_decay;

    let mut final_loss = f64::NAN;
    for iter in 0..=cfg.iters {
        let g = Graph::new(Precision::F64);
        let sc = g.param(&scales);
        let mut terms: Vec<Value> = Vec::new();
        for (pi, views) in observations.iter().enumerate() {
            let ang = g.param(&angles[pi]);
            let root = g.param(&roots[pi]);
            let pos = fk_graph(&g, skel, &ang, &sc, &root);
            for view in views {
                for (j, p) in pos.iter().enumerate() {
                    terms.push(reproject_sq(&g, &view.camera, p, view.kp2d[j]));
                }
            }
        }
        let refs: Vec<&Value> = terms.iter().collect();
        let l_2d = Value::concat(&refs, 0).sum().scale(1.0 / total_obs as f64);
        let l_reg_scales = sc.add_scalar(-1.0).sqr().mean();
        let mut l_reg = l_reg_scales;
        for a in &angles {
            l_reg = l_reg.add(&g.param(a).sqr().mean().scale(1.0 / m as f64));
        }
        let hvec = g.constant(&[n, 1], &hc);
        let fitted_h = sc.reshape(&[1, n]).matmul(&hvec);
        let l_height = fitted_h.add_scalar(-height).sqr().sum();
        let loss = l_2d
            .add(&l_reg.scale(cfg.lambda_reg))
            .add(&l_height.scale(cfg.lambda_height));
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(RegistrationError::Diverged { iter });
        }
        final_loss = lv;
        if iter == cfg.iters {
            break;
        }
        params.zero_grad();
        loss.backward();
        opt.step(&params);
    }

    // fitted exemplar poses from the final parameters
    let g = Graph::new(Precision::F64);
    let sc = g.param(&scales);
    let mut poses = Vec::with_capacity(m);
    for pi in 0..m {
        let ang = g.param(&angles[pi]);
        let root = g.param(&roots[pi]);
        let pos = fk_graph(&g, skel, &ang, &sc, &root);
        let mut flat = Vec::with_capacity(n * 3);
        for p in &pos {
            flat.extend(p.values());
        }
        poses.push(flat);
    }
    let exemplars: Vec<f64> = poses.iter().flatten().cloned().collect();
    let prior = IdentityPrior::from_exemplars(encoder, &g, exemplars, m);
    Ok(RegistrationResult {
        bone_scales: scales.values(),
        poses,
        final_loss,
        prior,
    })
}
