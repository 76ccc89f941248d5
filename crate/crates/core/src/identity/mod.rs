//! Exemplar-based identity conditioning: a permutation-invariant encoder
//! over example poses, AdaIN-style feature injection, and registration of an
//! identity from multi-view 2D observations.

mod register;

pub use register::{register_identity, RegView, RegistrationConfig, RegistrationError, RegistrationResult};

use rand::Rng;

use crate::tensor::{Graph, Mlp, Param, ParamSet, Value};

/// Width of the pooled identity feature.
pub const D_ID: usize = 64;
/// Default number of exemplar poses.
pub const DEFAULT_N_EX: usize = 10;

/// Stabilizer added to the AdaIN standard deviation.
pub const ADAIN_EPS: f64 = 1e-5;

/// The per-pose feature map gamma: a two-layer MLP over flattened
/// root-centered keypoints.
#[derive(Clone)]
pub struct IdentityEncoder {
    pub num_joints: usize,
    pub d_id: usize,
    gamma: Mlp,
}

impl IdentityEncoder {
    pub fn new(prefix: &str, num_joints: usize, d_id: usize, params: &mut ParamSet, rng: &mut impl Rng) -> IdentityEncoder {
        let d_in = num_joints * 3;
        IdentityEncoder {
            num_joints,
            d_id,
            gamma: Mlp::new(&format!("{}.gamma", prefix), d_in, d_id * 2, d_id, params, rng),
        }
    }

    /// Pooled identity feature: elementwise max over gamma of each
    /// root-centered exemplar. `exemplars`: [N_O, N_J * 3]. Returns [1, d_id].
    pub fn encode(&self, g: &Graph, exemplars: &Value) -> Value {
        let shape = exemplars.shape();
        assert_eq!(
            shape.len(),
            2,
            "exemplar_encode: expected [N_O, {}], got {:?}",
            self.num_joints * 3,
            shape
        );
        assert!(shape[0] >= 1, "exemplar_encode: empty exemplar set");
        assert_eq!(shape[1], self.num_joints * 3, "exemplar_encode: expected row width {}, got {}", self.num_joints * 3, shape[1]);
        let centered = root_center(g, exemplars, self.num_joints);
        let feats = self.gamma.forward(g, &centered);
        feats.max_axis(0).reshape(&[1, self.d_id])
    }
}

/// Subtracts each pose's root joint (joint 0) from all its keypoints.
/// `poses`: [N, N_J * 3].
pub fn root_center(_g: &Graph, poses: &Value, num_joints: usize) -> Value {
    let n = poses.shape()[0];
    let grid = poses.reshape(&[n, num_joints, 3]);
    let root = grid.slice(1, 0, 1);
    grid.sub(&root).reshape(&[n, num_joints * 3])
}

/// Per-layer scale/shift maps for AdaIN injection; zero-initialized so the
/// initial transform is the plain normalization (s = 1, b = 0).
#[derive(Clone)]
pub struct AdainMaps {
    pub d_id: usize,
    pub d_model: usize,
    ws: Param,
    s_bias: Param,
    wb: Param,
    b_bias: Param,
}

impl AdainMaps {
    pub fn new(prefix: &str, d_id: usize, d_model: usize, params: &mut ParamSet) -> AdainMaps {
        AdainMaps {
            d_id,
            d_model,
            ws: params.add(Param::zeros(&format!("{}.ws", prefix), &[d_id, d_model])),
            s_bias: params.add(Param::new(&format!("{}.s_bias", prefix), &[d_model], vec![1.0; d_model])),
            wb: params.add(Param::zeros(&format!("{}.wb", prefix), &[d_id, d_model])),
            b_bias: params.add(Param::zeros(&format!("{}.b_bias", prefix), &[d_model])),
        }
    }
}

/// AdaIN injection: normalizes each frame's feature row (mean/std over the
/// channel axis, a causal per-frame variant) and applies the scale and shift
/// predicted from the identity feature:
/// out_t = s * (feat_t - mu_t) / (sigma_t + 1e-5) + b.
pub fn adain_inject(g: &Graph, features: &Value, f_ex: &Value, maps: &AdainMaps) -> Value {
    let shape = features.shape();
    assert_eq!(shape.len(), 2, "adain_inject: expected [T, {}], got {:?}", maps.d_model, shape);
    assert_eq!(shape[1], maps.d_model, "adain_inject: channel width {} != {}", shape[1], maps.d_model);
    assert_eq!(f_ex.shape(), vec![1, maps.d_id], "adain_inject: identity feature shape {:?}", f_ex.shape());
    let t = shape[0];
    let d = shape[1] as f64;
    let mu = features.sum_axis(1).reshape(&[t, 1]).scale(1.0 / d);
    let centered = features.sub(&mu);
    let sigma = centered.sqr().sum_axis(1).reshape(&[t, 1]).scale(1.0 / d).sqrt();
    let norm = centered.div(&sigma.add_scalar(ADAIN_EPS));
    let s = f_ex.matmul(&g.param(&maps.ws)).add(&g.param(&maps.s_bias));
    let b = f_ex.matmul(&g.param(&maps.wb)).add(&g.param(&maps.b_bias));
    norm.mul(&s).add(&b)
}

/// A registered identity: fitted exemplar poses and their pooled feature.
#[derive(Debug, Clone)]
pub struct IdentityPrior {
    /// [N_O, N_J * 3] flattened exemplar keypoints.
    pub exemplars: Vec<f64>,
    pub num_exemplars: usize,
    pub num_joints: usize,
    /// Pooled feature of width d_id; always equals encode(exemplars).
    pub f_ex: Vec<f64>,
}

impl IdentityPrior {
    pub fn from_exemplars(encoder: &IdentityEncoder, g: &Graph, exemplars: Vec<f64>, num_exemplars: usize) -> IdentityPrior {
        assert_eq!(exemplars.len(), num_exemplars * encoder.num_joints * 3);
        let v = g.constant(&[num_exemplars, encoder.num_joints * 3], &exemplars);
        let f_ex = encoder.encode(g, &v).values();
        IdentityPrior {
            exemplars,
            num_exemplars,
            num_joints: encoder.num_joints,
            f_ex,
        }
    }
}
