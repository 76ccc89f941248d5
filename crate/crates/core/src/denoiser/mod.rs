//! The conditional denoising network: conditioning encoders, per-frame
//! graph-transformer features with an auxiliary pose head, a causal temporal
//! relative-attention stack, and a regression head. Instantiated twice — a
//! body specialist (17 joints) and a hand specialist (30 joints).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{GraphTransformerBlock, RelTemporalLayer, StreamState};
use crate::identity::{adain_inject, AdainMaps, IdentityEncoder, D_ID};
use crate::observe::{CameraPose, FrameObservation};
use crate::skeleton::{rotation_to_6d, WholeBodySkeleton, NUM_BODY, NUM_HAND, NUM_UPPER};
use crate::tensor::{ContainerError, DType, Graph, Linear, Mlp, ParamSet, Value};

/// Width of the raw sinusoidal timestep embedding.
pub const TIME_EMB: usize = 64;
/// RoPE base for the temporal layers.
pub const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Body,
    Hand,
    /// Single joint model over all 47 joints (parallel-joint ablation).
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub part: Part,
    pub role: Role,
    pub d_model: usize,
    pub frame_blocks: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub ws: usize,
    pub condition_upper_body: bool,
    pub identity_conditioning: bool,
}

impl DenoiserConfig {
    /// Full-size teacher: 512 wide, 3 frame blocks, 3 temporal layers,
    /// 4 heads, window 20.
    pub fn teacher(part: Part) -> DenoiserConfig {
        DenoiserConfig {
            part,
            role: Role::Teacher,
            d_model: 512,
            frame_blocks: 3,
            temporal_layers: 3,
            heads: 4,
            ws: 20,
            condition_upper_body: part == Part::Hand,
            identity_conditioning: true,
        }
    }

    /// Distilled student: 256 wide, 1 frame block, 1 temporal layer,
    /// 2 heads, window 8.
    pub fn student(part: Part) -> DenoiserConfig {
        DenoiserConfig {
            part,
            role: Role::Student,
            d_model: 256,
            frame_blocks: 1,
            temporal_layers: 1,
            heads: 2,
            ws: 8,
            condition_upper_body: part == Part::Hand,
            identity_conditioning: true,
        }
    }

    /// Number of joints this specialist predicts (17 body / 30 hands /
    /// 47 whole).
    pub fn num_part_joints(&self) -> usize {
        match self.part {
            Part::Body => NUM_BODY,
            Part::Hand => 2 * NUM_HAND,
            Part::Whole => crate::skeleton::NUM_JOINTS,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.heads == 0 || self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return Err(DenoiserError::BadConfig(format!(
                "d_model {} must split into {} even-sized heads",
                self.d_model, self.heads
            )));
        }
        if self.frame_blocks == 0 || self.temporal_layers == 0 {
            return Err(DenoiserError::BadConfig("frame_blocks and temporal_layers must be >= 1".into()));
        }
        if self.condition_upper_body && self.part != Part::Hand {
            return Err(DenoiserError::BadConfig("upper-body conditioning is hand-only".into()));
        }
        Ok(())
    }
}

/// Affine standardization of the diffusion target space: per-axis mean and
/// one isotropic scale, fitted on the training split. The diffusion chain
/// runs in the standardized space (where the noise schedule's unit-variance
/// assumption holds); predictions and losses stay in meters. Identity by
/// default, so an untrained model behaves like the raw-space formulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNorm {
    pub mean: [f64; 3],
    pub std: f64,
}

impl Default for TargetNorm {
    fn default() -> TargetNorm {
        TargetNorm { mean: [0.0; 3], std: 1.0 }
    }
}

impl TargetNorm {
    /// Meters -> standardized diffusion space.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| (v - self.mean[i % 3]) / self.std).collect()
    }

    /// Standardized diffusion space -> meters.
    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| v * self.std + self.mean[i % 3]).collect()
    }
}

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    BadConfig(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint weights: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint config: {0}")]
    Config(String),
}

/// Raw sinusoidal embedding of a diffusion timestep: half sines, half
/// cosines over geometrically spaced frequencies. k = 0 gives all-zero
/// sines and all-one cosines.
pub fn sinusoidal_embedding(k: usize, width: usize) -> Vec<f64> {
    assert!(width % 2 == 0, "embedding width {} must be even", width);
    let half = width / 2;
    let mut emb = vec![0.0; width];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let ang = k as f64 * freq;
        emb[i] = ang.sin();
        emb[half + i] = ang.cos();
    }
    emb
}

/// One specialist network plus its parameters.
#[derive(Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamSet,
    /// Global joint indices covered by this specialist, in token order.
    pub joint_ids: Vec<usize>,
    /// Exemplar encoder trained jointly with the network; present exactly
    /// when identity conditioning is enabled.
    pub id_encoder: Option<IdentityEncoder>,
    /// Target-space standardization fitted during training; identity until
    /// then. Interior-mutable so training can set it through a shared ref,
    /// like the parameters themselves.
    norm: std::cell::Cell<TargetNorm>,
    cam_mlp: Mlp,
    time_mlp: Mlp,
    upper_mlp: Option<Mlp>,
    input_proj: Linear,
    blocks: Vec<GraphTransformerBlock>,
    aux_head: Linear,
    temporal: Vec<RelTemporalLayer>,
    adain: Vec<AdainMaps>,
    head: Linear,
    adjacency: Vec<f64>,
}

/// Per-joint raw token width: diffused 3D point + two views of
/// (normalized 2D keypoint, confidence).
const TOKEN_RAW: usize = 3 + 2 * 3;

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, skel: &WholeBodySkeleton, rng: &mut impl Rng) -> Result<Denoiser, DenoiserError> {
        cfg.validate()?;
        let joint_ids: Vec<usize> = match cfg.part {
            Part::Body => skel.body.clone(),
            Part::Hand => skel.left_hand.iter().chain(skel.right_hand.iter()).cloned().collect(),
            Part::Whole => (0..skel.num_joints()).collect(),
        };
        let d = cfg.d_model;
        // conditioning features concatenated into every joint token:
        // two camera features, one timestep feature, one upper-body feature.
        let cond_w = d * (2 + 1 + usize::from(cfg.condition_upper_body));
        let mut params = ParamSet::new();
        let cam_mlp = Mlp::new("cam", 9, d, d, &mut params, rng);
        let time_mlp = Mlp::new("time", TIME_EMB, d, d, &mut params, rng);
        let upper_mlp = cfg
            .condition_upper_body
            .then(|| Mlp::new("upper", NUM_UPPER * 3, d, d, &mut params, rng));
        let input_proj = Linear::new("input", TOKEN_RAW + cond_w, d, &mut params, rng);
        let blocks = (0..cfg.frame_blocks)
            .map(|i| GraphTransformerBlock::new(&format!("block{}", i), d, cfg.heads, &mut params, rng))
            .collect();
        let aux_head = Linear::new("aux", d, 3, &mut params, rng);
        let temporal = (0..cfg.temporal_layers)
            .map(|i| RelTemporalLayer::new(&format!("temporal{}", i), d, cfg.heads, cfg.ws, ROPE_BASE, &mut params, rng))
            .collect();
        let adain = if cfg.identity_conditioning {
            (0..cfg.temporal_layers)
                .map(|i| AdainMaps::new(&format!("adain{}", i), D_ID, d, &mut params))
                .collect()
        } else {
            Vec::new()
        };
        let id_encoder = cfg
            .identity_conditioning
            .then(|| IdentityEncoder::new("idenc", crate::skeleton::NUM_JOINTS, D_ID, &mut params, rng));
        let head = Linear::new("head", d, joint_ids.len() * 3, &mut params, rng);
        let adjacency = skel.normalized_adjacency(&joint_ids);
        Ok(Denoiser {
            cfg,
            params,
            joint_ids,
            id_encoder,
            norm: std::cell::Cell::new(TargetNorm::default()),
            cam_mlp,
            time_mlp,
            upper_mlp,
            input_proj,
            blocks,
            aux_head,
            temporal,
            adain,
            head,
            adjacency,
        })
    }

    /// Camera conditioning feature: concat(6D rotation, translation) through
    /// a two-layer MLP. Returns [1, D_model].
    pub fn encode_camera(&self, g: &Graph, cam: &CameraPose) -> Value {
        let r6 = rotation_to_6d(&cam.rotation);
        let mut raw = [0.0; 9];
        raw[..6].copy_from_slice(&r6);
        raw[6..].copy_from_slice(cam.translation.as_slice());
        self.cam_mlp.forward(g, &g.constant(&[1, 9], &raw))
    }

    /// Timestep conditioning feature: sinusoidal embedding through a
    /// two-layer MLP. Returns [1, D_model].
    pub fn encode_timestep(&self, g: &Graph, k: usize) -> Value {
        let emb = sinusoidal_embedding(k, TIME_EMB);
        self.time_mlp.forward(g, &g.constant(&[1, TIME_EMB], &emb))
    }

    /// Upper-body conditioning feature (hand specialist only): flattened
    /// 7 x 3 keypoints through a two-layer MLP. `kp`: [T, 21] ->
    /// [T, D_model]. Panics on a model built without upper-body
    /// conditioning.
    pub fn encode_upper_body(&self, g: &Graph, kp: &Value) -> Value {
        let mlp = self
            .upper_mlp
            .as_ref()
            .expect("encode_upper_body: this denoiser was built without upper-body conditioning");
        assert_eq!(kp.shape()[1], NUM_UPPER * 3, "encode_upper_body: expected [T, {}], got {:?}", NUM_UPPER * 3, kp.shape());
        mlp.forward(g, kp)
    }

    /// Pooled identity feature from whole-body exemplar poses via the
    /// jointly trained encoder. `exemplars`: [N_O, 47 * 3] -> [1, D_ID].
    /// Panics on a model built without identity conditioning.
    pub fn encode_identity(&self, g: &Graph, exemplars: &Value) -> Value {
        self.id_encoder
            .as_ref()
            .expect("encode_identity: this denoiser was built without identity conditioning")
            .encode(g, exemplars)
    }

    /// Normalized per-joint observation row: for each view, the 2D keypoint
    /// in normalized image coordinates ((pix - principal) / focal) plus its
    /// confidence; missing keypoints (conf = 0) enter as zeros.
    fn obs_rows(&self, obs: &FrameObservation) -> Vec<f64> {
        let n = self.joint_ids.len();
        let mut rows = vec![0.0; n * 6];
        for (ti, &j) in self.joint_ids.iter().enumerate() {
            for (vi, view) in obs.views().iter().enumerate() {
                let conf = view.conf[j];
                let base = ti * 6 + vi * 3;
                if conf > 0.0 {
                    let cam = &view.camera;
                    rows[base] = (view.kp2d[j][0] - cam.cx) / cam.fx;
                    rows[base + 1] = (view.kp2d[j][1] - cam.cy) / cam.fy;
                }
                rows[base + 2] = conf;
            }
        }
        rows
    }

    /// Per-frame feature path: joint tokens through the graph-transformer
    /// stack. Returns (frame feature [1, D], frame_aux row [1, N*3]).
    fn frame_features(
        &self,
        g: &Graph,
        diffused_frame: &Value,
        obs: &FrameObservation,
        cond: &Value,
        adjacency: &Value,
    ) -> (Value, Value) {
        let n = self.joint_ids.len();
        let pts = diffused_frame.reshape(&[n, 3]);
        let obs_v = g.constant(&[n, 6], &self.obs_rows(obs));
        // broadcast the frame conditioning row to every joint token
        let ones = g.constant(&[n, 1], &vec![1.0; n]);
        let cond_rows = ones.matmul(cond);
        let tokens = Value::concat(&[&pts, &obs_v, &cond_rows], 1);
        let mut h = self.input_proj.forward(g, &tokens);
        for block in &self.blocks {
            h = block.forward(g, &h, adjacency);
        }
        let aux = self.aux_head.forward(g, &h).reshape(&[1, n * 3]);
        let pooled = h.sum_axis(0).reshape(&[1, self.cfg.d_model]).scale(1.0 / n as f64);
        (pooled, aux)
    }

    /// Frame conditioning row for one frame: camera features for both views,
    /// the timestep feature, and (hand only) the upper-body feature.
    fn cond_row(&self, g: &Graph, obs: &FrameObservation, tf: &Value, upper_t: Option<&Value>) -> Value {
        let cl = self.encode_camera(g, &obs.left.camera);
        let cr = self.encode_camera(g, &obs.right.camera);
        match upper_t {
            Some(u) => Value::concat(&[&cl, &cr, tf, u], 1),
            None => Value::concat(&[&cl, &cr, tf], 1),
        }
    }

    fn check_inputs(&self, diffused_shape: &[usize], t: usize, has_upper: bool, has_identity: bool) {
        let n = self.joint_ids.len();
        assert_eq!(
            diffused_shape,
            [t, n * 3],
            "denoise: diffused expected [{}, {}], got {:?}",
            t,
            n * 3,
            diffused_shape
        );
        assert_eq!(
            has_upper,
            self.cfg.condition_upper_body,
            "denoise: upper-body input {} but config says {}",
            if has_upper { "given" } else { "missing" },
            self.cfg.condition_upper_body
        );
        assert_eq!(
            has_identity,
            self.cfg.identity_conditioning,
            "denoise: identity feature {} but config says {}",
            if has_identity { "given" } else { "missing" },
            self.cfg.identity_conditioning
        );
    }

    /// Full conditional denoising pass.
    ///
    /// `diffused`: [T, N_part*3] diffused keypoints; `obs`: T frames;
    /// `upper`: [T, 21] upper-body keypoints (hand specialist);
    /// `identity`: [1, D_ID] pooled identity feature. Returns the clean-pose
    /// estimate and the per-frame auxiliary estimate, both [T, N_part*3].
    /// Fully causal: row t depends only on frames <= t.
    pub fn denoise(
        &self,
        g: &Graph,
        diffused: &Value,
        obs: &[FrameObservation],
        k: usize,
        upper: Option<&Value>,
        identity: Option<&Value>,
    ) -> DenoiseOutput {
        let t = obs.len();
        assert!(t > 0, "denoise: empty observation sequence");
        self.check_inputs(&diffused.shape(), t, upper.is_some(), identity.is_some());
        let n = self.joint_ids.len();
        let adjacency = g.constant(&[n, n], &self.adjacency);
        let tf = self.encode_timestep(g, k);
        let upper_feats = upper.map(|u| self.encode_upper_body(g, u));
        let mut feats: Vec<Value> = Vec::with_capacity(t);
        let mut aux_rows: Vec<Value> = Vec::with_capacity(t);
        for (ti, frame) in obs.iter().enumerate() {
            let upper_t = upper_feats.as_ref().map(|u| u.slice(0, ti, 1));
            let cond = self.cond_row(g, frame, &tf, upper_t.as_ref());
            let (f, aux) = self.frame_features(g, &diffused.slice(0, ti, 1), frame, &cond, &adjacency);
            feats.push(f);
            aux_rows.push(aux);
        }
        let refs: Vec<&Value> = feats.iter().collect();
        let mut x = Value::concat(&refs, 0);
        for (li, layer) in self.temporal.iter().enumerate() {
            x = layer.forward(g, &x);
            if let Some(f_ex) = identity {
                x = adain_inject(g, &x, f_ex, &self.adain[li]);
            }
        }
        let x0_hat = self.head.forward(g, &x);
        let aux_refs: Vec<&Value> = aux_rows.iter().collect();
        DenoiseOutput {
            x0_hat,
            frame_aux: Value::concat(&aux_refs, 0),
        }
    }

    /// Streaming pass for one frame; bitwise-equal to the corresponding row
    /// of [`Denoiser::denoise`] on the same prefix. `diffused_frame`:
    /// [1, N_part*3]; `upper_frame`: [1, 21].
    pub fn stream_denoise(
        &self,
        g: &Graph,
        stream: &mut DenoiserStream,
        diffused_frame: &Value,
        obs: &FrameObservation,
        k: usize,
        upper_frame: Option<&Value>,
        identity: Option<&Value>,
    ) -> DenoiseOutput {
        self.check_inputs(&diffused_frame.shape(), 1, upper_frame.is_some(), identity.is_some());
        assert_eq!(stream.states.len(), self.temporal.len(), "stream state built for a different denoiser");
        let n = self.joint_ids.len();
        let adjacency = g.constant(&[n, n], &self.adjacency);
        let tf = self.encode_timestep(g, k);
        let upper_t = upper_frame.map(|u| self.encode_upper_body(g, u));
        let cond = self.cond_row(g, obs, &tf, upper_t.as_ref());
        let (f, aux) = self.frame_features(g, diffused_frame, obs, &cond, &adjacency);
        let mut x = f;
        for (li, layer) in self.temporal.iter().enumerate() {
            x = layer.stream_forward(g, &mut stream.states[li], &x);
            if let Some(f_ex) = identity {
                x = adain_inject(g, &x, f_ex, &self.adain[li]);
            }
        }
        DenoiseOutput {
            x0_hat: self.head.forward(g, &x),
            frame_aux: aux,
        }
    }

    pub fn new_stream(&self) -> DenoiserStream {
        DenoiserStream {
            states: (0..self.temporal.len()).map(|_| StreamState::new()).collect(),
        }
    }

    pub fn target_norm(&self) -> TargetNorm {
        self.norm.get()
    }

    pub fn set_target_norm(&self, norm: TargetNorm) {
        assert!(norm.std > 0.0 && norm.std.is_finite(), "target norm std must be positive");
        self.norm.set(norm);
    }

    /// Writes the weights container plus the config sidecar into `dir`.
    pub fn save(&self, dir: &Path, dtype: DType) -> Result<(), DenoiserError> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("weights.tns"), dtype)?;
        let sidecar = Sidecar { config: self.cfg.clone(), norm: self.norm.get() };
        let toml = toml::to_string_pretty(&sidecar).map_err(|e| DenoiserError::Config(e.to_string()))?;
        std::fs::write(dir.join("denoiser.toml"), toml)?;
        Ok(())
    }

    pub fn load(dir: &Path, skel: &WholeBodySkeleton) -> Result<Denoiser, DenoiserError> {
        let text = std::fs::read_to_string(dir.join("denoiser.toml"))?;
        let sidecar: Sidecar = toml::from_str(&text).map_err(|e| DenoiserError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Denoiser::new(sidecar.config, skel, &mut rng)?;
        d.params.load(&dir.join("weights.tns"))?;
        d.set_target_norm(sidecar.norm);
        Ok(d)
    }
}

/// On-disk sidecar next to the weights container.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: DenoiserConfig,
    #[serde(default)]
    norm: TargetNorm,
}

pub struct DenoiseOutput {
    /// Clean-pose estimate, [T, N_part*3].
    pub x0_hat: Value,
    /// Per-frame auxiliary estimate from the graph path, [T, N_part*3].
    pub frame_aux: Value,
}

/// Per-layer streaming attention state for one denoiser session.
pub struct DenoiserStream {
    states: Vec<StreamState>,
}

impl DenoiserStream {
    pub fn frames_seen(&self) -> usize {
        self.states.first().map_or(0, |s| s.frames_seen())
    }
}
