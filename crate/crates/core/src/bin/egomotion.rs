//! Command-line entry point: data generation, training, distillation,
//! identity registration, inference, evaluation, benchmarking, and a
//! cross-module self-test.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use egomotion::artifacts::{load_dataset, load_motion, save_dataset, save_motion};
use egomotion::cascade::{EstimatorMode, WholeBodyEstimator};
use egomotion::denoiser::{Denoiser, DenoiserConfig, Part};
use egomotion::diffusion::{DiffusionSchedule, DEFAULT_BETA_1, DEFAULT_BETA_K, DEFAULT_K};
use egomotion::eval::{bench_offline_latency, bench_stream_latency, bone_err, foot_skate, mpjpe, pa_mpjpe_with_flags};
use egomotion::identity::{register_identity, IdentityEncoder, IdentityPrior, RegView, RegistrationConfig, D_ID};
use egomotion::observe::{sample_identity, CameraPose, StereoRig};
use egomotion::skeleton::WholeBodySkeleton;
use egomotion::tensor::{read_tensors, write_tensors, DType, NamedTensor, ParamSet, Precision};
use egomotion::train::{sds_distill, synth_dataset, train_teacher, TrainConfig, TrainMode, TrainSequence};

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct ScheduleConfig {
    k_max: usize,
    beta_1: f64,
    beta_k: f64,
}

impl Default for ScheduleConfig {
    fn default() -> ScheduleConfig {
        ScheduleConfig { k_max: DEFAULT_K, beta_1: DEFAULT_BETA_1, beta_k: DEFAULT_BETA_K }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct GenConfig {
    identities: usize,
    frames: usize,
    fps: f64,
    exemplars: usize,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig { identities: 8, frames: 100, fps: 30.0, exemplars: 10 }
    }
}

/// Fully-resolved run configuration; logged verbatim at the start of every
/// command. File values override defaults; command-line flags override both.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    /// 32 or 64.
    precision: u32,
    threads: usize,
    data_dir: PathBuf,
    schedule: ScheduleConfig,
    gen: GenConfig,
    train: TrainConfig,
    rig: StereoRig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            precision: 64,
            threads: 1,
            data_dir: PathBuf::from("data"),
            schedule: ScheduleConfig::default(),
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            rig: StereoRig::default(),
        }
    }
}

impl RunConfig {
    fn precision(&self) -> Result<Precision, String> {
        match self.precision {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            p => Err(format!("precision must be 32 or 64, got {}", p)),
        }
    }

    fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::linear_beta(self.schedule.k_max, self.schedule.beta_1, self.schedule.beta_k)
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "egomotion", version, about = "Causal streaming whole-body motion estimation", arg_required_else_help = true)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision of all computation.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Worker threads (the reference implementation computes single-threaded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Default directory for datasets and models.
    #[arg(long, global = true, env = "EGOMOTION_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartArg {
    Body,
    Hand,
    Whole,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Part {
        match p {
            PartArg::Body => Part::Body,
            PartArg::Hand => Part::Hand,
            PartArg::Whole => Part::Whole,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Cascaded,
    ParallelJoint,
    Separate,
    Regression,
}

impl From<ModeArg> for EstimatorMode {
    fn from(m: ModeArg) -> EstimatorMode {
        match m {
            ModeArg::Cascaded => EstimatorMode::Cascaded,
            ModeArg::ParallelJoint => EstimatorMode::ParallelJoint,
            ModeArg::Separate => EstimatorMode::Separate,
            ModeArg::Regression => EstimatorMode::Regression,
        }
    }
}

#[derive(Args, Debug)]
struct ModelShapeArgs {
    /// Override the role preset's model width.
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    frame_blocks: Option<usize>,
    #[arg(long)]
    temporal_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Causal attention window (frames of history).
    #[arg(long)]
    ws: Option<usize>,
}

impl ModelShapeArgs {
    fn apply(&self, mut cfg: DenoiserConfig) -> DenoiserConfig {
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.frame_blocks {
            cfg.frame_blocks = v;
        }
        if let Some(v) = self.temporal_layers {
            cfg.temporal_layers = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.ws {
            cfg.ws = v;
        }
        cfg
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-identity dataset.
    GenData {
        /// Output directory (default: <data-dir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        exemplars: Option<usize>,
    },
    /// Train a specialist denoiser (teacher or non-distilled student).
    Train {
        /// Dataset directory (default: <data-dir>/dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "body")]
        part: PartArg,
        #[arg(long, value_enum, default_value = "teacher")]
        role: RoleArg,
        /// Train the single-pass regression variant instead of diffusion.
        #[arg(long)]
        regression: bool,
        /// Condition on ground-truth upper-body joints (hand specialists).
        #[arg(long)]
        upper_body: bool,
        /// Condition on the exemplar-based identity prior.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        shape: ModelShapeArgs,
    },
    /// Distill a trained teacher into a one-step student.
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained teacher model directory.
        #[arg(long)]
        teacher: PathBuf,
        /// Student output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        shape: ModelShapeArgs,
    },
    /// Register an identity from synthetic multi-view static poses.
    RegisterIdentity {
        /// Output file for the fitted identity prior.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "reg")]
        id: String,
        #[arg(long, default_value = "4")]
        poses: usize,
        #[arg(long, default_value = "3")]
        views: usize,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Estimate whole-body motion for one dataset sequence.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Body (or whole-body) model directory.
        #[arg(long)]
        body: PathBuf,
        /// Hand model directory (cascaded / separate / regression modes).
        #[arg(long)]
        hand: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cascaded")]
        mode: ModeArg,
        /// DDIM steps for the body model.
        #[arg(long, default_value = "10")]
        steps: usize,
        /// DDIM steps for the hand model (default: same as --steps).
        #[arg(long)]
        hand_steps: Option<usize>,
        /// Dataset sequence index.
        #[arg(long, default_value = "0")]
        seq: usize,
        /// Registered identity prior file; falls back to the sequence's
        /// exemplars when the model is identity-conditioned.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Run frame-by-frame through the streaming path (1-step students).
        #[arg(long)]
        stream: bool,
        /// Output motion file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted motion file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Plain-text report; a machine-readable copy lands at <report>.toml.
        #[arg(long)]
        report: PathBuf,
    },
    /// Measure per-frame latency on a synthetic observation stream.
    Bench {
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        hand: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cascaded")]
        mode: ModeArg,
        #[arg(long, default_value = "1")]
        steps: usize,
        #[arg(long, default_value = "1000")]
        frames: usize,
        #[arg(long, default_value = "20")]
        warmup: usize,
        /// Benchmark offline estimation instead of streaming.
        #[arg(long)]
        offline: bool,
    },
    /// Run the cross-module oracle suite; exits nonzero on any failure.
    Selftest,
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn fail(msg: String) -> ExitCode {
    eprintln!("error: {}", msg);
    ExitCode::FAILURE
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {}", path.display(), e))?;
            toml::from_str(&text).map_err(|e| format!("parsing {}: {}", path.display(), e))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse().unwrap();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    cfg.precision()?;
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    eprintln!("resolved configuration:");
    for line in text.lines() {
        eprintln!("  {}", line);
    }
    if cfg.threads != 1 {
        eprintln!("note: computation is single-threaded; --threads recorded for reproducibility only");
    }
}

fn dataset_dir(cfg: &RunConfig, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.data_dir.join("dataset"))
}

fn load_data(dir: &Path) -> Result<(Vec<TrainSequence>, f64), String> {
    load_dataset(dir).map_err(|e| format!("loading dataset from {}: {}", dir.display(), e))
}

fn write_loss_curve(path: &Path, curve: &[egomotion::train::LossRecord]) -> Result<(), String> {
    let mut text = String::from("step\ttotal\tsimple\tvel\tfoot\tframe\tdistill\n");
    for r in curve {
        text.push_str(&format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
            r.step, r.total, r.simple, r.vel, r.foot, r.frame, r.distill
        ));
    }
    std::fs::write(path, text).map_err(|e| format!("writing {}: {}", path.display(), e))
}

fn load_model(dir: &Path, skel: &WholeBodySkeleton) -> Result<Denoiser, String> {
    Denoiser::load(dir, skel).map_err(|e| format!("loading model from {}: {}", dir.display(), e))
}

fn build_estimator(
    cfg: &RunConfig,
    body_dir: &Path,
    hand_dir: &Option<PathBuf>,
    mode: ModeArg,
    steps: usize,
    hand_steps: usize,
    fps: f64,
) -> Result<WholeBodyEstimator, String> {
    let skel = WholeBodySkeleton::default_whole_body();
    let body = load_model(body_dir, &skel)?;
    let hand = match hand_dir {
        Some(d) => Some(load_model(d, &skel)?),
        None => None,
    };
    WholeBodyEstimator::new(mode.into(), body, hand, cfg.schedule(), steps, hand_steps, skel, fps)
        .map_err(|e| e.to_string())
}

/// Identity prior for inference: a registered prior file if given, else the
/// sequence's own exemplars when the body model is identity-conditioned.
fn resolve_prior(
    prior_path: &Option<PathBuf>,
    seq: &TrainSequence,
    est: &WholeBodyEstimator,
) -> Result<Option<IdentityPrior>, String> {
    if let Some(path) = prior_path {
        let tensors = read_tensors(path).map_err(|e| format!("loading prior {}: {}", path.display(), e))?;
        let ex = tensors
            .iter()
            .find(|t| t.name == "exemplars")
            .ok_or_else(|| format!("{}: no exemplars tensor", path.display()))?;
        let num_joints = ex.shape[1] / 3;
        return Ok(Some(IdentityPrior {
            exemplars: ex.values.clone(),
            num_exemplars: ex.shape[0],
            num_joints,
            f_ex: vec![0.0; D_ID],
        }));
    }
    let needs_identity =
        est.body.cfg.identity_conditioning || est.hand.as_ref().map(|h| h.cfg.identity_conditioning).unwrap_or(false);
    if !needs_identity {
        return Ok(None);
    }
    if seq.num_exemplars == 0 {
        return Err("model is identity-conditioned but the sequence has no exemplars".into());
    }
    Ok(Some(IdentityPrior {
        exemplars: seq.exemplars.clone(),
        num_exemplars: seq.num_exemplars,
        num_joints: est.skel.num_joints(),
        f_ex: vec![0.0; D_ID],
    }))
}

/// A camera at `eye` looking at `target`, +z world up.
fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let fwd = (target - eye).normalize();
    let up_hint = Vector3::new(0.0, 0.0, 1.0);
    let x = fwd.cross(&up_hint).normalize();
    let y = fwd.cross(&x).normalize();
    CameraPose {
        rotation: Matrix3::from_columns(&[x, y, fwd]),
        translation: eye,
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640.0,
        height: 480.0,
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    cfg: &RunConfig,
    out: Option<PathBuf>,
    identities: Option<usize>,
    frames: Option<usize>,
    exemplars: Option<usize>,
) -> Result<(), String> {
    let out = out.unwrap_or_else(|| cfg.data_dir.join("dataset"));
    let skel = WholeBodySkeleton::default_whole_body();
    let identities = identities.unwrap_or(cfg.gen.identities);
    let frames = frames.unwrap_or(cfg.gen.frames);
    let exemplars = exemplars.unwrap_or(cfg.gen.exemplars);
    let data = synth_dataset(&skel, &cfg.rig, identities, frames, cfg.gen.fps, exemplars, cfg.seed);
    save_dataset(&out, &data, cfg.gen.fps).map_err(|e| e.to_string())?;
    eprintln!(
        "wrote {} sequences x {} frames ({} exemplars each) to {}",
        identities,
        frames,
        exemplars,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    out: PathBuf,
    part: PartArg,
    role: RoleArg,
    regression: bool,
    upper_body: bool,
    identity: bool,
    steps: Option<usize>,
    lr: Option<f64>,
    window: Option<usize>,
    shape: &ModelShapeArgs,
) -> Result<(), String> {
    let (dataset, _fps) = load_data(&dataset_dir(cfg, &data))?;
    let skel = WholeBodySkeleton::default_whole_body();
    let mut dcfg = match role {
        RoleArg::Teacher => DenoiserConfig::teacher(part.into()),
        RoleArg::Student => DenoiserConfig::student(part.into()),
    };
    dcfg.condition_upper_body = upper_body || dcfg.condition_upper_body;
    dcfg.identity_conditioning = identity;
    let dcfg = shape.apply(dcfg);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    if let Some(l) = lr {
        tcfg.lr = l;
    }
    if let Some(w) = window {
        tcfg.window = w;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let den = Denoiser::new(dcfg, &skel, &mut rng).map_err(|e| e.to_string())?;
    let mode = if regression { TrainMode::Regression } else { TrainMode::Diffusion };
    let precision = cfg.precision()?;
    eprintln!("training {:?} {:?} for {} steps ...", den.cfg.part, den.cfg.role, tcfg.steps);
    let curve = train_teacher(&den, &skel, &dataset, &cfg.schedule(), &tcfg, mode, precision)
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    den.save(&out, DType::from(precision)).map_err(|e| e.to_string())?;
    write_loss_curve(&out.join("losses.tsv"), &curve)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!("L_simple: {:.6e} -> {:.6e}; model saved to {}", first.simple, last.simple, out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    teacher_dir: PathBuf,
    out: PathBuf,
    steps: Option<usize>,
    lr: Option<f64>,
    window: Option<usize>,
    shape: &ModelShapeArgs,
) -> Result<(), String> {
    let (dataset, _fps) = load_data(&dataset_dir(cfg, &data))?;
    let skel = WholeBodySkeleton::default_whole_body();
    let teacher = load_model(&teacher_dir, &skel)?;
    let mut scfg = DenoiserConfig::student(teacher.cfg.part);
    scfg.condition_upper_body = teacher.cfg.condition_upper_body;
    scfg.identity_conditioning = teacher.cfg.identity_conditioning;
    let scfg = shape.apply(scfg);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    if let Some(l) = lr {
        tcfg.lr = l;
    }
    if let Some(w) = window {
        tcfg.window = w;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student = Denoiser::new(scfg, &skel, &mut rng).map_err(|e| e.to_string())?;
    let precision = cfg.precision()?;
    eprintln!("distilling {:?} teacher into a one-step student for {} steps ...", teacher.cfg.part, tcfg.steps);
    let curve = sds_distill(&teacher, &student, &skel, &dataset, &cfg.schedule(), &tcfg, precision)
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    student.save(&out, DType::from(precision)).map_err(|e| e.to_string())?;
    write_loss_curve(&out.join("losses.tsv"), &curve)?;
    eprintln!("student saved to {}", out.display());
    Ok(())
}

fn cmd_register_identity(
    cfg: &RunConfig,
    out: PathBuf,
    id: String,
    poses: usize,
    views: usize,
    iters: Option<usize>,
) -> Result<(), String> {
    if views < 2 {
        return Err("registration needs at least 2 views per pose".into());
    }
    let skel = WholeBodySkeleton::default_whole_body();
    let identity = sample_identity(&id, cfg.seed, &skel);
    let scaled = skel.scaled(&identity.bone_scale);
    let frames = (poses * 10).max(2);
    let motion = egomotion::observe::generate_motion(&skel, &identity, cfg.seed.wrapping_add(1), frames, cfg.gen.fps);
    // a ring of noiseless calibrated cameras around the subject
    let cams: Vec<CameraPose> = (0..views)
        .map(|v| {
            let ang = 2.0 * std::f64::consts::PI * v as f64 / views as f64;
            look_at(Vector3::new(2.2 * ang.cos(), 2.2 * ang.sin(), 1.0 + 0.1 * v as f64), Vector3::new(0.0, 0.0, 0.9))
        })
        .collect();
    let mut obs = Vec::with_capacity(poses);
    for p in 0..poses {
        let t = p * (frames - 1) / poses.max(1);
        let reg_views = cams
            .iter()
            .map(|cam| {
                let kp2d = (0..skel.num_joints())
                    .map(|j| {
                        let q = cam.world_to_camera(&motion.joint(t, j));
                        [cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy]
                    })
                    .collect();
                RegView { camera: cam.clone(), kp2d }
            })
            .collect();
        obs.push(reg_views);
    }
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let encoder = IdentityEncoder::new("reg", skel.num_joints(), D_ID, &mut params, &mut rng);
    let rcfg = RegistrationConfig { iters: iters.unwrap_or(6000), ..Default::default() };
    eprintln!("registering {} poses x {} views over {} iterations ...", poses, views, rcfg.iters);
    let res = register_identity(&skel, &obs, scaled.rest_height(), &rcfg, &encoder).map_err(|e| e.to_string())?;
    let n = skel.num_joints();
    let tensors = vec![
        NamedTensor {
            name: "exemplars".to_string(),
            shape: vec![res.prior.num_exemplars, n * 3],
            values: res.prior.exemplars.clone(),
            dtype: DType::F64,
        },
        NamedTensor { name: "bone_scales".to_string(), shape: vec![n], values: res.bone_scales.clone(), dtype: DType::F64 },
    ];
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        }
    }
    write_tensors(&out, &tensors).map_err(|e| e.to_string())?;
    let mean_err: f64 = res
        .bone_scales
        .iter()
        .zip(&identity.bone_scale)
        .map(|(f, t)| (f - t).abs() / t)
        .sum::<f64>()
        / n as f64;
    eprintln!(
        "final loss {:.3e}, mean relative bone-scale error {:.2}%; prior saved to {}",
        res.final_loss,
        100.0 * mean_err,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    body: PathBuf,
    hand: Option<PathBuf>,
    mode: ModeArg,
    steps: usize,
    hand_steps: Option<usize>,
    seq_idx: usize,
    prior_path: Option<PathBuf>,
    stream: bool,
    out: PathBuf,
) -> Result<(), String> {
    let (dataset, fps) = load_data(&dataset_dir(cfg, &data))?;
    let seq = dataset.get(seq_idx).ok_or_else(|| format!("sequence {} out of range (dataset has {})", seq_idx, dataset.len()))?;
    let est = build_estimator(cfg, &body, &hand, mode, steps, hand_steps.unwrap_or(steps), fps)?;
    let prior = resolve_prior(&prior_path, seq, &est)?;
    let motion = if stream {
        let mut session = est.start_stream(cfg.seed, prior.as_ref()).map_err(|e| e.to_string())?;
        let mut frames = Vec::with_capacity(seq.obs.len() * est.skel.num_joints() * 3);
        for frame in &seq.obs {
            frames.extend(session.push(frame));
        }
        egomotion::skeleton::MotionSequence::from_frames(frames, est.skel.num_joints(), fps)
    } else {
        est.estimate(&seq.obs, cfg.seed, prior.as_ref()).map_err(|e| e.to_string())?
    };
    save_motion(&out, &motion).map_err(|e| e.to_string())?;
    let err = mpjpe(&motion, &seq.motion);
    eprintln!(
        "estimated {} frames ({}); whole-body MPJPE vs ground truth {:.1} mm; motion saved to {}",
        motion.len(),
        if stream { "streaming" } else { "offline" },
        err,
        out.display()
    );
    Ok(())
}

fn cmd_eval(pred_path: PathBuf, gt_path: PathBuf, report: PathBuf) -> Result<(), String> {
    let pred = load_motion(&pred_path).map_err(|e| e.to_string())?;
    let gt = load_motion(&gt_path).map_err(|e| e.to_string())?;
    if pred.num_joints != gt.num_joints || pred.len() != gt.len() {
        return Err(format!(
            "shape mismatch: prediction {}x{}, ground truth {}x{}",
            pred.len(),
            pred.num_joints,
            gt.len(),
            gt.num_joints
        ));
    }
    let skel = WholeBodySkeleton::default_whole_body();
    let full_skeleton = pred.num_joints == skel.num_joints();
    let mp = mpjpe(&pred, &gt);
    let (pa, skipped) = pa_mpjpe_with_flags(&pred, &gt);
    let mut lines = vec![
        format!("{:<16} {:>12}", "metric", "value"),
        format!("{:<16} {:>12.3}", "mpjpe-mm", mp),
        format!("{:<16} {:>12.3}", "pa-mpjpe-mm", pa),
    ];
    let mut toml_map = toml::map::Map::new();
    toml_map.insert("mpjpe_mm".into(), toml::Value::Float(mp));
    toml_map.insert("pa_mpjpe_mm".into(), toml::Value::Float(pa));
    toml_map.insert("pa_frames_skipped".into(), toml::Value::Integer(skipped as i64));
    if full_skeleton {
        let fs = foot_skate(&pred, &skel);
        let be = bone_err(&pred, &gt, &skel);
        lines.push(format!("{:<16} {:>12.3}", "foot-skate-mm", fs));
        lines.push(format!("{:<16} {:>12.3}", "bone-err-mm", be));
        toml_map.insert("foot_skate_mm".into(), toml::Value::Float(fs));
        toml_map.insert("bone_err_mm".into(), toml::Value::Float(be));
    }
    if skipped > 0 {
        lines.push(format!("({} degenerate frames skipped in PA alignment)", skipped));
    }
    let text = lines.join("\n") + "\n";
    std::fs::write(&report, &text).map_err(|e| e.to_string())?;
    let toml_path = report.with_extension("toml");
    std::fs::write(&toml_path, toml::to_string_pretty(&toml::Value::Table(toml_map)).unwrap())
        .map_err(|e| e.to_string())?;
    print!("{}", text);
    eprintln!("report written to {} and {}", report.display(), toml_path.display());
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    body: PathBuf,
    hand: Option<PathBuf>,
    mode: ModeArg,
    steps: usize,
    frames: usize,
    warmup: usize,
    offline: bool,
) -> Result<(), String> {
    let est = build_estimator(cfg, &body, &hand, mode, steps, steps, cfg.gen.fps)?;
    let skel = WholeBodySkeleton::default_whole_body();
    let data = synth_dataset(&skel, &cfg.rig, 1, frames, cfg.gen.fps, 0, cfg.seed.wrapping_add(17));
    let obs = &data[0].obs;
    let stats = if offline {
        bench_offline_latency(&est, obs, cfg.seed, None, 3)
    } else {
        bench_stream_latency(&est, obs, cfg.seed, None, warmup)
    };
    println!(
        "{} latency over {} frames: p50 {:.3} ms, p95 {:.3} ms, max {:.3} ms",
        if offline { "offline per-frame" } else { "streaming per-frame" },
        stats.frames,
        stats.p50_ms,
        stats.p95_ms,
        stats.max_ms
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Selftest: cross-module oracles
// ---------------------------------------------------------------------------

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| <f64 as From<f64>>::from(StandardNormal.sample(rng))).collect()
}

fn selftest_attention() -> Result<(), String> {
    use egomotion::attention::{brute_force_attention, windowed_relative_attention, RelTemporalLayer};
    use egomotion::tensor::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..50 {
        // ws >= 1: the ws = 0 fast path returns the value projection without
        // the eps-regularized division the oracle performs
        let (d, heads, ws, t) = (8usize, 2usize, 1 + case % 5, 2 + case % 7);
        let mut params = ParamSet::new();
        let layer = RelTemporalLayer::new("st", d, heads, ws, 10000.0, &mut params, &mut rng);
        let x = randn(&mut rng, t * d);
        let g = Graph::new(Precision::F64);
        let got = windowed_relative_attention(&layer, &g, &g.constant(&[t, d], &x)).values();
        let want = brute_force_attention(&layer, &x, t);
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / (a.abs() + b.abs() + 1e-12);
            if rel > 1e-10 {
                return Err(format!("case {}: {} vs brute force {}", case, a, b));
            }
        }
    }
    Ok(())
}

fn selftest_ddim() -> Result<(), String> {
    use egomotion::diffusion::{ddim_step, diffuse_forward, timestep_grid};
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x0 = randn(&mut rng, 48);
    let eps = randn(&mut rng, 48);
    let mut x = diffuse_forward(&x0, sched.k_max, &eps, &sched);
    for (k, k_prev) in timestep_grid(sched.k_max, 10) {
        x = ddim_step(&x, &x0, k, k_prev, &sched);
    }
    for (a, b) in x.iter().zip(&x0) {
        let rel = (a - b).abs() / (a.abs() + b.abs() + 1e-12);
        if rel > 1e-5 {
            return Err(format!("oracle DDIM chain missed x0: {} vs {}", a, b));
        }
    }
    Ok(())
}

fn selftest_gradients() -> Result<(), String> {
    use egomotion::tensor::finite_difference_check;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = randn(&mut rng, 12);
    let w = randn(&mut rng, 16);
    let checks: Vec<(&str, Box<dyn Fn(&egomotion::tensor::Graph, &egomotion::tensor::Value) -> egomotion::tensor::Value>)> = vec![
        ("matmul+elu", {
            let w = w.clone();
            Box::new(move |g, v| {
                let m = g.constant(&[4, 4], &w);
                v.matmul(&m).elu().sqr().sum()
            })
        }),
        // swish breaks the norm's scale invariance so the gradient is
        // non-degenerate
        ("layer_norm", Box::new(|_g, v| v.layer_norm(1e-5).swish().sum())),
        ("swish", Box::new(|_g, v| v.swish().sum())),
    ];
    for (name, f) in checks {
        let err = finite_difference_check(|g, v| f(g, v), Precision::F64, &[3, 4], &x, 1e-5);
        if err > 1e-6 {
            return Err(format!("{} gradient error {:.3e}", name, err));
        }
    }
    Ok(())
}

fn selftest_procrustes() -> Result<(), String> {
    use egomotion::eval::pa_mpjpe;
    use egomotion::skeleton::{axis_angle_to_matrix, MotionSequence};
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let vals = randn(&mut rng, 4 * 9 * 3);
    let gt = MotionSequence::from_frames(vals, 9, 30.0);
    let r = axis_angle_to_matrix(&Vector3::new(0.7, -0.2, 1.1));
    let tr = Vector3::new(0.5, -1.0, 0.25);
    let mut pred = gt.clone();
    for t in 0..4 {
        for j in 0..9 {
            pred.set_joint(t, j, r * gt.joint(t, j) * 0.8 + tr);
        }
    }
    let pa = pa_mpjpe(&pred, &gt);
    if pa > 1e-6 {
        return Err(format!("PA-MPJPE {} mm under a pure similarity transform", pa));
    }
    Ok(())
}

fn cmd_selftest() -> ExitCode {
    let suites: Vec<(&str, fn() -> Result<(), String>)> = vec![
        ("attention brute-force oracle", selftest_attention),
        ("DDIM oracle chain", selftest_ddim),
        ("gradient finite differences", selftest_gradients),
        ("Procrustes alignment oracle", selftest_procrustes),
    ];
    let mut failed = 0usize;
    for (name, f) in suites {
        match f() {
            Ok(()) => println!("PASS  {}", name),
            Err(msg) => {
                println!("FAIL  {}: {}", name, msg);
                failed += 1;
            }
        }
    }
    if failed == 0 {
        println!("selftest: all suites passed");
        ExitCode::SUCCESS
    } else {
        println!("selftest: {} suite(s) failed", failed);
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    log_config(&cfg);
    let result = match cli.command {
        Command::GenData { out, identities, frames, exemplars } => cmd_gen_data(&cfg, out, identities, frames, exemplars),
        Command::Train { data, out, part, role, regression, upper_body, identity, steps, lr, window, shape } => {
            cmd_train(&cfg, data, out, part, role, regression, upper_body, identity, steps, lr, window, &shape)
        }
        Command::Distill { data, teacher, out, steps, lr, window, shape } => {
            cmd_distill(&cfg, data, teacher, out, steps, lr, window, &shape)
        }
        Command::RegisterIdentity { out, id, poses, views, iters } => cmd_register_identity(&cfg, out, id, poses, views, iters),
        Command::Infer { data, body, hand, mode, steps, hand_steps, seq, prior, stream, out } => {
            cmd_infer(&cfg, data, body, hand, mode, steps, hand_steps, seq, prior, stream, out)
        }
        Command::Eval { pred, gt, report } => cmd_eval(pred, gt, report),
        Command::Bench { body, hand, mode, steps, frames, warmup, offline } => {
            cmd_bench(&cfg, body, hand, mode, steps, frames, warmup, offline)
        }
        Command::Selftest => return cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
