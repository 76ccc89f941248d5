//! Dataset persistence: one directory per split, one tensor-container file
//! per sequence plus a structured-text sidecar for metadata.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CameraPose, FrameObservation, Identity, StereoRig, ViewObservation};
use crate::skeleton::MotionSequence;
use crate::tensor::{read_tensors, write_tensors, ContainerError, DType, NamedTensor};

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub motion: MotionSequence,
    pub observation: Vec<FrameObservation>,
    pub identity: Identity,
    pub rig: StereoRig,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: ContainerError,
    },
    #[error("record {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    fps: f64,
    num_joints: usize,
    identity: Identity,
    rig: StereoRig,
}

fn view_tensors(prefix: &str, obs: &[FrameObservation], pick: impl Fn(&FrameObservation) -> &ViewObservation) -> Vec<NamedTensor> {
    let t = obs.len();
    let n = if t > 0 { pick(&obs[0]).kp2d.len() } else { 0 };
    let mut kp = Vec::with_capacity(t * n * 2);
    let mut conf = Vec::with_capacity(t * n);
    let mut rot = Vec::with_capacity(t * 9);
    let mut trans = Vec::with_capacity(t * 3);
    for f in obs {
        let v = pick(f);
        for j in 0..n {
            kp.push(v.kp2d[j][0]);
            kp.push(v.kp2d[j][1]);
            conf.push(v.conf[j]);
        }
        for r in 0..3 {
            for c in 0..3 {
                rot.push(v.camera.rotation[(r, c)]);
            }
        }
        trans.extend_from_slice(v.camera.translation.as_slice());
    }
    vec![
        NamedTensor { name: format!("kp2d_{}", prefix), shape: vec![t, n, 2], values: kp, dtype: DType::F64 },
        NamedTensor { name: format!("conf_{}", prefix), shape: vec![t, n], values: conf, dtype: DType::F64 },
        NamedTensor { name: format!("cam_rot_{}", prefix), shape: vec![t, 3, 3], values: rot, dtype: DType::F64 },
        NamedTensor { name: format!("cam_trans_{}", prefix), shape: vec![t, 3], values: trans, dtype: DType::F64 },
    ]
}

/// Writes records as `seq_NNNN.bin` + `seq_NNNN.toml` under `dir`.
pub fn write_split(dir: &Path, records: &[SequenceRecord]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    for (i, rec) in records.iter().enumerate() {
        let mut tensors = vec![NamedTensor {
            name: "motion".to_string(),
            shape: vec![rec.motion.len(), rec.motion.num_joints, 3],
            values: rec.motion.frames.clone(),
            dtype: DType::F64,
        }];
        tensors.extend(view_tensors("l", &rec.observation, |f| &f.left));
        tensors.extend(view_tensors("r", &rec.observation, |f| &f.right));
        write_tensors(&dir.join(format!("seq_{:04}.bin", i)), &tensors)
            .map_err(|source| DatasetError::Record { index: i, source })?;
        let sidecar = Sidecar {
            fps: rec.motion.fps,
            num_joints: rec.motion.num_joints,
            identity: rec.identity.clone(),
            rig: rec.rig.clone(),
        };
        let text = toml::to_string_pretty(&sidecar)
            .map_err(|e| DatasetError::Malformed { index: i, reason: e.to_string() })?;
        fs::write(dir.join(format!("seq_{:04}.toml", i)), text)?;
    }
    Ok(())
}

fn tensor<'a>(tensors: &'a [NamedTensor], name: &str, index: usize) -> Result<&'a NamedTensor, DatasetError> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| DatasetError::Malformed { index, reason: format!("missing tensor {}", name) })
}

fn read_view(tensors: &[NamedTensor], prefix: &str, rig: &StereoRig, index: usize) -> Result<Vec<ViewObservation>, DatasetError> {
    let kp = tensor(tensors, &format!("kp2d_{}", prefix), index)?;
    let conf = tensor(tensors, &format!("conf_{}", prefix), index)?;
    let rot = tensor(tensors, &format!("cam_rot_{}", prefix), index)?;
    let trans = tensor(tensors, &format!("cam_trans_{}", prefix), index)?;
    let (t, n) = (kp.shape[0], kp.shape[1]);
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let mut kp2d = Vec::with_capacity(n);
        let mut confs = Vec::with_capacity(n);
        for j in 0..n {
            kp2d.push([kp.values[(f * n + j) * 2], kp.values[(f * n + j) * 2 + 1]]);
            confs.push(conf.values[f * n + j]);
        }
        let r = Matrix3::from_row_slice(&rot.values[f * 9..(f + 1) * 9]);
        let tr = Vector3::from_row_slice(&trans.values[f * 3..(f + 1) * 3]);
        out.push(ViewObservation {
            camera: CameraPose {
                rotation: r,
                translation: tr,
                fx: rig.fx,
                fy: rig.fy,
                cx: rig.cx,
                cy: rig.cy,
                width: rig.width,
                height: rig.height,
            },
            kp2d,
            conf: confs,
        });
    }
    Ok(out)
}

/// Reads every `seq_*.bin` under `dir`, sorted by filename.
pub fn read_split(dir: &Path) -> Result<Vec<SequenceRecord>, DatasetError> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "bin").unwrap_or(false))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for (index, bin_path) in files.iter().enumerate() {
        let tensors = read_tensors(bin_path).map_err(|source| DatasetError::Record { index, source })?;
        let toml_path = bin_path.with_extension("toml");
        let sidecar: Sidecar = toml::from_str(&fs::read_to_string(&toml_path)?)
            .map_err(|e| DatasetError::Malformed { index, reason: e.to_string() })?;
        let motion_t = tensor(&tensors, "motion", index)?;
        if motion_t.shape.len() != 3 || motion_t.shape[1] != sidecar.num_joints {
            return Err(DatasetError::Malformed { index, reason: format!("bad motion shape {:?}", motion_t.shape) });
        }
        let motion = MotionSequence::from_frames(motion_t.values.clone(), sidecar.num_joints, sidecar.fps);
        let left = read_view(&tensors, "l", &sidecar.rig, index)?;
        let right = read_view(&tensors, "r", &sidecar.rig, index)?;
        if left.len() != motion.len() || right.len() != motion.len() {
            return Err(DatasetError::Malformed { index, reason: "observation/motion length mismatch".to_string() });
        }
        let observation = left
            .into_iter()
            .zip(right)
            .map(|(left, right)| FrameObservation { left, right })
            .collect();
        out.push(SequenceRecord {
            motion,
            observation,
            identity: sidecar.identity,
            rig: sidecar.rig,
        });
    }
    Ok(out)
}
