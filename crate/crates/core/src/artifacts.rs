//! On-disk artifacts: synthetic datasets and motion sequences, stored in
//! the flat named-tensor container plus a small TOML manifest.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observe::{CameraPose, FrameObservation, ViewObservation};
use crate::skeleton::MotionSequence;
use crate::tensor::{read_tensors, write_tensors, ContainerError, DType, NamedTensor};
use crate::train::TrainSequence;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
}

/// Columns of one per-frame camera row: row-major 3x3 rotation, translation,
/// fx, fy, cx, cy, width, height.
const CAM_COLS: usize = 18;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    num_sequences: usize,
    num_joints: usize,
    num_exemplars: usize,
    fps: f64,
}

fn tensor(name: String, shape: Vec<usize>, values: Vec<f64>) -> NamedTensor {
    NamedTensor { name, shape, values, dtype: DType::F64 }
}

fn camera_row(cam: &CameraPose) -> [f64; CAM_COLS] {
    let mut row = [0.0; CAM_COLS];
    for r in 0..3 {
        for c in 0..3 {
            row[r * 3 + c] = cam.rotation[(r, c)];
        }
    }
    for c in 0..3 {
        row[9 + c] = cam.translation[c];
    }
    row[12] = cam.fx;
    row[13] = cam.fy;
    row[14] = cam.cx;
    row[15] = cam.cy;
    row[16] = cam.width;
    row[17] = cam.height;
    row
}

fn camera_from_row(row: &[f64]) -> CameraPose {
    CameraPose {
        rotation: Matrix3::from_fn(|r, c| row[r * 3 + c]),
        translation: Vector3::new(row[9], row[10], row[11]),
        fx: row[12],
        fy: row[13],
        cx: row[14],
        cy: row[15],
        width: row[16],
        height: row[17],
    }
}

/// Writes a dataset as `dataset.tns` + `dataset.toml` in `dir`.
pub fn save_dataset(dir: &Path, data: &[TrainSequence], fps: f64) -> Result<(), ArtifactError> {
    std::fs::create_dir_all(dir)?;
    let num_joints = data.first().map(|s| s.motion.num_joints).unwrap_or(0);
    let mut tensors = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        let t = seq.motion.len();
        let n = seq.motion.num_joints;
        assert_eq!(n, num_joints, "dataset mixes joint counts");
        assert_eq!(seq.obs.len(), t, "observation/motion length mismatch");
        tensors.push(tensor(format!("seq{}.motion", i), vec![t, n * 3], seq.motion.frames.clone()));
        tensors.push(tensor(
            format!("seq{}.exemplars", i),
            vec![seq.num_exemplars, n * 3],
            seq.exemplars.clone(),
        ));
        for (v, pick) in [("l", 0usize), ("r", 1usize)] {
            let mut cams = Vec::with_capacity(t * CAM_COLS);
            let mut kp = Vec::with_capacity(t * n * 2);
            let mut conf = Vec::with_capacity(t * n);
            for frame in &seq.obs {
                let view = frame.views()[pick];
                cams.extend_from_slice(&camera_row(&view.camera));
                for p in &view.kp2d {
                    kp.extend_from_slice(p);
                }
                conf.extend_from_slice(&view.conf);
            }
            tensors.push(tensor(format!("seq{}.cam.{}", i, v), vec![t, CAM_COLS], cams));
            tensors.push(tensor(format!("seq{}.kp2d.{}", i, v), vec![t, n * 2], kp));
            tensors.push(tensor(format!("seq{}.conf.{}", i, v), vec![t, n], conf));
        }
    }
    write_tensors(&dir.join("dataset.tns"), &tensors)?;
    let manifest = DatasetManifest {
        num_sequences: data.len(),
        num_joints,
        num_exemplars: data.first().map(|s| s.num_exemplars).unwrap_or(0),
        fps,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| ArtifactError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("dataset.toml"), text)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]; returns sequences and fps.
pub fn load_dataset(dir: &Path) -> Result<(Vec<TrainSequence>, f64), ArtifactError> {
    let text = std::fs::read_to_string(dir.join("dataset.toml"))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| ArtifactError::Manifest(e.to_string()))?;
    let tensors = read_tensors(&dir.join("dataset.tns"))?;
    let find = |name: &str| -> Result<&NamedTensor, ArtifactError> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ArtifactError::Malformed(format!("missing tensor {}", name)))
    };
    let n = manifest.num_joints;
    let mut out = Vec::with_capacity(manifest.num_sequences);
    for i in 0..manifest.num_sequences {
        let motion_t = find(&format!("seq{}.motion", i))?;
        if motion_t.shape.len() != 2 || motion_t.shape[1] != n * 3 {
            return Err(ArtifactError::Malformed(format!("seq{}.motion has shape {:?}", i, motion_t.shape)));
        }
        let t = motion_t.shape[0];
        let motion = MotionSequence::from_frames(motion_t.values.clone(), n, manifest.fps);
        let exemplars = find(&format!("seq{}.exemplars", i))?.values.clone();
        let mut views: Vec<Vec<ViewObservation>> = Vec::with_capacity(2);
        for v in ["l", "r"] {
            let cams = find(&format!("seq{}.cam.{}", i, v))?;
            let kp = find(&format!("seq{}.kp2d.{}", i, v))?;
            let conf = find(&format!("seq{}.conf.{}", i, v))?;
            let mut rows = Vec::with_capacity(t);
            for ti in 0..t {
                let camera = camera_from_row(&cams.values[ti * CAM_COLS..(ti + 1) * CAM_COLS]);
                let kp2d = (0..n)
                    .map(|j| {
                        let o = ti * n * 2 + j * 2;
                        [kp.values[o], kp.values[o + 1]]
                    })
                    .collect();
                let c = conf.values[ti * n..(ti + 1) * n].to_vec();
                rows.push(ViewObservation { camera, kp2d, conf: c });
            }
            views.push(rows);
        }
        let right = views.pop().unwrap();
        let left = views.pop().unwrap();
        let obs = left
            .into_iter()
            .zip(right)
            .map(|(l, r)| FrameObservation { left: l, right: r })
            .collect();
        out.push(TrainSequence {
            motion,
            obs,
            exemplars,
            num_exemplars: manifest.num_exemplars,
        });
    }
    Ok((out, manifest.fps))
}

/// Writes a motion sequence to a single container file.
pub fn save_motion(path: &Path, motion: &MotionSequence) -> Result<(), ArtifactError> {
    let t = motion.len();
    let tensors = vec![
        tensor("motion".to_string(), vec![t, motion.num_joints * 3], motion.frames.clone()),
        tensor("fps".to_string(), vec![1], vec![motion.fps]),
        tensor("num_joints".to_string(), vec![1], vec![motion.num_joints as f64]),
    ];
    write_tensors(path, &tensors)?;
    Ok(())
}

/// Loads a motion sequence written by [`save_motion`].
pub fn load_motion(path: &Path) -> Result<MotionSequence, ArtifactError> {
    let tensors = read_tensors(path)?;
    let find = |name: &str| -> Result<&NamedTensor, ArtifactError> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ArtifactError::Malformed(format!("missing tensor {}", name)))
    };
    let frames = find("motion")?.values.clone();
    let fps = find("fps")?.values[0];
    let num_joints = find("num_joints")?.values[0] as usize;
    if num_joints == 0 || frames.len() % (num_joints * 3) != 0 {
        return Err(ArtifactError::Malformed("motion length not divisible by joint count".into()));
    }
    Ok(MotionSequence::from_frames(frames, num_joints, fps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::StereoRig;
    use crate::skeleton::WholeBodySkeleton;
    use crate::train::synth_dataset;

    #[test]
    fn dataset_roundtrip_is_bitwise() {
        let skel = WholeBodySkeleton::default_whole_body();
        let data = synth_dataset(&skel, &StereoRig::default(), 2, 5, 30.0, 3, 42);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data, 30.0).unwrap();
        let (back, fps) = load_dataset(dir.path()).unwrap();
        assert_eq!(fps, 30.0);
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.motion, b.motion);
            assert_eq!(a.exemplars, b.exemplars);
            assert_eq!(a.num_exemplars, b.num_exemplars);
            assert_eq!(a.obs.len(), b.obs.len());
            for (fa, fb) in a.obs.iter().zip(&b.obs) {
                for (va, vb) in fa.views().iter().zip(fb.views()) {
                    assert_eq!(va.kp2d, vb.kp2d);
                    assert_eq!(va.conf, vb.conf);
                    assert_eq!(va.camera.rotation, vb.camera.rotation);
                    assert_eq!(va.camera.translation, vb.camera.translation);
                    assert_eq!(
                        (va.camera.fx, va.camera.fy, va.camera.cx, va.camera.cy),
                        (vb.camera.fx, vb.camera.fy, vb.camera.cx, vb.camera.cy)
                    );
                }
            }
        }
    }

    #[test]
    fn motion_roundtrip_is_bitwise() {
        let motion = MotionSequence::from_frames((0..2 * 47 * 3).map(|i| i as f64 * 0.01).collect(), 47, 30.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tns");
        save_motion(&path, &motion).unwrap();
        assert_eq!(load_motion(&path).unwrap(), motion);
    }

    #[test]
    fn load_reports_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let skel = WholeBodySkeleton::default_whole_body();
        let data = synth_dataset(&skel, &StereoRig::default(), 1, 3, 30.0, 2, 1);
        save_dataset(dir.path(), &data, 30.0).unwrap();
        // corrupt the manifest to claim a second sequence
        let manifest = std::fs::read_to_string(dir.path().join("dataset.toml")).unwrap();
        std::fs::write(dir.path().join("dataset.toml"), manifest.replace("num_sequences = 1", "num_sequences = 2")).unwrap();
        match load_dataset(dir.path()) {
            Err(ArtifactError::Malformed(msg)) => assert!(msg.contains("seq1.motion")),
            other => panic!("unexpected: {:?}", other.map(|_| ())),
        }
    }
}
