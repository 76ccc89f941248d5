//! Whole-body kinematic data model: joint tree, body/hand partitions,
//! forward kinematics, rotation representations.
//!
//! The default skeleton has 47 keypoints: a 17-joint body plus two 15-joint
//! hands whose finger chains are parented at the body wrists.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SKELETON_FORMAT_VERSION: u32 = 1;

pub const NUM_JOINTS: usize = 47;
pub const NUM_BODY: usize = 17;
pub const NUM_HAND: usize = 15;
pub const NUM_UPPER: usize = 7;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("joint {child} has parent {parent}, breaking topological order")]
    BadTopology { child: usize, parent: usize },
    #[error("bone length of joint {0} is not positive")]
    BadBoneLength(usize),
    #[error("pose has {pose} joints, skeleton has {skeleton}")]
    JointCountMismatch { pose: usize, skeleton: usize },
    #[error("6d rotation has degenerate columns")]
    Degenerate6d,
    #[error("skeleton file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// None only for the root (pelvis).
    pub parent: Option<usize>,
    /// Rest offset from the parent, meters.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WholeBodySkeleton {
    pub version: u32,
    pub joints: Vec<Joint>,
    pub body: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    pub upper_body: Vec<usize>,
}

/// Per-joint local rotations (axis-angle, radians) plus root translation.
#[derive(Debug, Clone)]
pub struct PoseAngles {
    pub rotations: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl PoseAngles {
    pub fn rest(num_joints: usize) -> PoseAngles {
        PoseAngles {
            rotations: vec![Vector3::zeros(); num_joints],
            root_translation: Vector3::zeros(),
        }
    }
}

/// T x N_J x 3 keypoint trajectories, world frame, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<f64>,
    pub num_joints: usize,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(num_frames: usize, num_joints: usize, fps: f64) -> MotionSequence {
        assert!(num_frames >= 1, "motion sequence needs at least one frame");
        MotionSequence {
            frames: vec![0.0; num_frames * num_joints * 3],
            num_joints,
            fps,
        }
    }

    pub fn from_frames(frames: Vec<f64>, num_joints: usize, fps: f64) -> MotionSequence {
        assert_eq!(frames.len() % (num_joints * 3), 0);
        MotionSequence {
            frames,
            num_joints,
            fps,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len() / (self.num_joints * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        let i = (t * self.num_joints + j) * 3;
        Vector3::new(self.frames[i], self.frames[i + 1], self.frames[i + 2])
    }

    pub fn set_joint(&mut self, t: usize, j: usize, p: Vector3<f64>) {
        let i = (t * self.num_joints + j) * 3;
        self.frames[i] = p.x;
        self.frames[i + 1] = p.y;
        self.frames[i + 2] = p.z;
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.num_joints * 3;
        &self.frames[t * w..(t + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }
}

impl WholeBodySkeleton {
    /// The default 47-keypoint whole-body skeleton (z up, x right, y forward).
    pub fn default_whole_body() -> WholeBodySkeleton {
        let mut joints: Vec<Joint> = Vec::with_capacity(NUM_JOINTS);
        fn push(joints: &mut Vec<Joint>, name: &str, parent: Option<usize>, offset: [f64; 3]) {
            joints.push(Joint {
                name: name.to_string(),
                parent,
                offset,
            });
        }
        // body, 17 joints
        push(&mut joints, "pelvis", None, [0.0, 0.0, 0.0]); // 0
        push(&mut joints, "spine", Some(0), [0.0, 0.0, 0.15]); // 1
        push(&mut joints, "chest", Some(1), [0.0, 0.0, 0.15]); // 2
        push(&mut joints, "neck", Some(2), [0.0, 0.0, 0.15]); // 3
        push(&mut joints, "head", Some(3), [0.0, 0.0, 0.12]); // 4
        // arms rest hanging down, slightly forward, so the hands sit in the
        // field of view of a head-mounted downward-tilted camera
        push(&mut joints, "l_shoulder", Some(2), [0.18, 0.0, 0.10]); // 5
        push(&mut joints, "l_elbow", Some(5), [0.02, 0.06, -0.27]); // 6
        push(&mut joints, "l_wrist", Some(6), [0.01, 0.06, -0.24]); // 7
        push(&mut joints, "r_shoulder", Some(2), [-0.18, 0.0, 0.10]); // 8
        push(&mut joints, "r_elbow", Some(8), [-0.02, 0.06, -0.27]); // 9
        push(&mut joints, "r_wrist", Some(9), [-0.01, 0.06, -0.24]); // 10
        push(&mut joints, "l_hip", Some(0), [0.10, 0.0, -0.05]); // 11
        push(&mut joints, "l_knee", Some(11), [0.0, 0.0, -0.42]); // 12
        push(&mut joints, "l_ankle", Some(12), [0.0, 0.0, -0.40]); // 13
        push(&mut joints, "r_hip", Some(0), [-0.10, 0.0, -0.05]); // 14
        push(&mut joints, "r_knee", Some(14), [0.0, 0.0, -0.42]); // 15
        push(&mut joints, "r_ankle", Some(15), [0.0, 0.0, -0.40]); // 16
        // hands, 15 joints each; finger roots parented at the body wrists
        // fingers point down from the hanging wrist; x spreads them apart
        let fingers: [(&str, [[f64; 3]; 3]); 5] = [
            ("thumb", [[0.03, 0.02, -0.01], [0.02, 0.015, -0.02], [0.015, 0.01, -0.02]]),
            ("index", [[0.025, 0.01, -0.09], [0.0, 0.0, -0.035], [0.0, 0.0, -0.025]]),
            ("middle", [[0.008, 0.01, -0.095], [0.0, 0.0, -0.04], [0.0, 0.0, -0.028]]),
            ("ring", [[-0.01, 0.01, -0.09], [0.0, 0.0, -0.035], [0.0, 0.0, -0.025]]),
            ("pinky", [[-0.025, 0.01, -0.08], [0.0, 0.0, -0.03], [0.0, 0.0, -0.02]]),
        ];
        for (side, wrist, sign) in [("l", 7usize, 1.0f64), ("r", 10, -1.0)] {
            for (fname, offs) in &fingers {
                let mut parent = wrist;
                for (seg, off) in offs.iter().enumerate() {
                    let idx = joints.len();
                    push(
                        &mut joints,
                        &format!("{}_{}{}", side, fname, seg + 1),
                        Some(parent),
                        [sign * off[0], off[1], off[2]],
                    );
                    parent = idx;
                }
            }
        }
        let skel = WholeBodySkeleton {
            version: SKELETON_FORMAT_VERSION,
            joints,
            body: (0..NUM_BODY).collect(),
            left_hand: (NUM_BODY..NUM_BODY + NUM_HAND).collect(),
            right_hand: (NUM_BODY + NUM_HAND..NUM_JOINTS).collect(),
            // neck, shoulders, elbows, wrists
            upper_body: vec![3, 5, 6, 7, 8, 9, 10],
        };
        skel.validate().expect("default skeleton is valid");
        skel
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Bone length of a non-root joint; 0.0 for the root.
    pub fn bone_length(&self, j: usize) -> f64 {
        let o = &self.joints[j].offset;
        (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        for (i, j) in self.joints.iter().enumerate() {
            match j.parent {
                None => {}
                Some(p) => {
                    if p >= i {
                        return Err(SkeletonError::BadTopology { child: i, parent: p });
                    }
                    if self.bone_length(i) <= 0.0 {
                        return Err(SkeletonError::BadBoneLength(i));
                    }
                }
            }
        }
        // body and hands are disjoint, upper body is a subset of the body
        for h in self.left_hand.iter().chain(&self.right_hand) {
            if self.body.contains(h) {
                return Err(SkeletonError::Parse(format!("joint {} is in both body and hand subsets", h)));
            }
        }
        for u in &self.upper_body {
            if !self.body.contains(u) {
                return Err(SkeletonError::Parse(format!("upper-body joint {} is not a body joint", u)));
            }
        }
        Ok(())
    }

    /// Skeleton with every bone offset multiplied by a per-joint scale.
    pub fn scaled(&self, bone_scale: &[f64]) -> WholeBodySkeleton {
        assert_eq!(bone_scale.len(), self.joints.len());
        let mut out = self.clone();
        for (j, s) in out.joints.iter_mut().zip(bone_scale) {
            for c in j.offset.iter_mut() {
                *c *= s;
            }
        }
        out
    }

    /// Vertical extent of the rest pose, meters.
    pub fn rest_height(&self) -> f64 {
        let rest = forward_kinematics(self, &PoseAngles::rest(self.num_joints()));
        let zs: Vec<f64> = (0..self.num_joints()).map(|j| rest.joint(0, j).z).collect();
        let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Symmetric skeleton-edge adjacency with self-loops, degree-normalized
    /// (D^-1/2 (A+I) D^-1/2), restricted to the given joint subset.
    pub fn normalized_adjacency(&self, subset: &[usize]) -> Vec<f64> {
        let n = subset.len();
        let pos_of = |j: usize| subset.iter().position(|&s| s == j);
        let mut a = vec![0.0; n * n];
        for (i, &j) in subset.iter().enumerate() {
            a[i * n + i] = 1.0;
            if let Some(p) = self.joints[j].parent {
                if let Some(pi) = pos_of(p) {
                    a[i * n + pi] = 1.0;
                    a[pi * n + i] = 1.0;
                }
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j]).sum()).collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
        a
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("skeleton serializes")
    }

    pub fn from_toml(s: &str) -> Result<WholeBodySkeleton, SkeletonError> {
        let skel: WholeBodySkeleton = toml::from_str(s).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        skel.validate()?;
        Ok(skel)
    }
}

/// Positions of every joint for the given pose.
pub fn forward_kinematics(skel: &WholeBodySkeleton, pose: &PoseAngles) -> MotionSequence {
    let n = skel.num_joints();
    if pose.rotations.len() != n {
        panic!(
            "forward_kinematics: pose has {} joints, skeleton has {}",
            pose.rotations.len(),
            n
        );
    }
    let mut seq = MotionSequence::new(1, n, 0.0);
    let mut global_rot: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut global_pos: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let local = axis_angle_to_matrix(&pose.rotations[j]);
        match skel.joints[j].parent {
            None => {
                global_rot.push(local);
                global_pos.push(pose.root_translation);
            }
            Some(p) => {
                let off = Vector3::from(skel.joints[j].offset);
                let pos = global_pos[p] + global_rot[p] * off;
                global_rot.push(global_rot[p] * local);
                global_pos.push(pos);
            }
        }
        seq.set_joint(0, j, global_pos[j]);
    }
    seq
}

pub fn axis_angle_to_matrix(aa: &Vector3<f64>) -> Matrix3<f64> {
    let angle = aa.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    *Rotation3::from_axis_angle(&Unit::new_normalize(*aa), angle).matrix()
}

/// First two columns of R, flattened column-major.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [
        r[(0, 0)], r[(1, 0)], r[(2, 0)],
        r[(0, 1)], r[(1, 1)], r[(2, 1)],
    ]
}

/// Gram-Schmidt reconstruction of a rotation from two 3-vectors.
pub fn rotation_from_6d(v: &[f64; 6]) -> Result<Matrix3<f64>, SkeletonError> {
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < 1e-9 {
        return Err(SkeletonError::Degenerate6d);
    }
    let b1 = a1 / n1;
    let proj = a2 - b1 * b1.dot(&a2);
    let n2 = proj.norm();
    if n2 < 1e-9 {
        return Err(SkeletonError::Degenerate6d);
    }
    let b2 = proj / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(skel: &WholeBodySkeleton, rng: &mut ChaCha8Rng) -> PoseAngles {
        let mut pose = PoseAngles::rest(skel.num_joints());
        for r in pose.rotations.iter_mut() {
            *r = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
        }
        pose.root_translation = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.9);
        pose
    }

    #[test]
    fn default_skeleton_counts() {
        let s = WholeBodySkeleton::default_whole_body();
        assert_eq!(s.num_joints(), NUM_JOINTS);
        assert_eq!(s.body.len(), NUM_BODY);
        assert_eq!(s.left_hand.len(), NUM_HAND);
        assert_eq!(s.right_hand.len(), NUM_HAND);
        assert_eq!(s.upper_body.len(), NUM_UPPER);
    }

    #[test]
    fn fk_rest_pose_is_template() {
        let s = WholeBodySkeleton::default_whole_body();
        let seq = forward_kinematics(&s, &PoseAngles::rest(s.num_joints()));
        // pelvis at origin, every child at parent + offset
        assert_eq!(seq.joint(0, 0), Vector3::zeros());
        for (i, j) in s.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                let expect = seq.joint(0, p) + Vector3::from(j.offset);
                assert!((seq.joint(0, i) - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_90_degree_shoulder_rotation() {
        let s = WholeBodySkeleton::default_whole_body();
        let rest = forward_kinematics(&s, &PoseAngles::rest(s.num_joints()));
        let sh = s.joint_index("l_shoulder").unwrap();
        let el = s.joint_index("l_elbow").unwrap();
        let wr = s.joint_index("l_wrist").unwrap();
        let mut pose = PoseAngles::rest(s.num_joints());
        pose.rotations[sh] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let seq = forward_kinematics(&s, &pose);
        // explicit 90-degree rotation about z: (x, y, z) -> (-y, x, z)
        let rot90 = |v: Vector3<f64>| Vector3::new(-v.y, v.x, v.z);
        let c = rest.joint(0, sh);
        for j in [el, wr] {
            let expect = c + rot90(rest.joint(0, j) - c);
            assert!((seq.joint(0, j) - expect).norm() < 1e-12, "joint {}", j);
        }
    }

    #[test]
    fn fk_preserves_bone_lengths() {
        let s = WholeBodySkeleton::default_whole_body();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = random_pose(&s, &mut rng);
            let seq = forward_kinematics(&s, &pose);
            for (i, j) in s.joints.iter().enumerate() {
                if let Some(p) = j.parent {
                    let d = (seq.joint(0, i) - seq.joint(0, p)).norm();
                    assert!((d - s.bone_length(i)).abs() < 1e-9, "bone {} length {} vs {}", i, d, s.bone_length(i));
                }
            }
        }
    }

    #[test]
    fn fk_root_rotation_equivariance() {
        let s = WholeBodySkeleton::default_whole_body();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pose = random_pose(&s, &mut rng);
        pose.root_translation = Vector3::zeros();
        pose.rotations[0] = Vector3::zeros();
        let base = forward_kinematics(&s, &pose);
        let aa = Vector3::new(0.3, -0.2, 0.9);
        let r = axis_angle_to_matrix(&aa);
        pose.rotations[0] = aa;
        let rotated = forward_kinematics(&s, &pose);
        for j in 0..s.num_joints() {
            let expect = r * base.joint(0, j);
            assert!((rotated.joint(0, j) - expect).norm() < 1e-9, "joint {}", j);
        }
    }

    #[test]
    #[should_panic(expected = "pose has")]
    fn fk_joint_count_mismatch() {
        let s = WholeBodySkeleton::default_whole_body();
        let pose = PoseAngles::rest(5);
        let _ = forward_kinematics(&s, &pose);
    }

    #[test]
    fn rotation_6d_identity() {
        let v = rotation_to_6d(&Matrix3::identity());
        assert_eq!(v, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rotation_6d_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let aa = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let r = axis_angle_to_matrix(&aa);
            let v = rotation_to_6d(&r);
            let r2 = rotation_from_6d(&v).unwrap();
            max_err = max_err.max((r - r2).abs().max());
        }
        assert!(max_err < 1e-9, "max err {}", max_err);
    }

    #[test]
    fn rotation_6d_normalizes_scale() {
        let v = [2.0, 0.0, 0.0, 0.0, 3.0, 0.0];
        let r = rotation_from_6d(&v).unwrap();
        assert!((r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn rotation_6d_degenerate_fails() {
        let v = [1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert!(rotation_from_6d(&v).is_err());
    }

    #[test]
    fn skeleton_toml_round_trip() {
        let s = WholeBodySkeleton::default_whole_body();
        let text = s.to_toml();
        let s2 = WholeBodySkeleton::from_toml(&text).unwrap();
        assert_eq!(s2.num_joints(), s.num_joints());
        assert_eq!(s2.joints[5].name, s.joints[5].name);
        assert_eq!(s2.upper_body, s.upper_body);
    }

    #[test]
    fn adjacency_rows_symmetric() {
        let s = WholeBodySkeleton::default_whole_body();
        let a = s.normalized_adjacency(&s.body);
        let n = s.body.len();
        for i in 0..n {
            for j in 0..n {
                assert!((a[i * n + j] - a[j * n + i]).abs() < 1e-12);
            }
        }
    }
}
