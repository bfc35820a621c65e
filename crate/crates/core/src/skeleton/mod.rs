//! Synthetic skeleton world: articulated topology, forward kinematics,
//! pinhole projection, observation synthesis and dataset generation.
//!
//! Stands in for a body model + camera + image. Poses are axis-angle per
//! joint; observations are noisy 2-D keypoints with visibility flags. All
//! positions are millimeters in the camera frame (+x right, +y down,
//! +z forward).

mod dataset;
mod math3;

pub use dataset::{
    generate_dataset, load_dataset, perturb_pose, save_dataset, GenConfig, Sample,
};
pub use math3::{Mat3, Vec3};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("joint {joint} is behind the camera (z = {z} mm)")]
    BehindCamera { joint: usize, z: f64 },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Fixed articulated topology: parent links, bone lengths, rest directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    pub joint_count: usize,
    /// `parent[0]` is `None` (pelvis root); parents precede children.
    pub parent: Vec<Option<usize>>,
    /// Bone from `parent[j]` to `j`; entry 0 unused.
    pub bone_length_mm: Vec<f64>,
    /// Unit direction of each bone in the rest pose; entry 0 unused.
    pub rest_direction: Vec<Vec3>,
    pub joint_names: Vec<&'static str>,
}

impl SkeletonTopology {
    /// 16-joint humanoid: pelvis→spine→chest→head trunk, arms off the chest,
    /// legs off the pelvis. Bone lengths are human-like so metric magnitudes
    /// land in the usual mm range.
    pub fn default_human() -> Self {
        // (name, parent, length mm, rest direction)
        let spec: [(&'static str, Option<usize>, f64, Vec3); 16] = [
            ("pelvis", None, 0.0, [0.0, 0.0, 0.0]),
            ("spine", Some(0), 220.0, [0.0, -1.0, 0.0]),
            ("chest", Some(1), 230.0, [0.0, -1.0, 0.0]),
            ("head", Some(2), 260.0, [0.0, -1.0, 0.0]),
            ("l_shoulder", Some(2), 190.0, [-1.0, 0.0, 0.0]),
            ("r_shoulder", Some(2), 190.0, [1.0, 0.0, 0.0]),
            ("l_elbow", Some(4), 280.0, [-1.0, 0.0, 0.0]),
            ("r_elbow", Some(5), 280.0, [1.0, 0.0, 0.0]),
            ("l_wrist", Some(6), 250.0, [-1.0, 0.0, 0.0]),
            ("r_wrist", Some(7), 250.0, [1.0, 0.0, 0.0]),
            ("l_hip", Some(0), 110.0, [-1.0, 0.0, 0.0]),
            ("r_hip", Some(0), 110.0, [1.0, 0.0, 0.0]),
            ("l_knee", Some(10), 420.0, [0.0, 1.0, 0.0]),
            ("r_knee", Some(11), 420.0, [0.0, 1.0, 0.0]),
            ("l_ankle", Some(12), 400.0, [0.0, 1.0, 0.0]),
            ("r_ankle", Some(13), 400.0, [0.0, 1.0, 0.0]),
        ];
        let topo = SkeletonTopology {
            joint_count: spec.len(),
            parent: spec.iter().map(|s| s.1).collect(),
            bone_length_mm: spec.iter().map(|s| s.2).collect(),
            rest_direction: spec.iter().map(|s| s.3).collect(),
            joint_names: spec.iter().map(|s| s.0).collect(),
        };
        topo.validate();
        topo
    }

    fn validate(&self) {
        assert_eq!(self.parent[0], None, "joint 0 must be the root");
        for j in 1..self.joint_count {
            let p = self.parent[j].expect("non-root joints need a parent");
            assert!(p < j, "parent {p} of joint {j} must precede it");
            assert!(self.bone_length_mm[j] > 0.0, "bone length of joint {j}");
            let n = math3::norm(self.rest_direction[j]);
            assert!((n - 1.0).abs() < 1e-12, "rest direction of joint {j} not unit: {n}");
        }
    }

    pub fn vertex_count(&self, points_per_bone: usize) -> usize {
        (self.joint_count - 1) * points_per_bone
    }
}

/// Joint angles (axis-angle, radians) plus the root position in camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub joint_angles: Vec<Vec3>,
    pub root_position_mm: Vec3,
}

impl Pose {
    pub fn rest(joint_count: usize, root_position_mm: Vec3) -> Self {
        Pose {
            joint_angles: vec![[0.0; 3]; joint_count],
            root_position_mm,
        }
    }

    /// Wrap every joint's axis-angle magnitude into (-pi, pi].
    pub fn canonicalize(&mut self) {
        for angles in &mut self.joint_angles {
            let mag = math3::norm(*angles);
            if mag > std::f64::consts::PI {
                let two_pi = 2.0 * std::f64::consts::PI;
                let wrapped = mag - two_pi * (mag / two_pi).round();
                let scale = wrapped / mag;
                for a in angles.iter_mut() {
                    *a *= scale;
                }
            }
        }
    }
}

/// Pinhole camera with square pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub focal_px: f64,
    pub principal_point_px: [f64; 2],
    pub image_size_px: [f64; 2],
}

impl Camera {
    pub fn default_desk() -> Self {
        Camera {
            focal_px: 1100.0,
            principal_point_px: [500.0, 500.0],
            image_size_px: [1000.0, 1000.0],
        }
    }

    pub fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] <= self.image_size_px[0] && uv[1] >= 0.0 && uv[1] <= self.image_size_px[1]
    }
}

/// Noisy 2-D keypoints with per-joint visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub uv_px: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    /// Pixel noise applied at synthesis; 0 when loaded from a file.
    pub noise_sigma_px: f64,
}

/// Accumulated-rotation forward kinematics.
///
/// `joint(j) = joint(parent) + R_acc(parent) * (bone_length * rest_direction)`
/// where `R_acc` composes each joint's local rotation down the chain, so a
/// joint's angles move the subtree hanging off it.
pub fn forward_kinematics(topology: &SkeletonTopology, pose: &Pose) -> Vec<Vec3> {
    assert_eq!(pose.joint_angles.len(), topology.joint_count);
    let mut joints = vec![[0.0; 3]; topology.joint_count];
    let mut acc = vec![math3::IDENTITY; topology.joint_count];
    joints[0] = pose.root_position_mm;
    acc[0] = math3::rotation_from_axis_angle(pose.joint_angles[0]);
    for j in 1..topology.joint_count {
        let p = topology.parent[j].unwrap();
        let bone = math3::scale(topology.rest_direction[j], topology.bone_length_mm[j]);
        joints[j] = math3::add(joints[p], math3::mat_vec(&acc[p], bone));
        let local = math3::rotation_from_axis_angle(pose.joint_angles[j]);
        acc[j] = math3::mat_mul(&acc[p], &local);
    }
    joints
}

/// Pinhole projection to (u, v, root-relative depth in meters).
pub fn project(joints3d: &[Vec3], camera: &Camera) -> Result<Vec<[f64; 3]>, WorldError> {
    for (j, p) in joints3d.iter().enumerate() {
        if p[2] <= 0.0 {
            return Err(WorldError::BehindCamera { joint: j, z: p[2] });
        }
    }
    let z_pelvis = joints3d[0][2];
    Ok(joints3d
        .iter()
        .map(|p| {
            let u = camera.focal_px * p[0] / p[2] + camera.principal_point_px[0];
            let v = camera.focal_px * p[1] / p[2] + camera.principal_point_px[1];
            let d = (p[2] - z_pelvis) / 1000.0;
            [u, v, d]
        })
        .collect())
}

/// Proxy vertices: `points_per_bone` linear interpolants along every bone,
/// at fractions k/(points_per_bone+1).
pub fn densify_vertices(
    joints3d: &[Vec3],
    topology: &SkeletonTopology,
    points_per_bone: usize,
) -> Vec<Vec3> {
    assert!(points_per_bone >= 1);
    let mut vertices = Vec::with_capacity((topology.joint_count - 1) * points_per_bone);
    for j in 1..topology.joint_count {
        let p = topology.parent[j].unwrap();
        for k in 1..=points_per_bone {
            let frac = k as f64 / (points_per_bone + 1) as f64;
            vertices.push(math3::lerp(joints3d[p], joints3d[j], frac));
        }
    }
    vertices
}

pub const POINTS_PER_BONE: usize = 4;
