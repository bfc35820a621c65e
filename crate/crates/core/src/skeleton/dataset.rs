//! Dataset synthesis and the line-oriented dataset file format.
//!
//! Every sample is a deterministic function of `(config, seed, sample id)`:
//! the per-sample RNG stream is derived from the id, so regenerating a
//! dataset is bit-identical and editing one sample's stream touches nothing
//! else. The file format is one JSON object per line with floats printed at
//! 17 significant digits for exact round-trips.

use super::math3::{self, Vec3};
use super::{
    densify_vertices, forward_kinematics, project, Camera, Observation, Pose, SkeletonTopology,
    WorldError, POINTS_PER_BONE,
};
use crate::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// One synthetic sample: stored pose label, camera, observation, and cached
/// forward-kinematics results for the stored label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub pose: Pose,
    pub camera: Camera,
    pub observation: Observation,
    pub corrupted: bool,
    pub joints3d: Vec<Vec3>,
    pub vertices3d: Vec<Vec3>,
}

impl Sample {
    fn from_parts(
        id: u64,
        pose: Pose,
        camera: Camera,
        observation: Observation,
        corrupted: bool,
        topology: &SkeletonTopology,
    ) -> Self {
        let joints3d = forward_kinematics(topology, &pose);
        let vertices3d = densify_vertices(&joints3d, topology, POINTS_PER_BONE);
        Sample {
            id,
            pose,
            camera,
            observation,
            corrupted,
            joints3d,
            vertices3d,
        }
    }
}

/// Generation knobs; see `generate_dataset`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_samples: usize,
    pub sigma_obs_px: f64,
    pub p_occ: f64,
    /// Fraction of samples whose stored label gets heavy angle noise
    /// (the observation stays clean). Exactly `floor(fraction * n)` samples.
    pub corruption_fraction: f64,
    pub corruption_sigma_rad: f64,
    pub depth_min_mm: f64,
    pub depth_max_mm: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_samples: 512,
            sigma_obs_px: 3.0,
            p_occ: 0.15,
            corruption_fraction: 0.0,
            corruption_sigma_rad: 0.8,
            depth_min_mm: 2500.0,
            depth_max_mm: 5500.0,
        }
    }
}

/// Uniform half-range of the angle prior for a joint, by name.
fn angle_half_range(name: &str) -> f64 {
    let base = name.trim_start_matches("l_").trim_start_matches("r_");
    match base {
        "pelvis" => 0.5,
        "spine" | "chest" => 0.3,
        "head" => 0.4,
        "shoulder" => 1.0,
        "elbow" | "knee" => 1.2,
        "hip" => 0.8,
        _ => 0.5,
    }
}

pub(crate) fn random_pose(
    topology: &SkeletonTopology,
    rng: &mut impl Rng,
    root_position_mm: Vec3,
) -> Pose {
    let mut joint_angles = Vec::with_capacity(topology.joint_count);
    for name in &topology.joint_names {
        let r = angle_half_range(name);
        joint_angles.push([
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
        ]);
    }
    Pose {
        joint_angles,
        root_position_mm,
    }
}

/// Add i.i.d. Gaussian noise of std `sigma_rad` to every axis-angle
/// component; the root position is untouched and the result is canonical.
pub fn perturb_pose(pose: &Pose, sigma_rad: f64, rng: &mut impl Rng) -> Pose {
    assert!(sigma_rad >= 0.0, "sigma must be non-negative");
    let mut out = pose.clone();
    for angles in &mut out.joint_angles {
        for a in angles.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *a += sigma_rad * n;
        }
    }
    out.canonicalize();
    out
}

/// Deterministically synthesize `config.n_samples` samples.
///
/// Per-sample streams are keyed by `(seed, "data-sample", id)`; the set of
/// corrupted ids comes from its own `(seed, "data-corrupt")` stream so that
/// exactly `floor(fraction * n)` samples are flagged.
pub fn generate_dataset(
    topology: &SkeletonTopology,
    config: &GenConfig,
    seed: u64,
) -> Vec<Sample> {
    let camera = Camera::default_desk();
    let n = config.n_samples;

    let n_corrupt = (config.corruption_fraction * n as f64).floor() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    let mut corrupt_rng = stream(seed, "data-corrupt", &[]);
    // Fisher-Yates; only the first n_corrupt entries matter
    for i in (1..n).rev() {
        let j = corrupt_rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut corrupted_flags = vec![false; n];
    for &id in ids.iter().take(n_corrupt) {
        corrupted_flags[id] = true;
    }

    (0..n)
        .map(|i| {
            let mut rng = stream(seed, "data-sample", &[i as u64]);
            let root = [
                rng.gen_range(-300.0..300.0),
                rng.gen_range(-300.0..300.0),
                rng.gen_range(config.depth_min_mm..config.depth_max_mm),
            ];
            let true_pose = random_pose(topology, &mut rng, root);
            let joints = forward_kinematics(topology, &true_pose);
            let uvd = project(&joints, &camera).expect("generated joints are in front of the camera");

            let mut uv_px = Vec::with_capacity(topology.joint_count);
            let mut visibility = Vec::with_capacity(topology.joint_count);
            for clean in &uvd {
                let occluded = rng.gen_range(0.0..1.0) < config.p_occ;
                let nu: f64 = rng.sample(StandardNormal);
                let nv: f64 = rng.sample(StandardNormal);
                let uv = [
                    clean[0] + config.sigma_obs_px * nu,
                    clean[1] + config.sigma_obs_px * nv,
                ];
                let visible = !occluded && camera.contains(uv);
                if visible {
                    uv_px.push(uv);
                } else {
                    uv_px.push([0.0, 0.0]);
                }
                visibility.push(visible);
            }
            let observation = Observation {
                uv_px,
                visibility,
                noise_sigma_px: config.sigma_obs_px,
            };

            let stored_pose = if corrupted_flags[i] {
                perturb_pose(&true_pose, config.corruption_sigma_rad, &mut rng)
            } else {
                true_pose
            };
            Sample::from_parts(
                i as u64,
                stored_pose,
                camera.clone(),
                observation,
                corrupted_flags[i],
                topology,
            )
        })
        .collect()
}

// ── file format ─────────────────────────────────────────────────────

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(vs: &[f64]) -> String {
    let parts: Vec<String> = vs.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", parts.join(","))
}

fn fmt_vec3s(vs: &[Vec3]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| fmt_vec(v)).collect();
    format!("[{}]", parts.join(","))
}

fn fmt_vec2s(vs: &[[f64; 2]]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| fmt_vec(v)).collect();
    format!("[{}]", parts.join(","))
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), WorldError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let vis: Vec<&str> = s
            .observation
            .visibility
            .iter()
            .map(|&v| if v { "true" } else { "false" })
            .collect();
        writeln!(
            w,
            "{{\"id\":{},\"angles\":{},\"root\":{},\"camera\":{{\"focal\":{},\"pp\":{},\"size\":{}}},\"uv\":{},\"visibility\":[{}],\"corrupted\":{}}}",
            s.id,
            fmt_vec3s(&s.pose.joint_angles),
            fmt_vec(&s.pose.root_position_mm),
            fmt_f64(s.camera.focal_px),
            fmt_vec(&s.camera.principal_point_px),
            fmt_vec(&s.camera.image_size_px),
            fmt_vec2s(&s.observation.uv_px),
            vis.join(","),
            s.corrupted,
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CameraRecord {
    focal: f64,
    pp: [f64; 2],
    size: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    angles: Vec<[f64; 3]>,
    root: [f64; 3],
    camera: CameraRecord,
    uv: Vec<[f64; 2]>,
    visibility: Vec<bool>,
    corrupted: bool,
}

pub fn load_dataset(path: &Path, topology: &SkeletonTopology) -> Result<Vec<Sample>, WorldError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.angles.len() != topology.joint_count
            || rec.uv.len() != topology.joint_count
            || rec.visibility.len() != topology.joint_count
        {
            return Err(WorldError::Parse {
                line: lineno + 1,
                msg: format!(
                    "expected {} joints, got angles={} uv={} visibility={}",
                    topology.joint_count,
                    rec.angles.len(),
                    rec.uv.len(),
                    rec.visibility.len()
                ),
            });
        }
        let pose = Pose {
            joint_angles: rec.angles,
            root_position_mm: rec.root,
        };
        let camera = Camera {
            focal_px: rec.camera.focal,
            principal_point_px: rec.camera.pp,
            image_size_px: rec.camera.size,
        };
        let observation = Observation {
            uv_px: rec.uv,
            visibility: rec.visibility,
            noise_sigma_px: 0.0,
        };
        samples.push(Sample::from_parts(
            rec.id,
            pose,
            camera,
            observation,
            rec.corrupted,
            topology,
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mpjpe;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::default_human()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            n_samples: 24,
            ..GenConfig::default()
        };
        let a = generate_dataset(&topo(), &cfg, 7);
        let b = generate_dataset(&topo(), &cfg, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.observation, y.observation);
            assert_eq!(x.corrupted, y.corrupted);
        }
        let c = generate_dataset(&topo(), &cfg, 8);
        assert_ne!(a[0].pose, c[0].pose);
    }

    #[test]
    fn no_occlusion_means_all_in_frame_joints_visible() {
        let cfg = GenConfig {
            n_samples: 40,
            p_occ: 0.0,
            ..GenConfig::default()
        };
        let data = generate_dataset(&topo(), &cfg, 3);
        for s in &data {
            for (j, &vis) in s.observation.visibility.iter().enumerate() {
                if !vis {
                    // only allowed cause with p_occ = 0: noise pushed it off-frame
                    let clean = project(&forward_kinematics(&topo(), &s.pose), &s.camera).unwrap();
                    let near_edge = clean[j][0] < 4.0 * cfg.sigma_obs_px
                        || clean[j][0] > s.camera.image_size_px[0] - 4.0 * cfg.sigma_obs_px
                        || clean[j][1] < 4.0 * cfg.sigma_obs_px
                        || clean[j][1] > s.camera.image_size_px[1] - 4.0 * cfg.sigma_obs_px;
                    assert!(near_edge, "joint {j} invisible away from the frame edge");
                }
            }
        }
    }

    #[test]
    fn visible_keypoints_stay_inside_the_image() {
        let cfg = GenConfig {
            n_samples: 60,
            ..GenConfig::default()
        };
        for s in generate_dataset(&topo(), &cfg, 5) {
            for (uv, &vis) in s.observation.uv_px.iter().zip(&s.observation.visibility) {
                if vis {
                    assert!(s.camera.contains(*uv));
                }
            }
        }
    }

    #[test]
    fn corruption_count_is_exact_and_labels_disagree_with_observations() {
        let cfg = GenConfig {
            n_samples: 50,
            corruption_fraction: 0.3,
            ..GenConfig::default()
        };
        let data = generate_dataset(&topo(), &cfg, 9);
        let n_corrupt = data.iter().filter(|s| s.corrupted).count();
        assert_eq!(n_corrupt, 15); // floor(0.3 * 50)
    }

    #[test]
    fn cached_joints_match_forward_kinematics() {
        let cfg = GenConfig {
            n_samples: 8,
            corruption_fraction: 0.25,
            ..GenConfig::default()
        };
        for s in generate_dataset(&topo(), &cfg, 2) {
            let fk = forward_kinematics(&topo(), &s.pose);
            for (a, b) in s.joints3d.iter().zip(&fk) {
                for axis in 0..3 {
                    assert!((a[axis] - b[axis]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn perturb_with_zero_sigma_is_identity() {
        let t = topo();
        let mut rng = stream(4, "test-perturb", &[]);
        let pose = random_pose(&t, &mut rng, [0.0, 0.0, 3000.0]);
        let same = perturb_pose(&pose, 0.0, &mut rng);
        assert_eq!(pose, same);
    }

    #[test]
    fn perturbation_error_grows_with_sigma() {
        let t = topo();
        let mut rng = stream(6, "test-perturb-mono", &[]);
        let pose = random_pose(&t, &mut rng, [0.0, 0.0, 3000.0]);
        let gt = forward_kinematics(&t, &pose);
        let mut means = Vec::new();
        for &sigma in &[0.05, 0.15, 0.3] {
            let mut total = 0.0;
            for _ in 0..200 {
                let p = perturb_pose(&pose, sigma, &mut rng);
                let j = forward_kinematics(&t, &p);
                total += mpjpe(&j, &gt).unwrap();
            }
            means.push(total / 200.0);
        }
        assert!(means[0] > 0.0);
        assert!(
            means[0] < means[1] && means[1] < means[2],
            "mean error not monotone in sigma: {means:?}"
        );
    }

    #[test]
    fn dataset_file_round_trips_exactly() {
        let cfg = GenConfig {
            n_samples: 12,
            corruption_fraction: 0.25,
            ..GenConfig::default()
        };
        let data = generate_dataset(&topo(), &cfg, 13);
        let dir = std::env::temp_dir().join("posealign-dataset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.jsonl");
        save_dataset(&path, &data).unwrap();
        let loaded = load_dataset(&path, &topo()).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (a, b) in data.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.corrupted, b.corrupted);
            for (x, y) in a.pose.joint_angles.iter().zip(&b.pose.joint_angles) {
                for axis in 0..3 {
                    assert_eq!(x[axis].to_bits(), y[axis].to_bits());
                }
            }
            assert_eq!(a.observation.uv_px, b.observation.uv_px);
            assert_eq!(a.observation.visibility, b.observation.visibility);
        }
        // saving the loaded set reproduces the file byte for byte
        let path2 = dir.join("round2.jsonl");
        save_dataset(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
