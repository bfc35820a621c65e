//! Per-joint observation tokens shared by the denoiser condition encoder and
//! the scorer's cross-attention inputs.
//!
//! Token row for joint j: `[u/width, v/height, visibility, one-hot joint id]`.
//! Occluded joints keep their one-hot id but carry zeroed uv/visibility; the
//! models add their own learned mask embedding for those rows.

use crate::skeleton::{Camera, Observation};
use crate::tensor::Tensor;

pub fn token_dim(joint_count: usize) -> usize {
    3 + joint_count
}

/// Raw token features `[J, 3+J]` for one observation.
pub fn obs_token_features(
    observation: &Observation,
    camera: &Camera,
    joint_count: usize,
) -> Tensor {
    assert_eq!(
        observation.uv_px.len(),
        joint_count,
        "observation has {} joints, expected {joint_count}",
        observation.uv_px.len()
    );
    let td = token_dim(joint_count);
    let mut data = vec![0.0; joint_count * td];
    for (jid, (uv, &vis)) in observation
        .uv_px
        .iter()
        .zip(&observation.visibility)
        .enumerate()
    {
        let row = &mut data[jid * td..(jid + 1) * td];
        if vis {
            row[0] = uv[0] / camera.image_size_px[0];
            row[1] = uv[1] / camera.image_size_px[1];
            row[2] = 1.0;
        }
        row[3 + jid] = 1.0;
    }
    Tensor::new(vec![joint_count, td], data)
}

/// Column of occlusion indicators (1.0 where invisible): `[J, 1]`.
pub fn occlusion_column(observation: &Observation) -> Tensor {
    let data: Vec<f64> = observation
        .visibility
        .iter()
        .map(|&v| if v { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(vec![data.len(), 1], data)
}
