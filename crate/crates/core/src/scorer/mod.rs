//! The prediction-quality scorer: UVD input construction, an attention-based
//! score network, the pairwise ranking losses, perturbation-based training
//! set synthesis, and correlation evaluation.

mod loss;
mod model;
mod train;

pub use loss::{ranknet_pair_loss, scorer_loss, scorer_loss_tape, RANKNET_CLAMP};
pub use model::{ScorerConfig, ScorerModel};
pub use train::{
    eval_scorer, synthesize_scorer_trainset, train_scorer, ScorerEvalTable, ScorerTrainConfig,
    ScorerTrainGroup,
};

use crate::skeleton::{project, Camera, Observation, Vec3, WorldError};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("ranking needs at least 2 candidates, got {got}")]
    TooFewCandidates { got: usize },
    #[error("scores and labels disagree in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite training loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("trainset is empty")]
    EmptyTrainset,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::tensor::TensorError),
}

/// Logistic normalization of a raw score into the open interval (0, 1).
///
/// Raw scores are clamped to ±36 first: beyond that the logistic is within
/// one ulp of the saturated value anyway, and the clamp keeps the result
/// strictly inside (0, 1) instead of underflowing to exactly 0 or 1.
pub fn normalize_score(raw: f64) -> f64 {
    let r = raw.clamp(-36.0, 36.0);
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

/// Geometric input for scoring one candidate against one observation.
#[derive(Clone, Debug)]
pub struct ScorerInput {
    /// Projected candidate keypoints: (u, v) pixels + root-relative depth in
    /// meters. Row 0 (pelvis) has d = 0 by construction.
    pub uvd: Vec<[f64; 3]>,
    /// Per-joint observed token `[u_obs/width, v_obs/height, visibility,
    /// matched]`; occluded joints carry the all-zero mask token.
    pub local_obs: Vec<[f64; 4]>,
    /// Observation tokens for cross-attention, `[J, 3+J]`.
    pub obs_tokens: Tensor,
    /// Occlusion indicator column `[J, 1]`.
    pub occl: Tensor,
    /// Image size used to normalize pixel coordinates inside the model.
    pub image_size_px: [f64; 2],
}

/// Project a candidate's joints and pair each with its own observed keypoint
/// (identity matching; joint ids are known in the synthetic world).
pub fn build_scorer_input(
    candidate_joints: &[Vec3],
    camera: &Camera,
    observation: &Observation,
) -> Result<ScorerInput, ScorerError> {
    let uvd = project(candidate_joints, camera)?;
    let j = candidate_joints.len();
    let mut local_obs = Vec::with_capacity(j);
    for (uv, &vis) in observation.uv_px.iter().zip(&observation.visibility) {
        if vis {
            local_obs.push([
                uv[0] / camera.image_size_px[0],
                uv[1] / camera.image_size_px[1],
                1.0,
                1.0,
            ]);
        } else {
            local_obs.push([0.0; 4]);
        }
    }
    Ok(ScorerInput {
        uvd,
        local_obs,
        obs_tokens: crate::tokens::obs_token_features(observation, camera, j),
        occl: crate::tokens::occlusion_column(observation),
        image_size_px: camera.image_size_px,
    })
}
