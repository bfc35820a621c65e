//! Variance-preserving diffusion over root-relative pose latents:
//! noise schedule, forward noising, the conditional denoiser, training and
//! M-candidate ancestral sampling.

mod model;
mod sample;
mod train;

pub use model::{DenoiserConfig, DenoiserModel};
pub use sample::{sample_candidates, CandidateSet};
pub use train::{train_base, BaseTrainConfig};

use crate::skeleton::Vec3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad schedule parameters: {0}")]
    BadSchedule(String),
    #[error("non-finite training loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model architectures do not match")]
    ArchitectureMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::tensor::TensorError),
}

/// Per-timestep tables of a linear variance-preserving schedule.
///
/// `alpha(t)` is the signal coefficient sqrt(alpha_bar_t), `sigma(t)` the
/// noise coefficient, and `lambda(t) = alpha^2/sigma^2` the signal-to-noise
/// ratio that weights the preference objective.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_count: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule; the defaults are T=100, beta in [1e-4, 0.02].
    pub fn linear(t_count: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if t_count < 2 {
            return Err(DiffusionError::BadSchedule(format!(
                "need at least 2 steps, got {t_count}"
            )));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(DiffusionError::BadSchedule(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = Vec::with_capacity(t_count);
        let mut alpha_bar = Vec::with_capacity(t_count);
        let mut prod = 1.0;
        for i in 0..t_count {
            let b = beta_min + (beta_max - beta_min) * i as f64 / (t_count - 1) as f64;
            prod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(prod);
        }
        let sqrt_alpha_bar: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let lambda: Vec<f64> = alpha_bar.iter().map(|a| a / (1.0 - a)).collect();
        Ok(NoiseSchedule {
            t_count,
            beta,
            alpha_bar,
            sqrt_alpha_bar,
            sigma,
            lambda,
        })
    }

    pub fn default_linear() -> Self {
        NoiseSchedule::linear(100, 1e-4, 0.02).expect("defaults are valid")
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.t_count, "timestep {t} outside [1, {}]", self.t_count);
        t - 1
    }

    /// Per-step beta_t.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// Signal coefficient sqrt(alpha_bar_t).
    pub fn alpha(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[self.idx(t)]
    }

    /// Noise coefficient sqrt(1 - alpha_bar_t).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    /// Signal-to-noise ratio alpha_t^2 / sigma_t^2.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[self.idx(t)]
    }
}

/// Root-relative joint coordinates divided by 1000, flattened to 3J values.
/// The pelvis block is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLatent {
    pub x: Vec<f64>,
}

impl PoseLatent {
    pub fn encode(joints3d: &[Vec3]) -> Self {
        let root = joints3d[0];
        let mut x = Vec::with_capacity(joints3d.len() * 3);
        for j in joints3d {
            x.push((j[0] - root[0]) / 1000.0);
            x.push((j[1] - root[1]) / 1000.0);
            x.push((j[2] - root[2]) / 1000.0);
        }
        PoseLatent { x }
    }

    /// Millimeter joints re-anchored at `root_mm`; the pelvis lands exactly
    /// on the anchor because decoding re-centers on the latent's own pelvis.
    pub fn decode(&self, root_mm: Vec3) -> Vec<Vec3> {
        let px = self.x[0];
        let py = self.x[1];
        let pz = self.x[2];
        self.x
            .chunks_exact(3)
            .map(|c| {
                [
                    (c[0] - px) * 1000.0 + root_mm[0],
                    (c[1] - py) * 1000.0 + root_mm[1],
                    (c[2] - pz) * 1000.0 + root_mm[2],
                ]
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Forward noising: `x_t = alpha_t * x0 + sigma_t * eps`, exactly.
pub fn q_sample(x0: &PoseLatent, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    assert_eq!(
        x0.x.len(),
        eps.len(),
        "eps length {} does not match latent dim {}",
        eps.len(),
        x0.x.len()
    );
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    x0.x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}
