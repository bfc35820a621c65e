//! Preference-aligned diffusion pose prediction at desk scale.
//!
//! The pipeline: generate a synthetic skeleton dataset, train a conditional
//! diffusion pose predictor, train a pairwise-ranking quality scorer, build
//! winner/loser preference pairs from scored candidates, finetune the
//! predictor against a frozen reference with a diffusion DPO objective, and
//! clean noisy training sets by score thresholding.
//!
//! Everything trains through the in-crate [`tensor`] engine (dense f64
//! tensors with reverse-mode autodiff); all randomness flows through named
//! [`rng`] streams so every artifact is a deterministic function of
//! `(config, seed)`.

pub mod cleaning;
pub mod diffusion;
pub mod eval;
pub mod metrics;
pub mod prefs;
pub mod rng;
pub mod scorer;
pub mod skeleton;
pub mod tensor;
pub mod tokens;
