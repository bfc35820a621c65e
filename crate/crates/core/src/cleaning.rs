//! Score-threshold filtering of pseudo-labeled training sets and the
//! retrain-comparison harness.

use crate::diffusion::{train_base, BaseTrainConfig, NoiseSchedule};
use crate::eval::{evaluate_min_of_m, EvalTable};
use crate::scorer::{build_scorer_input, normalize_score, ScorerError, ScorerModel};
use crate::skeleton::{Sample, SkeletonTopology};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CleaningError {
    #[error("scores and dataset disagree in length: {scores} vs {dataset}")]
    LengthMismatch { scores: usize, dataset: usize },
    #[error("score for sample {got} does not match dataset id {expected}")]
    IdMismatch { got: u64, expected: u64 },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("retrain: {0}")]
    Train(#[from] crate::diffusion::DiffusionError),
    #[error("retrain eval: {0}")]
    Eval(#[from] crate::metrics::MetricsError),
}

/// What score-threshold filtering kept and why.
#[derive(Clone, Debug)]
pub struct CleaningReport {
    pub n_total: usize,
    pub n_kept: usize,
    pub threshold: f64,
    /// `(sample id, normalized score)` for every input sample, in input order.
    pub scores: Vec<(u64, f64)>,
    /// Ids that passed the threshold, sorted ascending.
    pub kept_ids: Vec<u64>,
}

impl CleaningReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "kept {}/{} at threshold {:.3}\n",
            self.n_kept, self.n_total, self.threshold
        ));
        for (id, s) in &self.scores {
            let kept = if *s >= self.threshold { "keep" } else { "drop" };
            out.push_str(&format!("{id} {s:.6} {kept}\n"));
        }
        out
    }
}

/// Normalized quality score of every sample's stored label pose against its
/// own observation.
pub fn score_dataset(
    scorer: &ScorerModel,
    dataset: &[Sample],
) -> Result<Vec<(u64, f64)>, CleaningError> {
    let inputs = dataset
        .iter()
        .map(|s| build_scorer_input(&s.joints3d, &s.camera, &s.observation))
        .collect::<Result<Vec<_>, _>>()?;
    let raw = scorer.score_batch(&inputs);
    Ok(dataset
        .iter()
        .zip(raw)
        .map(|(s, r)| (s.id, normalize_score(r)))
        .collect())
}

/// Keep samples whose normalized score is at least `threshold`.
///
/// The input dataset is untouched; the kept subset is returned in the
/// original order together with the report.
pub fn clean(
    dataset: &[Sample],
    scores: &[(u64, f64)],
    threshold: f64,
) -> Result<(Vec<Sample>, CleaningReport), CleaningError> {
    if scores.len() != dataset.len() {
        return Err(CleaningError::LengthMismatch {
            scores: scores.len(),
            dataset: dataset.len(),
        });
    }
    for (s, (id, _)) in dataset.iter().zip(scores) {
        if s.id != *id {
            return Err(CleaningError::IdMismatch {
                got: *id,
                expected: s.id,
            });
        }
    }
    let mut kept = Vec::new();
    let mut kept_ids = Vec::new();
    for (sample, (_, score)) in dataset.iter().zip(scores) {
        if *score >= threshold {
            kept.push(sample.clone());
            kept_ids.push(sample.id);
        }
    }
    kept_ids.sort_unstable();
    let report = CleaningReport {
        n_total: dataset.len(),
        n_kept: kept.len(),
        threshold,
        scores: scores.to_vec(),
        kept_ids,
    };
    Ok((kept, report))
}

/// Side-by-side result of training on the full vs the cleaned set.
#[derive(Clone, Debug)]
pub struct RetrainComparison {
    pub full: EvalTable,
    pub cleaned: EvalTable,
    pub n_full: usize,
    pub n_cleaned: usize,
}

impl RetrainComparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "trained on full set ({} samples):\n{}",
            self.n_full,
            self.full.render()
        ));
        out.push_str(&format!(
            "trained on cleaned set ({} samples):\n{}",
            self.n_cleaned,
            self.cleaned.render()
        ));
        out
    }
}

/// Train two models identically except for the training set and evaluate
/// both with min-of-M on the same clean held-out split.
pub fn compare_retrain(
    full: &[Sample],
    cleaned: &[Sample],
    heldout: &[Sample],
    topology: &SkeletonTopology,
    train_config: &BaseTrainConfig,
    eval_m: usize,
    seed: u64,
) -> Result<RetrainComparison, CleaningError> {
    let schedule = NoiseSchedule::linear(
        train_config.arch.t_steps,
        train_config.arch.beta_min,
        train_config.arch.beta_max,
    )?;
    let (model_full, _) = train_base(full, train_config, seed, None)?;
    let (model_cleaned, _) = train_base(cleaned, train_config, seed, None)?;
    let full_eval = evaluate_min_of_m(&model_full, &schedule, heldout, topology, eval_m, seed)?;
    let cleaned_eval =
        evaluate_min_of_m(&model_cleaned, &schedule, heldout, topology, eval_m, seed)?;
    Ok(RetrainComparison {
        full: full_eval,
        cleaned: cleaned_eval,
        n_full: full.len(),
        n_cleaned: cleaned.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{generate_dataset, GenConfig};

    fn fake_scores(dataset: &[Sample], f: impl Fn(&Sample) -> f64) -> Vec<(u64, f64)> {
        dataset.iter().map(|s| (s.id, f(s))).collect()
    }

    fn world(n: usize) -> (SkeletonTopology, Vec<Sample>) {
        let topo = SkeletonTopology::default_human();
        let data = generate_dataset(
            &topo,
            &GenConfig {
                n_samples: n,
                corruption_fraction: 0.3,
                ..GenConfig::default()
            },
            44,
        );
        (topo, data)
    }

    #[test]
    fn threshold_zero_keeps_everything_and_above_one_nothing() {
        let (_, data) = world(10);
        let scores = fake_scores(&data, |s| if s.corrupted { 0.2 } else { 0.9 });
        let (kept, report) = clean(&data, &scores, 0.0).unwrap();
        assert_eq!(kept.len(), 10);
        assert_eq!(report.n_kept, 10);
        let (kept, _) = clean(&data, &scores, 1.1).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn keeps_on_equality() {
        let (_, data) = world(4);
        let scores = fake_scores(&data, |_| 0.6);
        let (kept, _) = clean(&data, &scores, 0.6).unwrap();
        assert_eq!(kept.len(), 4);
    }

    #[test]
    fn cleaning_is_idempotent() {
        let (_, data) = world(12);
        let scores = fake_scores(&data, |s| if s.corrupted { 0.3 } else { 0.8 });
        let (kept, _) = clean(&data, &scores, 0.6).unwrap();
        let kept_scores: Vec<(u64, f64)> = scores
            .iter()
            .filter(|(_, v)| *v >= 0.6)
            .cloned()
            .collect();
        let (kept2, report2) = clean(&kept, &kept_scores, 0.6).unwrap();
        assert_eq!(kept2.len(), kept.len());
        assert_eq!(report2.n_kept, report2.n_total);
    }

    #[test]
    fn kept_sets_are_nested_as_the_threshold_rises() {
        let (_, data) = world(20);
        let mut rng = crate::rng::stream(5, "test-clean-mono", &[]);
        use rand::Rng;
        let scores = fake_scores(&data, |_| 0.0);
        let scores: Vec<(u64, f64)> = scores
            .iter()
            .map(|(id, _)| (*id, rng.gen_range(0.0..1.0)))
            .collect();
        let (_, low) = clean(&data, &scores, 0.3).unwrap();
        let (_, high) = clean(&data, &scores, 0.7).unwrap();
        for id in &high.kept_ids {
            assert!(low.kept_ids.contains(id), "kept({id}) at 0.7 but not 0.3");
        }
    }

    #[test]
    fn misaligned_scores_are_rejected() {
        let (_, data) = world(4);
        let scores = fake_scores(&data[..3], |_| 0.5);
        assert!(matches!(
            clean(&data, &scores, 0.5),
            Err(CleaningError::LengthMismatch { .. })
        ));
        let mut bad = fake_scores(&data, |_| 0.5);
        bad.swap(0, 1);
        assert!(matches!(
            clean(&data, &bad, 0.5),
            Err(CleaningError::IdMismatch { .. })
        ));
    }
}
