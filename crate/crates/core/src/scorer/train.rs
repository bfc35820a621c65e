//! Scorer training-set synthesis, the training loop, and correlation
//! evaluation.

use super::{build_scorer_input, scorer_loss_tape, ScorerConfig, ScorerError, ScorerInput, ScorerModel};
use crate::metrics::{plcc, srcc, MetricReport};
use crate::rng::stream;
use crate::skeleton::{forward_kinematics, perturb_pose, Sample, SkeletonTopology};
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape};
use rand::Rng;

/// Default perturbation magnitudes (radians) for scorer training data.
pub const DEFAULT_SIGMA_LADDER: [f64; 5] = [0.03, 0.08, 0.15, 0.3, 0.5];

/// One sample's scored candidates: geometric inputs plus metric labels.
#[derive(Clone, Debug)]
pub struct ScorerTrainGroup {
    pub sample_id: u64,
    pub inputs: Vec<ScorerInput>,
    pub labels: Vec<MetricReport>,
}

/// Per sample, draw `m_per_sample` perturbed copies of the stored pose with
/// sigma picked uniformly from the ladder, and label each with its metric
/// report against the stored pose.
pub fn synthesize_scorer_trainset(
    dataset: &[Sample],
    topology: &SkeletonTopology,
    m_per_sample: usize,
    sigma_ladder: &[f64],
    seed: u64,
) -> Result<Vec<ScorerTrainGroup>, ScorerError> {
    assert!(m_per_sample >= 2, "need at least two candidates per sample");
    assert!(!sigma_ladder.is_empty(), "sigma ladder must be non-empty");
    dataset
        .iter()
        .map(|sample| {
            let mut rng = stream(seed, "scorer-synth", &[sample.id]);
            let mut inputs = Vec::with_capacity(m_per_sample);
            let mut labels = Vec::with_capacity(m_per_sample);
            for _ in 0..m_per_sample {
                let sigma = sigma_ladder[rng.gen_range(0..sigma_ladder.len())];
                let pose = perturb_pose(&sample.pose, sigma, &mut rng);
                let joints = forward_kinematics(topology, &pose);
                inputs.push(build_scorer_input(&joints, &sample.camera, &sample.observation)?);
                labels.push(
                    MetricReport::compute(&joints, &sample.joints3d, topology)
                        .expect("desk-scale joint sets are non-degenerate"),
                );
            }
            Ok(ScorerTrainGroup {
                sample_id: sample.id,
                inputs,
                labels,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ScorerTrainConfig {
    pub arch: ScorerConfig,
    pub epochs: usize,
    pub batch_groups: usize,
    pub lr: f64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            arch: ScorerConfig::default(),
            epochs: 8,
            batch_groups: 8,
            lr: 3e-4,
        }
    }
}

/// Minimize the mean per-group ranking loss over the trainset.
pub fn train_scorer(
    trainset: &[ScorerTrainGroup],
    config: &ScorerTrainConfig,
    seed: u64,
) -> Result<(ScorerModel, Vec<f64>), ScorerError> {
    if trainset.is_empty() {
        return Err(ScorerError::EmptyTrainset);
    }
    for g in trainset {
        if g.inputs.len() < 2 {
            return Err(ScorerError::TooFewCandidates {
                got: g.inputs.len(),
            });
        }
    }
    let mut model = ScorerModel::new(config.arch.clone(), seed);
    let mut adam = AdamState::new(
        &model.params,
        AdamHyper {
            lr: config.lr,
            ..AdamHyper::default()
        },
    );
    let mut curve = Vec::new();
    let n = trainset.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream(seed, "train-scorer/shuffle", &[epoch as u64]);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, chunk) in order.chunks(config.batch_groups).enumerate() {
            let mut tape = Tape::new();
            let vars = tape.bind_params(&model.params);
            let mut total: Option<crate::tensor::Var> = None;
            for &gi in chunk {
                let group = &trainset[gi];
                let score_vars: Vec<crate::tensor::Var> = group
                    .inputs
                    .iter()
                    .map(|input| model.score_tape(&mut tape, &vars, input))
                    .collect();
                let scores = tape.concat_rows(&score_vars);
                let loss = scorer_loss_tape(&mut tape, scores, &group.labels)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, loss),
                    None => loss,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = tape.scalar_mul(total, 1.0 / chunk.len() as f64);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(ScorerError::NonFiniteLoss { epoch, step });
            }
            curve.push(loss_val);
            let grads = tape
                .backward(loss, &model.params)
                .map_err(|_| ScorerError::NonFiniteLoss { epoch, step })?;
            adam_step(&mut model.params, &grads, &mut adam);
        }
    }
    Ok((model, curve))
}

/// Per-metric correlation between scores and negated errors.
#[derive(Clone, Debug)]
pub struct ScorerEvalTable {
    /// Mean PLCC per metric, ordered as [`MetricReport::NAMES`].
    pub plcc: [f64; 4],
    /// Mean SRCC per metric.
    pub srcc: [f64; 4],
    pub n_samples: usize,
    pub n_skipped: usize,
}

impl ScorerEvalTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("metric      plcc     srcc\n");
        for (i, name) in MetricReport::NAMES.iter().enumerate() {
            out.push_str(&format!(
                "{:<10} {:>7.4} {:>7.4}\n",
                name, self.plcc[i], self.srcc[i]
            ));
        }
        out.push_str(&format!(
            "samples {} (skipped {})\n",
            self.n_samples, self.n_skipped
        ));
        out
    }
}

/// Score every group and correlate per sample against negated errors, so
/// higher scores on lower-error candidates push the coefficients toward +1.
/// Groups whose scores or labels are constant are skipped and counted.
pub fn eval_scorer(
    model: &ScorerModel,
    testset: &[ScorerTrainGroup],
) -> Result<ScorerEvalTable, ScorerError> {
    let mut sums_plcc = [0.0; 4];
    let mut sums_srcc = [0.0; 4];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for group in testset {
        if group.inputs.len() < 2 {
            return Err(ScorerError::TooFewCandidates {
                got: group.inputs.len(),
            });
        }
        let scores = model.score_batch(&group.inputs);
        let mut this = [[0.0; 4]; 2];
        let mut ok = true;
        for k in 0..4 {
            let neg_err: Vec<f64> = group.labels.iter().map(|r| -r.values()[k]).collect();
            match (plcc(&scores, &neg_err), srcc(&scores, &neg_err)) {
                (Ok(p), Ok(s)) => {
                    this[0][k] = p;
                    this[1][k] = s;
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for k in 0..4 {
                sums_plcc[k] += this[0][k];
                sums_srcc[k] += this[1][k];
            }
            used += 1;
        } else {
            skipped += 1;
        }
    }
    let denom = used.max(1) as f64;
    Ok(ScorerEvalTable {
        plcc: sums_plcc.map(|v| v / denom),
        srcc: sums_srcc.map(|v| v / denom),
        n_samples: used,
        n_skipped: skipped,
    })
}
