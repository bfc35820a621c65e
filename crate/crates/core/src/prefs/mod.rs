//! Preference-pair synthesis and the diffusion preference-finetuning
//! objective against a frozen reference model.

mod dpo;

pub use dpo::{dpo_loss, finetune_dpo, DpoConfig, OmegaWeight};

use crate::diffusion::{sample_candidates, CandidateSet, DenoiserModel, NoiseSchedule, PoseLatent};
use crate::metrics::MetricReport;
use crate::rng::stream;
use crate::scorer::{build_scorer_input, ScorerError, ScorerModel};
use crate::skeleton::{Sample, SkeletonTopology, WorldError};
use rand::Rng;
use serde::Deserialize;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrefsError {
    #[error("need m >= 2k candidates per sample, got m={m}, k={k}")]
    TooFewCandidates { m: usize, k: usize },
    #[error("pair references unknown sample id {0}")]
    UnknownSample(u64),
    #[error("model architectures do not match")]
    ArchitectureMismatch,
    #[error("non-finite training loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("pairs io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pairs parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// How a pair's ordering was decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    ScorerRanked,
    GtRanked,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::ScorerRanked => "scorer",
            Provenance::GtRanked => "gt",
        }
    }
}

/// Winner/loser latents for one conditioning sample. `winner_key` is the
/// ranking key (raw score, or negated error for ground-truth ranking) and is
/// strictly greater than `loser_key` except in flagged degenerate ties.
#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub sample_id: u64,
    pub winner: PoseLatent,
    pub loser: PoseLatent,
    pub provenance: Provenance,
    pub winner_key: f64,
    pub loser_key: f64,
}

/// Construction stats; `n_degenerate` counts pairs whose keys tied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairBuildReport {
    pub n_pairs: usize,
    pub n_degenerate: usize,
}

/// Which metric orders candidates when ranking against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankingMetric {
    Pve,
    Mpjpe,
    PaPve,
    PaMpjpe,
}

impl RankingMetric {
    fn of(self, r: &MetricReport) -> f64 {
        match self {
            RankingMetric::Pve => r.pve_mm,
            RankingMetric::Mpjpe => r.mpjpe_mm,
            RankingMetric::PaPve => r.pa_pve_mm,
            RankingMetric::PaMpjpe => r.pa_mpjpe_mm,
        }
    }
}

/// Ranking key assigned to candidates that cannot be scored at all (for
/// example a runaway candidate that projects behind the camera); it sorts
/// below any real score.
pub const UNSCORABLE_KEY: f64 = -1e9;

/// Core pair builder shared by the scorer-ranked and ground-truth-ranked
/// variants (and by oracle cross-check tests): `ranking_key` maps a sample's
/// candidate set to one key per candidate, higher = better.
///
/// Per sample: draw `m` candidates, sort by key descending with ties broken
/// by candidate index, then draw `k` winners uniformly with replacement from
/// the top-k and `k` losers from the bottom-k using the sample's pairing
/// stream.
pub fn build_preference_dataset_with_key<F>(
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    dataset: &[Sample],
    m: usize,
    k: usize,
    seed: u64,
    provenance: Provenance,
    mut ranking_key: F,
) -> Result<(Vec<PreferencePair>, PairBuildReport), PrefsError>
where
    F: FnMut(&Sample, &CandidateSet) -> Result<Vec<f64>, PrefsError>,
{
    if k == 0 || m < 2 * k {
        return Err(PrefsError::TooFewCandidates { m, k });
    }
    let mut pairs = Vec::with_capacity(dataset.len() * k);
    let mut report = PairBuildReport::default();
    for sample in dataset {
        let candidates = sample_candidates(base, schedule, sample, m, seed);
        let keys = ranking_key(sample, &candidates)?;
        assert_eq!(keys.len(), m, "ranking key count");

        let mut order: Vec<usize> = (0..m).collect();
        // stable sort: ties keep candidate-index order
        order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).expect("keys are finite"));

        let mut pair_rng = stream(seed, "pairing", &[sample.id]);
        for _ in 0..k {
            let w = order[pair_rng.gen_range(0..k)];
            let l = order[m - k + pair_rng.gen_range(0..k)];
            if keys[w] <= keys[l] {
                report.n_degenerate += 1;
            }
            pairs.push(PreferencePair {
                sample_id: sample.id,
                winner: candidates.latents[w].clone(),
                loser: candidates.latents[l].clone(),
                provenance,
                winner_key: keys[w],
                loser_key: keys[l],
            });
            report.n_pairs += 1;
        }
    }
    Ok((pairs, report))
}

/// Scorer-ranked pairs: candidates are ranked by the scorer's raw score of
/// their projection against the observation. No ground-truth labels are
/// consulted.
pub fn build_preference_dataset(
    base: &DenoiserModel,
    scorer: &ScorerModel,
    schedule: &NoiseSchedule,
    dataset: &[Sample],
    m: usize,
    k: usize,
    seed: u64,
) -> Result<(Vec<PreferencePair>, PairBuildReport), PrefsError> {
    build_preference_dataset_with_key(
        base,
        schedule,
        dataset,
        m,
        k,
        seed,
        Provenance::ScorerRanked,
        |sample, candidates| {
            let mut inputs = Vec::with_capacity(candidates.joints3d.len());
            let mut unscorable = Vec::new();
            for (idx, joints) in candidates.joints3d.iter().enumerate() {
                match build_scorer_input(joints, &sample.camera, &sample.observation) {
                    Ok(input) => inputs.push(Some(input)),
                    Err(ScorerError::World(WorldError::BehindCamera { .. })) => {
                        inputs.push(None);
                        unscorable.push(idx);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let scorable: Vec<_> = inputs.iter().filter_map(|i| i.clone()).collect();
            let scores = scorer.score_batch(&scorable);
            let mut keys = Vec::with_capacity(inputs.len());
            let mut cursor = 0;
            for input in &inputs {
                if input.is_some() {
                    keys.push(scores[cursor]);
                    cursor += 1;
                } else {
                    keys.push(UNSCORABLE_KEY);
                }
            }
            Ok(keys)
        },
    )
}

/// Ground-truth-ranked pairs: candidates are ordered by negated
/// reconstruction error of the chosen metric against the sample's label.
pub fn build_preference_dataset_gt(
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    dataset: &[Sample],
    topology: &SkeletonTopology,
    m: usize,
    k: usize,
    metric: RankingMetric,
    seed: u64,
) -> Result<(Vec<PreferencePair>, PairBuildReport), PrefsError> {
    build_preference_dataset_with_key(
        base,
        schedule,
        dataset,
        m,
        k,
        seed,
        Provenance::GtRanked,
        |sample, candidates| {
            candidates
                .joints3d
                .iter()
                .map(|joints| {
                    let report = MetricReport::compute(joints, &sample.joints3d, topology)
                        .expect("desk-scale joint sets are non-degenerate");
                    Ok(-metric.of(&report))
                })
                .collect()
        },
    )
}

// ── pairs file ──────────────────────────────────────────────────────

fn fmt_vec(vs: &[f64]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| format!("{v:.16e}")).collect();
    format!("[{}]", parts.join(","))
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), PrefsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(
            w,
            "{{\"sample_id\":{},\"provenance\":\"{}\",\"winner_key\":{:.16e},\"loser_key\":{:.16e},\"winner\":{},\"loser\":{}}}",
            p.sample_id,
            p.provenance.as_str(),
            p.winner_key,
            p.loser_key,
            fmt_vec(&p.winner.x),
            fmt_vec(&p.loser.x),
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    sample_id: u64,
    provenance: String,
    winner_key: f64,
    loser_key: f64,
    winner: Vec<f64>,
    loser: Vec<f64>,
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, PrefsError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| PrefsError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let provenance = match rec.provenance.as_str() {
            "scorer" => Provenance::ScorerRanked,
            "gt" => Provenance::GtRanked,
            other => {
                return Err(PrefsError::Parse {
                    line: lineno + 1,
                    msg: format!("unknown provenance {other:?}"),
                })
            }
        };
        pairs.push(PreferencePair {
            sample_id: rec.sample_id,
            winner: PoseLatent { x: rec.winner },
            loser: PoseLatent { x: rec.loser },
            provenance,
            winner_key: rec.winner_key,
            loser_key: rec.loser_key,
        });
    }
    Ok(pairs)
}
