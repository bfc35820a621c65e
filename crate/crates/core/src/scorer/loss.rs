//! Pairwise ranking losses: the single-pair probabilistic ranking cost and
//! the four-metric sum over all ordered candidate pairs.

use super::ScorerError;
use crate::metrics::MetricReport;
use crate::tensor::{Tape, Tensor, Var};

/// Score differences are capped at this magnitude before the logistic, so
/// the loss stays finite even for runaway score gaps.
pub const RANKNET_CLAMP: f64 = 30.0;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Cross-entropy on the logistic of a score difference:
/// `-y log s(d) - (1-y) log(1 - s(d))` with `d = s_m - s_n` clamped.
///
/// Branching on the label keeps the swap identity
/// `loss(a, b, 1) == loss(b, a, 0)` exact in floating point.
pub fn ranknet_pair_loss(s_m: f64, s_n: f64, y: f64) -> f64 {
    assert!(y == 0.0 || y == 1.0, "pair label must be 0 or 1, got {y}");
    let d = (s_m - s_n).clamp(-RANKNET_CLAMP, RANKNET_CLAMP);
    if y == 1.0 {
        softplus(-d) // -log sigmoid(d)
    } else {
        softplus(d) // -log(1 - sigmoid(d))
    }
}

/// Strict-inequality pair labels for one metric: 1 when the row candidate
/// has strictly lower error than the column candidate, 0 otherwise (ties
/// count as "not better").
fn pair_label(err_m: f64, err_n: f64) -> f64 {
    if err_m < err_n {
        1.0
    } else {
        0.0
    }
}

/// Total ranking loss over all ordered pairs (m, n), m != n, summed across
/// the four reconstruction metrics.
pub fn scorer_loss(scores: &[f64], labels: &[MetricReport]) -> Result<f64, ScorerError> {
    if scores.len() < 2 {
        return Err(ScorerError::TooFewCandidates { got: scores.len() });
    }
    if scores.len() != labels.len() {
        return Err(ScorerError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let m_count = scores.len();
    let mut total = 0.0;
    for m in 0..m_count {
        for n in 0..m_count {
            if m == n {
                continue;
            }
            let (em, en) = (labels[m].values(), labels[n].values());
            for k in 0..4 {
                total += ranknet_pair_loss(scores[m], scores[n], pair_label(em[k], en[k]));
            }
        }
    }
    Ok(total)
}

/// Tape version of [`scorer_loss`] for training: `scores` is an `[M, 1]`
/// column on the tape; returns the scalar loss node.
///
/// Vectorized as `softplus(clamp(D)) - Y .* clamp(D)` on the difference
/// matrix `D[m][n] = s_m - s_n`, masked off the diagonal.
pub fn scorer_loss_tape(
    tape: &mut Tape,
    scores: Var,
    labels: &[MetricReport],
) -> Result<Var, ScorerError> {
    let m_count = labels.len();
    if m_count < 2 {
        return Err(ScorerError::TooFewCandidates { got: m_count });
    }
    assert_eq!(
        tape.value(scores).shape(),
        &[m_count, 1],
        "scores must be an [M, 1] column"
    );

    let ones = tape.leaf_const(Tensor::new(vec![1, m_count], vec![1.0; m_count]));
    let tiled = tape.matmul(scores, ones); // row m = s_m everywhere
    let tiled_t = tape.transpose(tiled);
    let diff = tape.sub(tiled, tiled_t); // D[m][n] = s_m - s_n
    let clamped = tape.clamp(diff, -RANKNET_CLAMP, RANKNET_CLAMP);
    let softplus_d = tape.softplus(clamped);

    let mut off_diag = vec![1.0; m_count * m_count];
    for i in 0..m_count {
        off_diag[i * m_count + i] = 0.0;
    }
    let mask = tape.leaf_const(Tensor::new(vec![m_count, m_count], off_diag));

    let mut total: Option<Var> = None;
    for k in 0..4 {
        let mut y = vec![0.0; m_count * m_count];
        for m in 0..m_count {
            for n in 0..m_count {
                if m != n {
                    y[m * m_count + n] = pair_label(labels[m].values()[k], labels[n].values()[k]);
                }
            }
        }
        let y_const = tape.leaf_const(Tensor::new(vec![m_count, m_count], y));
        let yd = tape.hadamard(y_const, clamped);
        let term = tape.sub(softplus_d, yd);
        let masked = tape.hadamard(mask, term);
        let summed = tape.sum_all(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, summed),
            None => summed,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn report(values: [f64; 4]) -> MetricReport {
        MetricReport {
            pve_mm: values[0],
            mpjpe_mm: values[1],
            pa_pve_mm: values[2],
            pa_mpjpe_mm: values[3],
        }
    }

    #[test]
    fn equal_scores_give_log_two() {
        let ln2 = std::f64::consts::LN_2;
        assert!((ranknet_pair_loss(1.3, 1.3, 1.0) - ln2).abs() < 1e-12);
        assert!((ranknet_pair_loss(1.3, 1.3, 0.0) - ln2).abs() < 1e-12);
    }

    #[test]
    fn unit_gap_matches_closed_form() {
        // -log sigmoid(1) = softplus(-1)
        let expected = (1.0 + (-1.0_f64).exp()).ln();
        assert!((ranknet_pair_loss(2.0, 1.0, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn clamp_keeps_the_wrong_side_finite() {
        let loss = ranknet_pair_loss(31.0, 1.0, 0.0); // gap clamped to 30
        assert!((loss - 30.0).abs() < 1e-9, "{loss}");
        let loss = ranknet_pair_loss(500.0, 0.0, 0.0);
        assert!(loss.is_finite() && (loss - 30.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_the_pair_flips_the_label() {
        let (a, b) = (0.7, -0.4);
        assert_eq!(
            ranknet_pair_loss(a, b, 1.0).to_bits(),
            ranknet_pair_loss(b, a, 0.0).to_bits()
        );
    }

    #[test]
    fn two_tied_candidates_total_eight_log_two() {
        let r = report([1.0, 1.0, 1.0, 1.0]);
        let total = scorer_loss(&[0.5, 0.5], &[r, r]).unwrap();
        assert!((total - 8.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((total - 5.545177).abs() < 1e-6);
    }

    #[test]
    fn perfectly_ordered_scores_drive_the_loss_to_zero() {
        let good = report([1.0, 1.0, 1.0, 1.0]);
        let bad = report([9.0, 9.0, 9.0, 9.0]);
        let with_gap = |g: f64| scorer_loss(&[g, 0.0], &[good, bad]).unwrap();
        assert!(with_gap(5.0) < with_gap(2.0));
        assert!(with_gap(25.0) < 1e-9);
    }

    #[test]
    fn brute_force_oracle_agrees_on_a_random_case() {
        // independent double loop written out the slow way
        let mut rng = crate::rng::stream(31, "test-scorer-loss", &[]);
        let scores: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<MetricReport> = (0..3)
            .map(|_| {
                report([
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                ])
            })
            .collect();

        let mut oracle = 0.0;
        for m in 0..3 {
            for n in 0..3 {
                if m == n {
                    continue;
                }
                for k in 0..4 {
                    let y = if labels[m].values()[k] < labels[n].values()[k] {
                        1.0
                    } else {
                        0.0
                    };
                    let d: f64 = (scores[m] - scores[n]).clamp(-30.0, 30.0);
                    oracle += -y * (sigmoid(d)).ln() - (1.0 - y) * (1.0 - sigmoid(d)).ln();
                }
            }
        }
        let got = scorer_loss(&scores, &labels).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn loss_is_invariant_to_candidate_relabeling() {
        let scores = [0.3, -1.2, 0.8, 0.0];
        let labels = [
            report([10.0, 20.0, 5.0, 8.0]),
            report([30.0, 10.0, 7.0, 6.0]),
            report([20.0, 15.0, 6.0, 9.0]),
            report([25.0, 12.0, 5.5, 7.0]),
        ];
        let base = scorer_loss(&scores, &labels).unwrap();
        let perm = [2usize, 0, 3, 1];
        let p_scores: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let p_labels: Vec<MetricReport> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = scorer_loss(&p_scores, &p_labels).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn too_few_candidates_rejected() {
        assert!(matches!(
            scorer_loss(&[1.0], &[report([1.0; 4])]),
            Err(ScorerError::TooFewCandidates { got: 1 })
        ));
    }

    #[test]
    fn tape_version_matches_the_plain_version() {
        let mut rng = crate::rng::stream(32, "test-scorer-loss-tape", &[]);
        for m_count in [2usize, 3, 6] {
            let scores: Vec<f64> = (0..m_count).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<MetricReport> = (0..m_count)
                .map(|_| {
                    report([
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                    ])
                })
                .collect();
            let plain = scorer_loss(&scores, &labels).unwrap();
            let mut tape = Tape::new();
            let s = tape.leaf_const(Tensor::new(vec![m_count, 1], scores.clone()));
            let loss = scorer_loss_tape(&mut tape, s, &labels).unwrap();
            let got = tape.value(loss).item();
            assert!((got - plain).abs() < 1e-10, "M={m_count}: {got} vs {plain}");
        }
    }
}
