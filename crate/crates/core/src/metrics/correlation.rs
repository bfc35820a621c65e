//! Pearson and Spearman correlation with average-rank tie handling.

use super::MetricsError;

fn validate(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::SizeMismatch {
            lhs: xs.len(),
            rhs: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            need: 3,
            got: xs.len(),
        });
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    validate(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub(crate) fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean of (i+1)..=(j+1)
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average-ranked values.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    validate(xs, ys)?;
    plcc(&average_ranks(xs), &average_ranks(ys))
}
