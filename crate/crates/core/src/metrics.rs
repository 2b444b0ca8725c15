//! Evaluation metrics: L1 loss on profiles and proportions, ROC AUC.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Mode {
    #[default]
    Total,
    PerColumn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnMatching {
    /// Columns already correspond.
    #[default]
    Identity,
    /// Columns of the estimate are permuted to minimize the loss.
    Hungarian,
}

/// Σ|est − truth| (or its per-column mean).
pub fn l1_loss(
    est: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    mode: L1Mode,
    matching: ColumnMatching,
) -> Result<f64> {
    if est.dim() != truth.dim() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs truth {:?}",
            est.dim(),
            truth.dim()
        )));
    }
    let k = est.ncols();
    let cost = Array2::from_shape_fn((k, k), |(p, q)| {
        est.column(p)
            .iter()
            .zip(truth.column(q))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    });
    let total = match matching {
        ColumnMatching::Identity => (0..k).map(|c| cost[[c, c]]).sum(),
        ColumnMatching::Hungarian => {
            let assignment = hungarian(&cost);
            assignment
                .iter()
                .enumerate()
                .map(|(p, &q)| cost[[p, q]])
                .sum()
        }
    };
    Ok(match mode {
        L1Mode::Total => total,
        L1Mode::PerColumn => total / k.max(1) as f64,
    })
}

/// Minimum-cost perfect matching on a square cost matrix; entry p of the
/// result is the column assigned to row p.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // Potentials u (rows), v (columns); p[j] is the row matched to column j,
    // with index 0 as a virtual row.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Area under the ROC curve from ranks, with tied scores given their
/// average rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ROC score".into()));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidParameter(
            "ROC AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (0-based) share the average 1-based rank.
        let avg = (start + end + 1) as f64 / 2.0;
        rank_sum += avg * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// AUC of `scores` for picking out dropouts among the zero entries of
/// `counts`; an entry is positive when its true S is 0.
pub fn dropout_auc(
    scores: ArrayView2<f64>,
    counts: &Array2<u64>,
    truth_observed: &Array2<u8>,
) -> Result<f64> {
    if scores.dim() != counts.dim() || truth_observed.dim() != counts.dim() {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?}, counts {:?}, truth {:?}",
            scores.dim(),
            counts.dim(),
            truth_observed.dim()
        )));
    }
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for ((idx, &y), &score) in counts.indexed_iter().zip(scores.iter()) {
        if y == 0 {
            s.push(score);
            l.push(truth_observed[idx] == 0);
        }
    }
    roc_auc(&s, &l)
}
