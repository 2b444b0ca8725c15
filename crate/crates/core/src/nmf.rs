//! Nonnegative matrix factorization under the generalized KL divergence,
//! fitted with multiplicative updates.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{RngStream, UnitKind};

const FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct NmfResult {
    /// N×r
    pub basis: Array2<f64>,
    /// r×L
    pub weights: Array2<f64>,
    pub divergence_trace: Vec<f64>,
}

impl NmfResult {
    pub fn reconstruction(&self) -> Array2<f64> {
        self.basis.dot(&self.weights)
    }
}

/// D(Y ‖ BH) = Σ y log(y / v) − y + v.
pub fn divergence(y: &Array2<f64>, basis: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    let v = basis.dot(weights);
    y.iter()
        .zip(v.iter())
        .map(|(&y, &v)| {
            let v = v.max(FLOOR);
            if y > 0.0 {
                y * (y / v).ln() - y + v
            } else {
                v
            }
        })
        .sum()
}

/// H ← H ⊙ Bᵀ(Y / BH) / Bᵀ1.
pub fn weight_update(y: &Array2<f64>, basis: &Array2<f64>, weights: &Array2<f64>) -> Array2<f64> {
    let (n, r) = basis.dim();
    let l = y.ncols();
    let col_sums: Vec<f64> = (0..r).map(|t| basis.column(t).sum().max(FLOOR)).collect();
    let mut out = Array2::zeros((r, l));
    let mut bh = vec![0.0; n];
    for j in 0..l {
        for (i, v) in bh.iter_mut().enumerate() {
            *v = 0.0;
            for t in 0..r {
                *v += basis[[i, t]] * weights[[t, j]];
            }
        }
        for t in 0..r {
            let mut s = 0.0;
            for i in 0..n {
                s += basis[[i, t]] * y[[i, j]] / bh[i].max(FLOOR);
            }
            out[[t, j]] = weights[[t, j]] * s / col_sums[t];
        }
    }
    out
}

/// B ← B ⊙ (Y / BH)Hᵀ / 1Hᵀ.
pub fn basis_update(y: &Array2<f64>, basis: &Array2<f64>, weights: &Array2<f64>) -> Array2<f64> {
    weight_update(
        &y.t().to_owned(),
        &weights.t().to_owned(),
        &basis.t().to_owned(),
    )
    .t()
    .to_owned()
}

/// Rank-`rank` factorization of `y`, stopping after `max_iterations` or when
/// the relative change in divergence drops below 1e-6.
pub fn nmf_divergence(
    y: &Array2<f64>,
    rank: usize,
    max_iterations: usize,
    seed: u64,
) -> Result<NmfResult> {
    if rank == 0 {
        return Err(Error::InvalidParameter(
            "NMF rank must be at least 1".into(),
        ));
    }
    if y.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(
            "NMF input must be finite and nonnegative".into(),
        ));
    }
    let (n, l) = y.dim();
    let mut rng = RngStream::for_unit(seed, UnitKind::Baseline, 0, 0);
    let scale = (y.mean().unwrap_or(1.0) / rank as f64).sqrt().max(FLOOR);
    let mut basis = Array2::from_shape_fn((n, rank), |_| scale * rng.random_range(0.5..1.5));
    let mut weights = Array2::from_shape_fn((rank, l), |_| scale * rng.random_range(0.5..1.5));
    let mut trace = vec![divergence(y, &basis, &weights)];
    for _ in 0..max_iterations {
        weights = weight_update(y, &basis, &weights);
        basis = basis_update(y, &basis, &weights);
        let d = divergence(y, &basis, &weights);
        let prev = *trace.last().expect("non-empty trace");
        trace.push(d);
        if (prev - d).abs() <= 1e-6 * prev.abs() {
            break;
        }
    }
    Ok(NmfResult {
        basis,
        weights,
        divergence_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_one_matrix_is_recovered() {
        let u = array![[1.0], [2.0], [3.0]];
        let v = array![[2.0, 1.0, 4.0, 0.5]];
        let y = u.dot(&v);
        let fit = nmf_divergence(&y, 1, 5000, 1).unwrap();
        assert!(*fit.divergence_trace.last().unwrap() < 1e-8);
    }

    #[test]
    fn divergence_never_increases() {
        let mut r = RngStream::for_unit(8, UnitKind::Test, 0, 0);
        let y = Array2::from_shape_fn((30, 20), |_| {
            if r.random::<f64>() < 0.5 {
                0.0
            } else {
                r.random_range(1.0..20.0f64).floor()
            }
        });
        let fit = nmf_divergence(&y, 3, 300, 2).unwrap();
        for w in fit.divergence_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} → {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_rows_are_handled() {
        let y = array![[0.0, 0.0], [1.0, 3.0], [2.0, 1.0]];
        let fit = nmf_divergence(&y, 2, 200, 3).unwrap();
        assert!(fit.reconstruction().iter().all(|v| v.is_finite()));
        assert!(nmf_divergence(&y, 0, 10, 3).is_err());
    }
}
