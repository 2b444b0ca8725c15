//! Products of a completed fit: dropout posterior, dropout calls,
//! imputation and bulk deconvolution.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::gem::{FitMode, FitResult};
use crate::gibbs::{run_bulk_estep, EStepConfig};
use crate::model::{
    classify_zeros, BulkCounts, EntryClass, ModelParams, ProfileMatrix, SingleCellCounts,
};

pub const DEFAULT_CALL_THRESHOLD: f64 = 0.5;

/// π̃ = E[S | X, Y, θ] from the final E-step.
pub fn dropout_posterior(result: &FitResult) -> Array2<f64> {
    result.stats.observed.clone()
}

/// Estimated S: 0 where Y = 0 and π̃ < threshold, 1 elsewhere.
pub fn call_dropouts(
    posterior: ArrayView2<f64>,
    counts: &Array2<u64>,
    threshold: f64,
) -> Result<Array2<u8>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} must lie in [0, 1]"
        )));
    }
    if posterior.dim() != counts.dim() {
        return Err(Error::DimensionMismatch(format!(
            "posterior {:?} vs counts {:?}",
            posterior.dim(),
            counts.dim()
        )));
    }
    Ok(Array2::from_shape_fn(counts.dim(), |(i, l)| {
        u8::from(!(counts[[i, l]] == 0 && posterior[[i, l]] < threshold))
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputedMatrix {
    pub values: Array2<f64>,
    /// `Dropout` marks imputed entries.
    pub mask: Array2<EntryClass>,
}

/// Replaces called dropouts by A[i][G_l]·R_l and copies everything else.
pub fn impute(
    sc: &SingleCellCounts,
    calls: &Array2<u8>,
    profile: &ProfileMatrix,
    round: bool,
) -> Result<ImputedMatrix> {
    if profile.n_genes() != sc.n_genes() || profile.n_types() != sc.n_types() {
        return Err(Error::DimensionMismatch(format!(
            "profile is {}×{}, data has {} genes and {} types",
            profile.n_genes(),
            profile.n_types(),
            sc.n_genes(),
            sc.n_types()
        )));
    }
    let partition = classify_zeros(sc.counts(), calls)?;
    let y = sc.counts();
    let values = Array2::from_shape_fn(y.dim(), |(i, l)| match partition.classes[[i, l]] {
        EntryClass::Dropout => {
            let v = profile.get(i, sc.labels()[l]) * sc.depths()[l] as f64;
            if round {
                v.round()
            } else {
                v
            }
        }
        _ => y[[i, l]] as f64,
    });
    Ok(ImputedMatrix {
        values,
        mask: partition.classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deconvolution {
    /// K×M
    pub proportions: Array2<f64>,
    /// Most abundant type per sample.
    pub dominant_type: Vec<usize>,
}

impl Deconvolution {
    fn from_proportions(proportions: Array2<f64>) -> Self {
        let dominant_type = proportions
            .columns()
            .into_iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(t, _)| t)
                    .unwrap_or(0)
            })
            .collect();
        Self {
            proportions,
            dominant_type,
        }
    }
}

/// E[W | X, θ] for Gibbs fits, the MAP W for fast fits.
pub fn deconvolve(result: &FitResult) -> Result<Deconvolution> {
    if result.mode == FitMode::SingleCellOnly || result.stats.n_bulk() == 0 {
        return Err(Error::NoBulkData);
    }
    Ok(Deconvolution::from_proportions(
        result.stats.weights.clone(),
    ))
}

/// Posterior mean proportions with θ held fixed (no EM).
pub fn deconvolve_with_params(
    bulk: &BulkCounts,
    params: &ModelParams,
    config: &EStepConfig,
    seed: u64,
) -> Result<Deconvolution> {
    let stats = run_bulk_estep(bulk, params, config, seed)?;
    Ok(Deconvolution::from_proportions(stats.weights))
}
