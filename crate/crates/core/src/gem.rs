//! The Gibbs-EM loop: initialization, E/M alternation, convergence, the
//! single-cell-only submodel and the MAP fast path for bulk proportions.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{run_estep, BulkStats, EStepConfig, SufficientStats};
use crate::model::{logit, BulkCounts, ModelParams, ProfileMatrix, SingleCellCounts};
use crate::mstep::{elbo, m_step, project_capped_simplex, MStepConfig};
use crate::rng::derive_seed;
use crate::sim::naive_profile;

/// Clamp applied before normalizing a MAP update of W.
pub const MAP_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMode {
    #[default]
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "sc-only")]
    SingleCellOnly,
    #[serde(rename = "map-fast")]
    MapFast,
}

impl FitMode {
    pub fn uses_bulk(self) -> bool {
        !matches!(self, FitMode::SingleCellOnly)
    }
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMode::Joint => "joint",
            FitMode::SingleCellOnly => "sc-only",
            FitMode::MapFast => "map-fast",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub estep: EStepConfig,
    pub mstep: MStepConfig,
    pub max_em_iterations: usize,
    /// Relative ELBO change below which an iteration counts as stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations needed to declare convergence.
    pub patience: usize,
    pub mode: FitMode,
    pub seed: u64,
    /// Initial α; all ones when absent.
    pub prior_alpha: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            estep: EStepConfig::default(),
            mstep: MStepConfig::default(),
            max_em_iterations: 100,
            tolerance: 1e-4,
            patience: 3,
            mode: FitMode::Joint,
            seed: 0,
            prior_alpha: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.estep.validate()?;
        self.mstep.validate()?;
        if self.max_em_iterations == 0 {
            return Err(Error::Config("max_em_iterations must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if let Some(a) = &self.prior_alpha {
            if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("prior_alpha entries must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub mode: FitMode,
    pub params: ModelParams,
    pub stats: SufficientStats,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iteration_seconds: Vec<f64>,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.elbo_trace.len()
    }
}

/// Starting values: projected naive profile, α = 1 (or the prior), and
/// dropout parameters giving a 60% maximal and 30% average dropout rate
/// at the naive profile.
pub fn init_params(
    sc: &SingleCellCounts,
    prior_alpha: Option<&[f64]>,
    profile_floor: f64,
) -> Result<ModelParams> {
    let naive = naive_profile(sc)?;
    let (n, k) = naive.dim();
    let mut profile = Array2::zeros((n, k));
    for t in 0..k {
        let col = project_capped_simplex(&naive.column(t).to_vec(), profile_floor)?;
        profile.column_mut(t).assign(&Array1::from(col));
    }
    let alpha = match prior_alpha {
        Some(a) if a.len() != k => {
            return Err(Error::DimensionMismatch(format!(
                "prior alpha has {} entries for {k} cell types",
                a.len()
            )))
        }
        Some(a) => a.to_vec(),
        None => vec![1.0; k],
    };
    let mean_naive = naive.mean().expect("non-empty profile");
    let mu_kappa = logit(0.4);
    let mu_tau = (logit(0.7) - mu_kappa) / mean_naive;
    Ok(ModelParams {
        profile: ProfileMatrix::from_unchecked(profile),
        alpha,
        mu_kappa,
        var_kappa: 0.5,
        mu_tau,
        var_tau: (0.1 * mu_tau).powi(2),
    })
}

/// True once the last `patience` relative ELBO changes are all below
/// `tolerance`.
pub fn convergence_check(trace: &[f64], tolerance: f64, patience: usize) -> bool {
    if trace.len() < patience + 1 {
        return false;
    }
    trace[trace.len() - patience - 1..]
        .windows(2)
        .all(|w| ((w[1] - w[0]) / w[1].abs().max(f64::MIN_POSITIVE)).abs() < tolerance)
}

/// One fixed-point update of the MAP proportions, column by column:
/// W_kj ← W_kj Σ_i A_ik X_ij / (AW)_ij + α_k − 1, clamped and renormalized.
pub fn map_w_update(
    w: &Array2<f64>,
    x: &BulkCounts,
    profile: &ProfileMatrix,
    alpha: &[f64],
) -> Result<Array2<f64>> {
    let a = profile.as_array();
    let (n, k) = a.dim();
    let m = x.n_samples();
    if w.dim() != (k, m) || x.n_genes() != n || alpha.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, expected {k}×{m} for a {n}-gene profile",
            w.dim()
        )));
    }
    let mut out = Array2::zeros((k, m));
    let mut aw = vec![0.0; n];
    for j in 0..m {
        for (i, v) in aw.iter_mut().enumerate() {
            *v = 0.0;
            for t in 0..k {
                *v += a[[i, t]] * w[[t, j]];
            }
        }
        for t in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                s += a[[i, t]] * x.counts()[[i, j]] as f64 / aw[i];
            }
            out[[t, j]] = (w[[t, j]] * s + (alpha[t] - 1.0)).max(MAP_WEIGHT_FLOOR);
        }
        let total: f64 = out.column(j).sum();
        out.column_mut(j).mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Plug-in bulk stats at fixed W: E[Z̃_ijk] = X_ij A_ik W_kj / (AW)_ij.
pub fn map_bulk_stats(w: &Array2<f64>, x: &BulkCounts, profile: &ProfileMatrix) -> BulkStats {
    let a = profile.as_array();
    let (n, k) = a.dim();
    let m = x.n_samples();
    let mut alloc = Array3::zeros((n, m, k));
    for j in 0..m {
        for i in 0..n {
            let xij = x.counts()[[i, j]] as f64;
            if xij == 0.0 {
                continue;
            }
            let aw: f64 = (0..k).map(|t| a[[i, t]] * w[[t, j]]).sum();
            for t in 0..k {
                alloc[[i, j, t]] = xij * a[[i, t]] * w[[t, j]] / aw;
            }
        }
    }
    let log_weights = w.mapv(f64::ln);
    let mut alloc_log_weights = Array2::zeros((k, m));
    for j in 0..m {
        for t in 0..k {
            let total: f64 = (0..n).map(|i| alloc[[i, j, t]]).sum();
            alloc_log_weights[[t, j]] = total * log_weights[[t, j]];
        }
    }
    BulkStats {
        alloc,
        weights: w.clone(),
        log_weights,
        alloc_log_weights,
    }
}

fn check_bulk(bulk: &BulkCounts, sc: &SingleCellCounts) -> Result<()> {
    if bulk.n_genes() != sc.n_genes() {
        return Err(Error::DimensionMismatch(format!(
            "bulk has {} genes, single-cell data {}",
            bulk.n_genes(),
            sc.n_genes()
        )));
    }
    Ok(())
}

fn run_loop<F>(sc: &SingleCellCounts, config: &FitConfig, mut estep: F) -> Result<FitResult>
where
    F: FnMut(usize, &ModelParams, u64) -> Result<SufficientStats>,
{
    config.validate()?;
    let floor = config.mstep.profile_floor_for(sc.n_genes());
    let mut params = init_params(sc, config.prior_alpha.as_deref(), floor)?;
    let mut trace = Vec::new();
    let mut seconds = Vec::new();
    let mut converged = false;
    let mut stats = None;
    for it in 0..config.max_em_iterations {
        let start = Instant::now();
        let seed = derive_seed(config.seed, it as u64);
        let s = estep(it, &params, seed)?;
        params = m_step(&params, &s, sc, &config.mstep)?;
        let value = elbo(&params, &s, sc)?;
        trace.push(value);
        seconds.push(start.elapsed().as_secs_f64());
        log::info!(
            "{} iteration {}: ELBO {:.6e} ({:.2}s)",
            config.mode,
            it + 1,
            value,
            seconds.last().copied().unwrap_or_default()
        );
        stats = Some(s);
        if convergence_check(&trace, config.tolerance, config.patience) {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        mode: config.mode,
        params,
        stats: stats.expect("at least one iteration"),
        elbo_trace: trace,
        converged,
        iteration_seconds: seconds,
    })
}

/// Joint fit over bulk and single-cell data with a Gibbs E-step.
pub fn fit_gem(bulk: &BulkCounts, sc: &SingleCellCounts, config: &FitConfig) -> Result<FitResult> {
    check_bulk(bulk, sc)?;
    let config = FitConfig {
        mode: FitMode::Joint,
        ..config.clone()
    };
    run_loop(sc, &config, |_, params, seed| {
        run_estep(Some(bulk), sc, params, &config.estep, seed)
    })
}

/// The submodel that uses single-cell data only; α stays at its start value.
pub fn fit_single_cell_only(sc: &SingleCellCounts, config: &FitConfig) -> Result<FitResult> {
    let config = FitConfig {
        mode: FitMode::SingleCellOnly,
        ..config.clone()
    };
    run_loop(sc, &config, |_, params, seed| {
        run_estep(None, sc, params, &config.estep, seed)
    })
}

/// Joint fit where the bulk E-step is one MAP update of W per iteration.
pub fn fit_map_fast(
    bulk: &BulkCounts,
    sc: &SingleCellCounts,
    config: &FitConfig,
) -> Result<FitResult> {
    check_bulk(bulk, sc)?;
    let config = FitConfig {
        mode: FitMode::MapFast,
        ..config.clone()
    };
    let mut w: Option<Array2<f64>> = None;
    run_loop(sc, &config, |_, params, seed| {
        let current = w.take().unwrap_or_else(|| {
            let total: f64 = params.alpha.iter().sum();
            Array2::from_shape_fn((params.alpha.len(), bulk.n_samples()), |(t, _)| {
                params.alpha[t] / total
            })
        });
        let next = map_w_update(&current, bulk, &params.profile, &params.alpha)?;
        let mut stats = run_estep(None, sc, params, &config.estep, seed)?;
        stats.set_bulk(map_bulk_stats(&next, bulk, &params.profile))?;
        w = Some(next);
        Ok(stats)
    })
}

/// Dispatches on `config.mode`.
pub fn fit(
    bulk: Option<&BulkCounts>,
    sc: &SingleCellCounts,
    config: &FitConfig,
) -> Result<FitResult> {
    match (config.mode, bulk) {
        (FitMode::SingleCellOnly, _) => fit_single_cell_only(sc, config),
        (FitMode::Joint, Some(x)) => fit_gem(x, sc, config),
        (FitMode::MapFast, Some(x)) => fit_map_fast(x, sc, config),
        (_, None) => Err(Error::NoBulkData),
    }
}
