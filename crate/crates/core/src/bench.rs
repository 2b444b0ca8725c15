//! Simulation benchmark: for each seed, simulate, fit the naive estimator,
//! the single-cell submodel and the joint model, and score them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gem::{fit_gem, fit_single_cell_only, FitConfig, FitResult};
use crate::metrics::{dropout_auc, l1_loss, ColumnMatching, L1Mode};
use crate::nmf::nmf_divergence;
use crate::rng::derive_seed;
use crate::sim::{naive_profile, simulate, SimConfig, Simulation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    pub fit: FitConfig,
    pub nmf_rank: usize,
    pub nmf_max_iterations: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            sim: SimConfig::default(),
            fit: FitConfig::default(),
            nmf_rank: 3,
            nmf_max_iterations: 5000,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs at least one seed".into()));
        }
        if self.nmf_rank == 0 {
            return Err(Error::Config("nmf_rank must be positive".into()));
        }
        if self.sim.n_bulk == 0 {
            return Err(Error::Config("benchmark needs bulk samples".into()));
        }
        self.sim.validate()?;
        self.fit.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "sc-only")]
    SingleCellOnly,
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "nmf")]
    Nmf,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Naive,
        Method::SingleCellOnly,
        Method::Joint,
        Method::Nmf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::SingleCellOnly => "sc-only",
            Method::Joint => "joint",
            Method::Nmf => "nmf",
        }
    }
}

/// One method on one seed. Missing metrics do not apply to the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub method: Method,
    pub profile_l1: Option<f64>,
    /// Mean over samples of Σ_k |Ŵ_kj − W_kj|.
    pub proportion_l1: Option<f64>,
    pub dropout_auc: Option<f64>,
    pub em_iterations: Option<usize>,
    pub converged: Option<bool>,
    pub seconds_per_iteration: Option<f64>,
    /// Set when the seed failed; other fields are then empty.
    pub error: Option<String>,
}

impl BenchmarkRow {
    fn empty(seed: u64, method: Method) -> Self {
        Self {
            seed,
            method,
            profile_l1: None,
            proportion_l1: None,
            dropout_auc: None,
            em_iterations: None,
            converged: None,
            seconds_per_iteration: None,
            error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Fits for one seed, kept so callers can inspect them.
pub struct SeedRun {
    pub simulation: Simulation,
    pub single_cell: FitResult,
    pub joint: FitResult,
}

pub fn run_seed(sim_config: &SimConfig, fit_config: &FitConfig, seed: u64) -> Result<SeedRun> {
    let simulation = simulate(&SimConfig {
        seed,
        ..sim_config.clone()
    })?;
    let fit_config = FitConfig {
        seed: derive_seed(seed, 1),
        ..fit_config.clone()
    };
    let bulk = simulation.bulk.as_ref().ok_or(Error::NoBulkData)?;
    let single_cell = fit_single_cell_only(&simulation.sc, &fit_config)?;
    let joint = fit_gem(bulk, &simulation.sc, &fit_config)?;
    Ok(SeedRun {
        simulation,
        single_cell,
        joint,
    })
}

fn fit_row(seed: u64, method: Method, sim: &Simulation, fit: &FitResult) -> Result<BenchmarkRow> {
    let truth = &sim.truth;
    let mut row = BenchmarkRow::empty(seed, method);
    row.profile_l1 = Some(l1_loss(
        fit.params.profile.view(),
        truth.profile.view(),
        L1Mode::Total,
        ColumnMatching::Identity,
    )?);
    if fit.stats.n_bulk() > 0 {
        row.proportion_l1 = Some(l1_loss(
            fit.stats.weights.view(),
            truth.weights.view(),
            L1Mode::PerColumn,
            ColumnMatching::Identity,
        )?);
    }
    let scores = fit.stats.observed.mapv(|p| 1.0 - p);
    row.dropout_auc = Some(dropout_auc(
        scores.view(),
        sim.sc.counts(),
        &truth.observed,
    )?);
    row.em_iterations = Some(fit.iterations());
    row.converged = Some(fit.converged);
    row.seconds_per_iteration =
        Some(fit.iteration_seconds.iter().sum::<f64>() / fit.iterations().max(1) as f64);
    Ok(row)
}

/// Scores all methods on one seed's fits.
pub fn score_seed(
    run: &SeedRun,
    seed: u64,
    nmf_rank: usize,
    nmf_max_iterations: usize,
) -> Result<Vec<BenchmarkRow>> {
    let sim = &run.simulation;
    let mut naive = BenchmarkRow::empty(seed, Method::Naive);
    let a = naive_profile(&sim.sc)?;
    naive.profile_l1 = Some(l1_loss(
        a.view(),
        sim.truth.profile.view(),
        L1Mode::Total,
        ColumnMatching::Identity,
    )?);

    let y = sim.sc.counts().mapv(|v| v as f64);
    let nmf = nmf_divergence(&y, nmf_rank, nmf_max_iterations, seed)?;
    let mut nmf_row = BenchmarkRow::empty(seed, Method::Nmf);
    nmf_row.dropout_auc = Some(dropout_auc(
        nmf.reconstruction().view(),
        sim.sc.counts(),
        &sim.truth.observed,
    )?);

    Ok(vec![
        naive,
        fit_row(seed, Method::SingleCellOnly, sim, &run.single_cell)?,
        fit_row(seed, Method::Joint, sim, &run.joint)?,
        nmf_row,
    ])
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn aggregate(rows: &[BenchmarkRow]) -> Vec<Aggregate> {
    type Getter = fn(&BenchmarkRow) -> Option<f64>;
    let metrics: [(&str, Getter); 4] = [
        ("profile_l1", |r| r.profile_l1),
        ("proportion_l1", |r| r.proportion_l1),
        ("dropout_auc", |r| r.dropout_auc),
        ("seconds_per_iteration", |r| r.seconds_per_iteration),
    ];
    let mut out = Vec::new();
    for method in Method::ALL {
        for (name, get) in metrics {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method)
                .filter_map(get)
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&values);
            out.push(Aggregate {
                method,
                metric: name.to_string(),
                mean,
                sd,
                n: values.len(),
            });
        }
    }
    out
}

/// Runs every seed; a failing seed yields error rows instead of aborting.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        log::info!("benchmark seed {seed}");
        let result = run_seed(&config.sim, &config.fit, seed)
            .and_then(|run| score_seed(&run, seed, config.nmf_rank, config.nmf_max_iterations));
        match result {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                for method in Method::ALL {
                    let mut row = BenchmarkRow::empty(seed, method);
                    row.error = Some(e.to_string());
                    rows.push(row);
                }
            }
        }
    }
    let aggregates = aggregate(&rows);
    Ok(BenchmarkReport { rows, aggregates })
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

impl BenchmarkReport {
    /// Per-seed rows followed by `mean` and `sd` rows per method.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "seed\tmethod\tprofile_l1\tproportion_l1\tdropout_auc\tem_iterations\tconverged\tseconds_per_iteration\terror\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.method.name(),
                cell(r.profile_l1),
                cell(r.proportion_l1),
                cell(r.dropout_auc),
                cell(r.em_iterations),
                cell(r.converged),
                cell(r.seconds_per_iteration),
                r.error.as_deref().unwrap_or("")
            );
        }
        for stat in ["mean", "sd"] {
            for method in Method::ALL {
                let get = |metric: &str| {
                    self.aggregates
                        .iter()
                        .find(|a| a.method == method && a.metric == metric)
                        .map(|a| if stat == "mean" { a.mean } else { a.sd })
                };
                let _ = writeln!(
                    s,
                    "{stat}\t{}\t{}\t{}\t{}\tNA\tNA\t{}\t",
                    method.name(),
                    cell(get("profile_l1")),
                    cell(get("proportion_l1")),
                    cell(get("dropout_auc")),
                    cell(get("seconds_per_iteration"))
                );
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let seeds: std::collections::BTreeSet<u64> = self.rows.iter().map(|r| r.seed).collect();
        let failed = self
            .rows
            .iter()
            .filter(|r| r.error.is_some())
            .map(|r| r.seed)
            .collect::<std::collections::BTreeSet<_>>();
        let _ = writeln!(s, "{} seeds, {} failed", seeds.len(), failed.len());
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:8} {:22} {:.4} ± {:.4} (n = {})",
                a.method.name(),
                a.metric,
                a.mean,
                a.sd,
                a.n
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::EStepConfig;

    fn tiny() -> BenchmarkConfig {
        BenchmarkConfig {
            seeds: vec![1, 2],
            sim: SimConfig {
                n_genes: 60,
                n_cells: 15,
                n_bulk: 8,
                n_markers: 2,
                n_anti_markers: 2,
                n_housekeeping: 10,
                ..SimConfig::default()
            },
            fit: FitConfig {
                estep: EStepConfig {
                    n_sweeps: 10,
                    ..EStepConfig::default()
                },
                max_em_iterations: 2,
                ..FitConfig::default()
            },
            nmf_rank: 3,
            nmf_max_iterations: 50,
        }
    }

    #[test]
    fn report_has_rows_per_method_and_aggregates() {
        let report = run_benchmark(&tiny()).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert!(report.rows.iter().all(|r| r.error.is_none()));
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 1 + 8 + 8);
        assert!(lines.iter().filter(|l| l.starts_with("mean\t")).count() == 4);
        let joint = report
            .aggregates
            .iter()
            .find(|a| a.method == Method::Joint && a.metric == "seconds_per_iteration");
        assert!(joint.is_some_and(|a| a.mean > 0.0));
        assert!(report.summary().contains("2 seeds, 0 failed"));
    }

    #[test]
    fn mean_and_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_sd(&[4.0]).1, 0.0);
    }
}
