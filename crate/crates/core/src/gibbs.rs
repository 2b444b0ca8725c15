//! Gibbs E-step.
//!
//! Given θ, bulk samples and single cells are conditionally independent, so
//! each unit runs its own chain on its own random streams. For a cell the
//! sweep order is ω → (κ, τ) → S; for a bulk sample it is Z̃ → W. Every
//! retained sweep adds one joint draw to the [`SufficientStats`].

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, BulkCounts, ModelParams, ProfileMatrix, SingleCellCounts};
use crate::rng::{RngStream, UnitKind};
use crate::samplers::{
    bernoulli_draw, dirichlet_draw_with_log, multinomial_into, mvn2_draw, pg_draw_unchecked,
};

/// log W is floored here before accumulation.
const LOG_WEIGHT_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EStepConfig {
    pub n_sweeps: usize,
    pub burn_in_fraction: f64,
    pub thinning: usize,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            n_sweeps: 200,
            burn_in_fraction: 0.2,
            thinning: 1,
        }
    }
}

impl EStepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sweeps == 0 {
            return Err(Error::Config("n_sweeps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(format!(
                "burn_in_fraction {} must lie in [0, 1)",
                self.burn_in_fraction
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        if self.burn_in() >= self.n_sweeps {
            return Err(Error::Config("burn-in leaves no sweeps".into()));
        }
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        (self.n_sweeps as f64 * self.burn_in_fraction).floor() as usize
    }

    pub fn is_retained(&self, sweep: usize) -> bool {
        let b = self.burn_in();
        sweep >= b && (sweep - b).is_multiple_of(self.thinning)
    }

    pub fn n_retained(&self) -> usize {
        (0..self.n_sweeps).filter(|&s| self.is_retained(s)).count()
    }
}

/// Chain state of one cell, with cached ψ_i = κ + τ A[i][G] and
/// u = Σ_i A[i][G] S_i.
#[derive(Clone, Debug, PartialEq)]
pub struct CellChain {
    pub kappa: f64,
    pub tau: f64,
    pub observed: Vec<u8>,
    pub omega: Vec<f64>,
    psi: Vec<f64>,
    mass: f64,
}

impl CellChain {
    /// S = 1 everywhere, (κ, τ) at the prior means.
    pub fn init(profile_col: &[f64], mu_kappa: f64, mu_tau: f64) -> Self {
        let mut c = Self {
            kappa: mu_kappa,
            tau: mu_tau,
            observed: vec![1; profile_col.len()],
            omega: vec![0.0; profile_col.len()],
            psi: vec![0.0; profile_col.len()],
            mass: 0.0,
        };
        c.refresh_psi(profile_col);
        c.mass = c.recompute_mass(profile_col);
        c
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// Running Σ_i A[i][G] S_i.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn recompute_mass(&self, profile_col: &[f64]) -> f64 {
        profile_col
            .iter()
            .zip(&self.observed)
            .map(|(&a, &s)| a * f64::from(s))
            .sum()
    }

    fn refresh_psi(&mut self, profile_col: &[f64]) {
        for (p, &a) in self.psi.iter_mut().zip(profile_col) {
            *p = self.kappa + self.tau * a;
        }
    }

    /// ω_i ~ PG(1, ψ_i).
    pub fn sample_omega<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (w, &p) in self.omega.iter_mut().zip(&self.psi) {
            *w = pg_draw_unchecked(rng, p);
        }
    }

    /// (κ, τ) ~ N(m, V⁻¹) given ω and S; refreshes the ψ cache.
    pub fn sample_kappa_tau<R: Rng + ?Sized>(
        &mut self,
        profile_col: &[f64],
        params: &ModelParams,
        rng: &mut R,
    ) -> Result<()> {
        let (mean, precision) = self.kappa_tau_conditional(profile_col, params);
        let [k, t] = mvn2_draw(rng, mean, precision)?;
        self.kappa = k;
        self.tau = t;
        self.refresh_psi(profile_col);
        Ok(())
    }

    /// Mean m and precision V of the (κ, τ) full conditional.
    pub fn kappa_tau_conditional(
        &self,
        profile_col: &[f64],
        params: &ModelParams,
    ) -> ([f64; 2], [[f64; 2]; 2]) {
        let (mut sw, mut swa, mut swa2, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&w, &a), &s) in self.omega.iter().zip(profile_col).zip(&self.observed) {
            sw += w;
            swa += w * a;
            swa2 += w * a * a;
            let centered = f64::from(s) - 0.5;
            r1 += centered;
            r2 += centered * a;
        }
        let v11 = sw + 1.0 / params.var_kappa;
        let v12 = swa;
        let v22 = swa2 + 1.0 / params.var_tau;
        r1 += params.mu_kappa / params.var_kappa;
        r2 += params.mu_tau / params.var_tau;
        let det = v11 * v22 - v12 * v12;
        let m = [(v22 * r1 - v12 * r2) / det, (v11 * r2 - v12 * r1) / det];
        (m, [[v11, v12], [v12, v22]])
    }

    /// Updates S in gene order. Entries with a positive count stay observed;
    /// a zero entry is observed with probability
    /// logistic(ψ_i + R log(u₋ᵢ / (A_i + u₋ᵢ))).
    pub fn sample_s<R: Rng + ?Sized>(
        &mut self,
        counts: &[u64],
        depth: u64,
        profile_col: &[f64],
        rng: &mut R,
    ) {
        let depth = depth as f64;
        for i in 0..counts.len() {
            if counts[i] > 0 {
                continue;
            }
            let a = profile_col[i];
            let rest = self.mass - a * f64::from(self.observed[i]);
            let b = s_conditional(self.psi[i], depth, a, rest);
            let s = bernoulli_draw(rng, b);
            self.observed[i] = u8::from(s);
            self.mass = if s { rest + a } else { rest };
        }
    }
}

/// P(S = 1 | rest) for a zero entry, where `rest` = Σ_{n≠i} A_n S_n.
pub fn s_conditional(psi: f64, depth: f64, a: f64, rest: f64) -> f64 {
    debug_assert!(rest > 0.0, "all other genes dropped out");
    logistic(psi - depth * (a / rest).ln_1p())
}

/// Chain state of one bulk sample: W, log W and the collapsed allocations
/// Z̃ (gene-major, N×K).
#[derive(Clone, Debug, PartialEq)]
pub struct BulkChain {
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub alloc: Vec<u64>,
    type_totals: Vec<u64>,
    scratch: Vec<f64>,
}

impl BulkChain {
    /// W = α / Σα; Z̃ is drawn once from its conditional by the caller.
    pub fn init(alpha: &[f64], n_genes: usize) -> Self {
        let total: f64 = alpha.iter().sum();
        let weights: Vec<f64> = alpha.iter().map(|a| a / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let k = alpha.len();
        Self {
            weights,
            log_weights,
            alloc: vec![0; n_genes * k],
            type_totals: vec![0; k],
            scratch: vec![0.0; k],
        }
    }

    pub fn type_totals(&self) -> &[u64] {
        &self.type_totals
    }

    /// Z̃_i ~ Multinomial(X_i, A_i ⊙ W / Σ_k A_ik W_k) for every gene.
    pub fn sample_ztilde<R: Rng + ?Sized>(
        &mut self,
        counts: &[u64],
        profile: &ProfileMatrix,
        rng: &mut R,
    ) {
        let k = self.weights.len();
        self.type_totals.iter_mut().for_each(|t| *t = 0);
        let a = profile.as_array();
        for (i, &x) in counts.iter().enumerate() {
            let row = &mut self.alloc[i * k..(i + 1) * k];
            if x == 0 {
                row.iter_mut().for_each(|z| *z = 0);
                continue;
            }
            let mut total = 0.0;
            for (t, (s, &w)) in self.scratch.iter_mut().zip(&self.weights).enumerate() {
                *s = a[[i, t]] * w;
                total += *s;
            }
            assert!(total > 0.0, "zero mixing weight for gene {i}");
            multinomial_into(rng, x, &self.scratch, total, row);
            for (tt, &z) in self.type_totals.iter_mut().zip(row.iter()) {
                *tt += z;
            }
        }
    }

    /// W ~ Dirichlet(α + Σ_i Z̃_i).
    pub fn sample_w<R: Rng + ?Sized>(&mut self, alpha: &[f64], rng: &mut R) -> Result<()> {
        let post: Vec<f64> = alpha
            .iter()
            .zip(&self.type_totals)
            .map(|(a, &n)| a + n as f64)
            .collect();
        let (w, lw) = dirichlet_draw_with_log(rng, &post)?;
        self.weights = w;
        self.log_weights = lw;
        Ok(())
    }
}

/// Snapshot of every latent variable.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// K×M
    pub weights: Array2<f64>,
    /// N×M×K
    pub alloc: Array3<u64>,
    /// N×L
    pub observed: Array2<u8>,
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
    /// N×L
    pub omega: Array2<f64>,
}

/// Chain state for the whole data set.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub cells: Vec<CellChain>,
    pub bulk: Vec<BulkChain>,
}

impl ChainState {
    pub fn latent(&self) -> LatentState {
        let n = self.cells.first().map(|c| c.observed.len()).unwrap_or(0);
        let l = self.cells.len();
        let m = self.bulk.len();
        let k = self.bulk.first().map(|b| b.weights.len()).unwrap_or(0);
        let n_bulk_genes = self
            .bulk
            .first()
            .map(|b| b.alloc.len() / k.max(1))
            .unwrap_or(0);
        LatentState {
            weights: Array2::from_shape_fn((k, m), |(t, j)| self.bulk[j].weights[t]),
            alloc: Array3::from_shape_fn((n_bulk_genes, m, k), |(i, j, t)| {
                self.bulk[j].alloc[i * k + t]
            }),
            observed: Array2::from_shape_fn((n, l), |(i, c)| self.cells[c].observed[i]),
            kappa: self.cells.iter().map(|c| c.kappa).collect(),
            tau: self.cells.iter().map(|c| c.tau).collect(),
            omega: Array2::from_shape_fn((n, l), |(i, c)| self.cells[c].omega[i]),
        }
    }
}

/// Posterior expectations averaged over retained draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub n_draws: usize,
    /// E[Z̃], N×M×K.
    pub alloc: Array3<f64>,
    /// E[S], N×L.
    pub observed: Array2<f64>,
    /// E[log W], K×M.
    pub log_weights: Array2<f64>,
    /// E[Σ_i Z̃_ijk log W_kj], K×M.
    pub alloc_log_weights: Array2<f64>,
    /// E[W], K×M.
    pub weights: Array2<f64>,
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
    pub kappa_sq: Vec<f64>,
    pub tau_sq: Vec<f64>,
    /// E[ω τ²], N×L.
    pub omega_tau_sq: Array2<f64>,
    /// E[ω τ κ], N×L.
    pub omega_tau_kappa: Array2<f64>,
    /// E[(S − ½) τ], N×L.
    pub centered_s_tau: Array2<f64>,
    /// Σ_i E[(S_il − ½) κ_l] per cell.
    pub centered_s_kappa: Vec<f64>,
    /// Σ_i E[ω_il κ_l²] per cell.
    pub omega_kappa_sq: Vec<f64>,
}

impl SufficientStats {
    pub fn zeros(n_genes: usize, n_types: usize, n_cells: usize, n_bulk: usize) -> Self {
        Self {
            n_draws: 0,
            alloc: Array3::zeros((n_genes, n_bulk, n_types)),
            observed: Array2::zeros((n_genes, n_cells)),
            log_weights: Array2::zeros((n_types, n_bulk)),
            alloc_log_weights: Array2::zeros((n_types, n_bulk)),
            weights: Array2::zeros((n_types, n_bulk)),
            kappa: vec![0.0; n_cells],
            tau: vec![0.0; n_cells],
            kappa_sq: vec![0.0; n_cells],
            tau_sq: vec![0.0; n_cells],
            omega_tau_sq: Array2::zeros((n_genes, n_cells)),
            omega_tau_kappa: Array2::zeros((n_genes, n_cells)),
            centered_s_tau: Array2::zeros((n_genes, n_cells)),
            centered_s_kappa: vec![0.0; n_cells],
            omega_kappa_sq: vec![0.0; n_cells],
        }
    }

    pub fn set_bulk(&mut self, bulk: BulkStats) -> Result<()> {
        let (n, _, k) = bulk.alloc.dim();
        if n != self.observed.nrows() || k != self.weights.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "bulk stats cover {n} genes and {k} types, single-cell stats {} and {}",
                self.observed.nrows(),
                self.weights.nrows()
            )));
        }
        self.alloc = bulk.alloc;
        self.weights = bulk.weights;
        self.log_weights = bulk.log_weights;
        self.alloc_log_weights = bulk.alloc_log_weights;
        Ok(())
    }

    pub fn n_bulk(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.kappa.len()
    }
}

/// Per-cell running sums over retained draws.
struct CellAccumulator {
    observed: Vec<f64>,
    omega_tau_sq: Vec<f64>,
    omega_tau_kappa: Vec<f64>,
    centered_s_tau: Vec<f64>,
    kappa: f64,
    tau: f64,
    kappa_sq: f64,
    tau_sq: f64,
    centered_s_kappa: f64,
    omega_kappa_sq: f64,
}

impl CellAccumulator {
    fn new(n: usize) -> Self {
        Self {
            observed: vec![0.0; n],
            omega_tau_sq: vec![0.0; n],
            omega_tau_kappa: vec![0.0; n],
            centered_s_tau: vec![0.0; n],
            kappa: 0.0,
            tau: 0.0,
            kappa_sq: 0.0,
            tau_sq: 0.0,
            centered_s_kappa: 0.0,
            omega_kappa_sq: 0.0,
        }
    }

    fn add(&mut self, c: &CellChain) {
        let (k, t) = (c.kappa, c.tau);
        for i in 0..c.observed.len() {
            let s = f64::from(c.observed[i]);
            let w = c.omega[i];
            self.observed[i] += s;
            self.omega_tau_sq[i] += w * t * t;
            self.omega_tau_kappa[i] += w * t * k;
            self.centered_s_tau[i] += (s - 0.5) * t;
            self.centered_s_kappa += (s - 0.5) * k;
            self.omega_kappa_sq += w * k * k;
        }
        self.kappa += k;
        self.tau += t;
        self.kappa_sq += k * k;
        self.tau_sq += t * t;
    }
}

struct BulkAccumulator {
    alloc: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    alloc_log_weights: Vec<f64>,
}

/// Runs the full chain of one cell and returns its accumulated sums.
fn run_cell(
    cell: usize,
    counts: &[u64],
    depth: u64,
    profile_col: &[f64],
    params: &ModelParams,
    config: &EStepConfig,
    seed: u64,
) -> Result<CellAccumulator> {
    let mut chain = CellChain::init(profile_col, params.mu_kappa, params.mu_tau);
    let mut acc = CellAccumulator::new(counts.len());
    for sweep in 0..config.n_sweeps {
        let mut rng = RngStream::for_unit(seed, UnitKind::Cell, cell, sweep);
        chain.sample_omega(&mut rng);
        chain.sample_kappa_tau(profile_col, params, &mut rng)?;
        chain.sample_s(counts, depth, profile_col, &mut rng);
        debug_assert!((chain.mass - chain.recompute_mass(profile_col)).abs() < 1e-10);
        if config.is_retained(sweep) {
            acc.add(&chain);
        }
    }
    Ok(acc)
}

fn run_bulk(
    sample: usize,
    counts: &[u64],
    params: &ModelParams,
    config: &EStepConfig,
    seed: u64,
) -> Result<BulkAccumulator> {
    let k = params.alpha.len();
    let mut chain = BulkChain::init(&params.alpha, counts.len());
    let mut init_rng = RngStream::for_unit(seed, UnitKind::Initialization, sample, 0);
    chain.sample_ztilde(counts, &params.profile, &mut init_rng);
    let mut acc = BulkAccumulator {
        alloc: vec![0.0; counts.len() * k],
        weights: vec![0.0; k],
        log_weights: vec![0.0; k],
        alloc_log_weights: vec![0.0; k],
    };
    for sweep in 0..config.n_sweeps {
        let mut rng = RngStream::for_unit(seed, UnitKind::Bulk, sample, sweep);
        chain.sample_ztilde(counts, &params.profile, &mut rng);
        chain.sample_w(&params.alpha, &mut rng)?;
        if config.is_retained(sweep) {
            for (a, &z) in acc.alloc.iter_mut().zip(&chain.alloc) {
                *a += z as f64;
            }
            for t in 0..k {
                let lw = chain.log_weights[t].max(LOG_WEIGHT_FLOOR);
                acc.weights[t] += chain.weights[t];
                acc.log_weights[t] += lw;
                acc.alloc_log_weights[t] += chain.type_totals[t] as f64 * lw;
            }
        }
    }
    Ok(acc)
}

/// Runs the single-cell chains and (when `bulk` is given) the bulk chains,
/// and returns posterior expectations over retained sweeps.
pub fn run_estep(
    bulk: Option<&BulkCounts>,
    sc: &SingleCellCounts,
    params: &ModelParams,
    config: &EStepConfig,
    seed: u64,
) -> Result<SufficientStats> {
    config.validate()?;
    let n = sc.n_genes();
    let k = params.alpha.len();
    let l = sc.n_cells();
    let mut stats = SufficientStats::zeros(n, k, l, 0);
    let draws = config.n_retained();
    let scale = 1.0 / draws as f64;
    stats.n_draws = draws;

    let profile_cols: Vec<Vec<f64>> = (0..k).map(|t| params.profile.column(t)).collect();
    let cells: Vec<CellAccumulator> = (0..l)
        .into_par_iter()
        .map(|c| {
            let counts = sc.counts().column(c).to_vec();
            let g = sc.labels()[c];
            run_cell(
                c,
                &counts,
                sc.depths()[c],
                &profile_cols[g],
                params,
                config,
                seed,
            )
        })
        .collect::<Result<_>>()?;
    for (c, acc) in cells.into_iter().enumerate() {
        for i in 0..n {
            stats.observed[[i, c]] = acc.observed[i] * scale;
            stats.omega_tau_sq[[i, c]] = acc.omega_tau_sq[i] * scale;
            stats.omega_tau_kappa[[i, c]] = acc.omega_tau_kappa[i] * scale;
            stats.centered_s_tau[[i, c]] = acc.centered_s_tau[i] * scale;
        }
        stats.kappa[c] = acc.kappa * scale;
        stats.tau[c] = acc.tau * scale;
        stats.kappa_sq[c] = acc.kappa_sq * scale;
        stats.tau_sq[c] = acc.tau_sq * scale;
        stats.centered_s_kappa[c] = acc.centered_s_kappa * scale;
        stats.omega_kappa_sq[c] = acc.omega_kappa_sq * scale;
    }

    if let Some(x) = bulk {
        stats.set_bulk(run_bulk_estep(x, params, config, seed)?)?;
    }
    Ok(stats)
}

/// Bulk-side posterior expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct BulkStats {
    /// E[Z̃], N×M×K.
    pub alloc: Array3<f64>,
    /// K×M
    pub weights: Array2<f64>,
    /// K×M
    pub log_weights: Array2<f64>,
    /// K×M
    pub alloc_log_weights: Array2<f64>,
}

/// Runs only the bulk chains.
pub fn run_bulk_estep(
    bulk: &BulkCounts,
    params: &ModelParams,
    config: &EStepConfig,
    seed: u64,
) -> Result<BulkStats> {
    config.validate()?;
    let n = bulk.n_genes();
    let m = bulk.n_samples();
    let k = params.alpha.len();
    if params.profile.n_genes() != n || params.profile.n_types() != k {
        return Err(Error::DimensionMismatch(format!(
            "profile is {}×{}, bulk has {n} genes and alpha has {k} entries",
            params.profile.n_genes(),
            params.profile.n_types()
        )));
    }
    let scale = 1.0 / config.n_retained() as f64;
    let samples: Vec<BulkAccumulator> = (0..m)
        .into_par_iter()
        .map(|j| {
            let counts = bulk.counts().column(j).to_vec();
            run_bulk(j, &counts, params, config, seed)
        })
        .collect::<Result<_>>()?;
    let mut out = BulkStats {
        alloc: Array3::zeros((n, m, k)),
        weights: Array2::zeros((k, m)),
        log_weights: Array2::zeros((k, m)),
        alloc_log_weights: Array2::zeros((k, m)),
    };
    for (j, acc) in samples.into_iter().enumerate() {
        for i in 0..n {
            for t in 0..k {
                out.alloc[[i, j, t]] = acc.alloc[i * k + t] * scale;
            }
        }
        for t in 0..k {
            out.weights[[t, j]] = acc.weights[t] * scale;
            out.log_weights[[t, j]] = acc.log_weights[t] * scale;
            out.alloc_log_weights[[t, j]] = acc.alloc_log_weights[t] * scale;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params_for(profile: Array2<f64>, alpha: Vec<f64>) -> ModelParams {
        ModelParams {
            profile: ProfileMatrix::from_unchecked(profile),
            alpha,
            mu_kappa: 0.0,
            var_kappa: 1.0,
            mu_tau: 0.0,
            var_tau: 1.0,
        }
    }

    fn rng(i: usize) -> RngStream {
        RngStream::for_unit(77, UnitKind::Test, i, 0)
    }

    #[test]
    fn retained_draw_count() {
        let c = EStepConfig {
            n_sweeps: 10,
            burn_in_fraction: 0.2,
            thinning: 1,
        };
        assert_eq!(c.burn_in(), 2);
        assert_eq!(c.n_retained(), 8);
        let c = EStepConfig {
            n_sweeps: 10,
            burn_in_fraction: 0.2,
            thinning: 3,
        };
        assert_eq!(c.n_retained(), 3);
        assert!(EStepConfig {
            n_sweeps: 10,
            burn_in_fraction: 1.0,
            thinning: 1
        }
        .validate()
        .is_err());
        assert!(EStepConfig {
            n_sweeps: 10,
            burn_in_fraction: 0.2,
            thinning: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn kappa_tau_conditional_two_by_two() {
        let params = params_for(array![[1.0]], vec![1.0]);
        let mut cell = CellChain::init(&[1.0], 0.0, 0.0);
        cell.omega = vec![1.0];
        let (m, v) = cell.kappa_tau_conditional(&[1.0], &params);
        assert_eq!(v, [[2.0, 1.0], [1.0, 2.0]]);
        assert!((m[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((m[1] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_prior_pins_kappa_tau() {
        let mut params = params_for(array![[0.3], [0.7]], vec![1.0]);
        params.mu_kappa = -1.0;
        params.mu_tau = 300.0;
        params.var_kappa = 1e-12;
        params.var_tau = 1e-12;
        let col = [0.3, 0.7];
        let mut cell = CellChain::init(&col, -1.0, 300.0);
        let mut r = rng(1);
        for _ in 0..20 {
            cell.sample_omega(&mut r);
            cell.sample_kappa_tau(&col, &params, &mut r).unwrap();
            assert!((cell.kappa + 1.0).abs() < 1e-4);
            assert!((cell.tau - 300.0).abs() < 1e-4);
        }
    }

    #[test]
    fn s_conditional_values() {
        // Y = (3, 0), A = (0.8, 0.2), S₁ = 1, ψ₂ = 0.
        let b = s_conditional(0.0, 3.0, 0.2, 0.8);
        assert!((b - 0.512 / 1.512).abs() < 1e-12);
        // Vanishing profile entry: no likelihood penalty.
        assert!((s_conditional(0.7, 50.0, 1e-300, 0.5) - logistic(0.7)).abs() < 1e-12);
    }

    #[test]
    fn s_conditional_matches_enumeration() {
        // P(S₂ = 1) ∝ π · (A₁/(A₁+A₂))^Y₁ ; P(S₂ = 0) ∝ (1 − π) · 1.
        let (a1, a2, y1, psi) = (0.8f64, 0.2f64, 3i32, 0.4f64);
        let pi = logistic(psi);
        let on = pi * (a1 / (a1 + a2)).powi(y1);
        let off = 1.0 - pi;
        let exact = on / (on + off);
        assert!((s_conditional(psi, 3.0, a2, a1) - exact).abs() < 1e-12);
    }

    #[test]
    fn positive_counts_force_observation() {
        let col = [0.25, 0.25, 0.25, 0.25];
        let mut cell = CellChain::init(&col, -5.0, 0.0);
        let mut r = rng(2);
        for _ in 0..50 {
            cell.sample_s(&[3, 0, 1, 0], 4, &col, &mut r);
            assert_eq!(cell.observed[0], 1);
            assert_eq!(cell.observed[2], 1);
            assert!((cell.mass() - cell.recompute_mass(&col)).abs() < 1e-12);
        }
    }

    #[test]
    fn ztilde_examples() {
        let profile = ProfileMatrix::from_unchecked(array![[0.2, 0.8], [0.8, 0.2]]);
        let mut b = BulkChain::init(&[1.0, 1.0], 2);
        let mut r = rng(3);
        b.sample_ztilde(&[100_000, 0], &profile, &mut r);
        assert_eq!(&b.alloc[2..4], &[0, 0]);
        assert_eq!(b.alloc[0] + b.alloc[1], 100_000);
        let se = (100_000.0f64 * 0.2 * 0.8).sqrt();
        assert!((b.alloc[0] as f64 - 20_000.0).abs() < 3.0 * se);

        let single = ProfileMatrix::from_unchecked(array![[0.4], [0.6]]);
        let mut b = BulkChain::init(&[2.0], 2);
        b.sample_ztilde(&[7, 5], &single, &mut r);
        assert_eq!(b.alloc, vec![7, 5]);
        assert_eq!(b.type_totals(), &[12]);
    }

    #[test]
    fn w_posterior_parameters() {
        // α = (1, 2) with totals (3, 0) gives Dirichlet(4, 2), mean (2/3, 1/3).
        let mut b = BulkChain::init(&[1.0, 2.0], 1);
        b.type_totals = vec![3, 0];
        let mut r = rng(4);
        let n = 50_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            b.sample_w(&[1.0, 2.0], &mut r).unwrap();
            sum += b.weights[0];
            sq += b.weights[0] * b.weights[0];
        }
        let m = sum / n as f64;
        let se = ((sq / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - 2.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn empty_bulk_keeps_prior() {
        let mut b = BulkChain::init(&[1.0, 1.0, 1.0], 2);
        let profile = ProfileMatrix::from_unchecked(array![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]);
        let mut r = rng(5);
        b.sample_ztilde(&[0, 0], &profile, &mut r);
        assert_eq!(b.type_totals(), &[0, 0, 0]);
    }

    #[test]
    fn omega_draws_positive_and_reproducible() {
        let col = [0.5, 0.5];
        let mut a = CellChain::init(&col, 0.0, 0.0);
        let mut b = a.clone();
        a.sample_omega(&mut rng(6));
        b.sample_omega(&mut rng(6));
        assert_eq!(a.omega, b.omega);
        assert!(a.omega.iter().all(|&w| w > 0.0));
    }

    fn small_data() -> (BulkCounts, SingleCellCounts, ModelParams) {
        let x = array![[30u64, 5], [10, 40], [20, 15]];
        let y = array![[3u64, 0, 1], [0, 2, 0], [1, 0, 4]];
        let bulk = BulkCounts::new(x).unwrap();
        let sc = SingleCellCounts::new(y, vec![0, 1, 1], 2).unwrap();
        let mut p = params_for(array![[0.5, 0.2], [0.2, 0.5], [0.3, 0.3]], vec![1.0, 1.0]);
        p.mu_kappa = -0.5;
        p.mu_tau = 10.0;
        p.var_tau = 4.0;
        (bulk, sc, p)
    }

    #[test]
    fn estep_invariants() {
        let (bulk, sc, p) = small_data();
        let cfg = EStepConfig {
            n_sweeps: 50,
            burn_in_fraction: 0.2,
            thinning: 1,
        };
        let s = run_estep(Some(&bulk), &sc, &p, &cfg, 11).unwrap();
        assert_eq!(s.n_draws, 40);
        for ((i, l), &e) in s.observed.indexed_iter() {
            assert!((0.0..=1.0).contains(&e));
            if sc.counts()[[i, l]] > 0 {
                assert_eq!(e, 1.0);
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let total: f64 = (0..2).map(|t| s.alloc[[i, j, t]]).sum();
                assert!((total - bulk.counts()[[i, j]] as f64).abs() < 1e-9);
            }
        }
        for (lw, w) in s.log_weights.iter().zip(s.weights.iter()) {
            assert!(lw.is_finite());
            assert!(*lw <= w.ln() + 1e-12);
        }
    }

    #[test]
    fn estep_is_deterministic() {
        let (bulk, sc, p) = small_data();
        let cfg = EStepConfig {
            n_sweeps: 20,
            burn_in_fraction: 0.2,
            thinning: 1,
        };
        let a = run_estep(Some(&bulk), &sc, &p, &cfg, 3).unwrap();
        let b = run_estep(Some(&bulk), &sc, &p, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = run_estep(Some(&bulk), &sc, &p, &cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chain_sums_hold_after_every_sweep() {
        let (bulk, _, p) = small_data();
        let mut chain = BulkChain::init(&p.alpha, 3);
        for sweep in 0..30 {
            let mut r = RngStream::for_unit(1, UnitKind::Bulk, 0, sweep);
            let counts = bulk.counts().column(1).to_vec();
            chain.sample_ztilde(&counts, &p.profile, &mut r);
            chain.sample_w(&p.alpha, &mut r).unwrap();
            for i in 0..3 {
                assert_eq!(chain.alloc[2 * i] + chain.alloc[2 * i + 1], counts[i]);
            }
            assert!((chain.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let state = ChainState {
            cells: vec![],
            bulk: vec![chain],
        };
        let latent = state.latent();
        assert_eq!(latent.alloc.dim(), (3, 1, 2));
    }
}
