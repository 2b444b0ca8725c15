//! M-step: closed-form dropout-parameter updates, the evidence lower bound,
//! its gradients, and projected gradient ascent for the profile matrix and
//! the Dirichlet parameters.
//!
//! The bound separates into one term per column of A, one term for α and one
//! for the dropout parameters, so each block gets its own backtracking search.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::SufficientStats;
use crate::model::{
    default_profile_floor, ModelParams, ProfileMatrix, SingleCellCounts, DEFAULT_ALPHA_FLOOR,
};
use crate::special::{digamma, ln_gamma};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MStepConfig {
    pub max_iterations: usize,
    pub initial_step: f64,
    pub backtrack: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    /// Lower bound on profile entries; `None` means 1/(100 N).
    pub profile_floor: Option<f64>,
    pub alpha_floor: f64,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_step: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            max_halvings: 60,
            profile_floor: None,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        }
    }
}

impl MStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config(format!(
                "backtrack factor {} must lie in (0, 1)",
                self.backtrack
            )));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Config("initial step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.armijo) {
            return Err(Error::Config("Armijo constant must lie in [0, 1)".into()));
        }
        if !(self.alpha_floor > 0.0) {
            return Err(Error::Config("alpha floor must be positive".into()));
        }
        if let Some(f) = self.profile_floor {
            if !(f > 0.0) {
                return Err(Error::Config("profile floor must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn profile_floor_for(&self, n_genes: usize) -> f64 {
        self.profile_floor
            .unwrap_or_else(|| default_profile_floor(n_genes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutParams {
    pub mu_kappa: f64,
    pub var_kappa: f64,
    pub mu_tau: f64,
    pub var_tau: f64,
}

fn mean_and_variance(first: &[f64], second: &[f64]) -> (f64, f64) {
    let n = first.len() as f64;
    let mu = first.iter().sum::<f64>() / n;
    let var = first
        .iter()
        .zip(second)
        .map(|(&m1, &m2)| m2 - 2.0 * mu * m1 + mu * mu)
        .sum::<f64>()
        / n;
    (mu, var.max(VARIANCE_FLOOR))
}

/// Closed-form maximizers of the bound in (μκ, σκ², μτ, στ²).
pub fn update_dropout_params(stats: &SufficientStats) -> DropoutParams {
    let (mu_kappa, var_kappa) = mean_and_variance(&stats.kappa, &stats.kappa_sq);
    let (mu_tau, var_tau) = mean_and_variance(&stats.tau, &stats.tau_sq);
    DropoutParams {
        mu_kappa,
        var_kappa,
        mu_tau,
        var_tau,
    }
}

fn check_shapes(
    params: &ModelParams,
    stats: &SufficientStats,
    sc: &SingleCellCounts,
) -> Result<()> {
    let (n, k) = params.profile.as_array().dim();
    if stats.observed.dim() != (n, sc.n_cells()) || sc.n_genes() != n {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {:?} gene-cell entries, data has {}×{}",
            stats.observed.dim(),
            sc.n_genes(),
            sc.n_cells()
        )));
    }
    if params.alpha.len() != k || stats.weights.nrows() != k || sc.n_types() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} cell types in the profile, {} in alpha, {} in the stats",
            params.alpha.len(),
            stats.weights.nrows()
        )));
    }
    Ok(())
}

/// Evidence lower bound with data-only constants dropped. Bulk terms are
/// included when the stats carry bulk samples.
pub fn elbo(params: &ModelParams, stats: &SufficientStats, sc: &SingleCellCounts) -> Result<f64> {
    check_shapes(params, stats, sc)?;
    let a = params.profile.as_array();
    let (n, k) = a.dim();
    let mut total = 0.0;

    let m = stats.n_bulk();
    if m > 0 {
        let alpha_sum: f64 = params.alpha.iter().sum();
        let lg_sum = ln_gamma(alpha_sum);
        for j in 0..m {
            total += lg_sum;
            for t in 0..k {
                total +=
                    (params.alpha[t] - 1.0) * stats.log_weights[[t, j]] - ln_gamma(params.alpha[t]);
                total += stats.alloc_log_weights[[t, j]];
                for i in 0..n {
                    let z = stats.alloc[[i, j, t]];
                    if z != 0.0 {
                        total += z * a[[i, t]].ln();
                    }
                }
            }
        }
    }

    let y = sc.counts();
    for (l, &g) in sc.labels().iter().enumerate() {
        let depth = sc.depths()[l] as f64;
        let u: f64 = (0..n).map(|i| a[[i, g]] * stats.observed[[i, l]]).sum();
        let mut cell = 0.0;
        let mut ratio = 0.0;
        for i in 0..n {
            let ai = a[[i, g]];
            let es = stats.observed[[i, l]];
            if y[[i, l]] > 0 {
                cell += es * y[[i, l]] as f64 * ai.ln();
            }
            ratio += es * ai;
            cell += ai * stats.centered_s_tau[[i, l]]
                - ai * stats.omega_tau_kappa[[i, l]]
                - 0.5 * ai * ai * stats.omega_tau_sq[[i, l]];
        }
        cell -= depth * (ratio / u + u.ln());
        cell += stats.centered_s_kappa[l] - 0.5 * stats.omega_kappa_sq[l];
        cell -= 0.5 * (params.var_kappa.ln() + params.var_tau.ln());
        cell -= (stats.kappa_sq[l] - 2.0 * params.mu_kappa * stats.kappa[l]
            + params.mu_kappa * params.mu_kappa)
            / (2.0 * params.var_kappa);
        cell -= (stats.tau_sq[l] - 2.0 * params.mu_tau * stats.tau[l]
            + params.mu_tau * params.mu_tau)
            / (2.0 * params.var_tau);
        total += cell;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "lower bound evaluated to {total}"
        )));
    }
    Ok(total)
}

/// The part of the bound that depends on one column of A:
/// Σ_i c_i log a_i + Σ_i b_i a_i − ½ Σ_i q_i a_i² − Σ_l R_l (1 + log u_l(a)).
struct ColumnObjective<'a> {
    log_coef: Vec<f64>,
    lin: Vec<f64>,
    quad: Vec<f64>,
    cells: Vec<(usize, f64)>,
    observed: &'a Array2<f64>,
}

impl<'a> ColumnObjective<'a> {
    fn build(stats: &'a SufficientStats, sc: &SingleCellCounts, t: usize) -> Self {
        let n = sc.n_genes();
        let mut obj = Self {
            log_coef: vec![0.0; n],
            lin: vec![0.0; n],
            quad: vec![0.0; n],
            cells: Vec::new(),
            observed: &stats.observed,
        };
        for j in 0..stats.n_bulk() {
            for i in 0..n {
                obj.log_coef[i] += stats.alloc[[i, j, t]];
            }
        }
        let y = sc.counts();
        for (l, &g) in sc.labels().iter().enumerate() {
            if g != t {
                continue;
            }
            obj.cells.push((l, sc.depths()[l] as f64));
            for i in 0..n {
                obj.log_coef[i] += stats.observed[[i, l]] * y[[i, l]] as f64;
                obj.lin[i] += stats.centered_s_tau[[i, l]] - stats.omega_tau_kappa[[i, l]];
                obj.quad[i] += stats.omega_tau_sq[[i, l]];
            }
        }
        obj
    }

    fn mass(&self, l: usize, col: &[f64]) -> f64 {
        col.iter()
            .enumerate()
            .map(|(i, &a)| a * self.observed[[i, l]])
            .sum()
    }

    fn value(&self, col: &[f64]) -> f64 {
        let mut v = 0.0;
        for (i, &a) in col.iter().enumerate() {
            if self.log_coef[i] != 0.0 {
                v += self.log_coef[i] * a.ln();
            }
            v += self.lin[i] * a - 0.5 * self.quad[i] * a * a;
        }
        for &(l, depth) in &self.cells {
            v -= depth * (1.0 + self.mass(l, col).ln());
        }
        v
    }

    fn gradient(&self, col: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = col
            .iter()
            .enumerate()
            .map(|(i, &a)| self.log_coef[i] / a + self.lin[i] - self.quad[i] * a)
            .collect();
        for &(l, depth) in &self.cells {
            let scale = depth / self.mass(l, col);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi -= scale * self.observed[[i, l]];
            }
        }
        g
    }
}

/// The part of the bound that depends on α.
struct AlphaObjective {
    n_bulk: f64,
    log_weight_sums: Vec<f64>,
}

impl AlphaObjective {
    fn build(stats: &SufficientStats) -> Self {
        let log_weight_sums = stats
            .log_weights
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .collect();
        Self {
            n_bulk: stats.n_bulk() as f64,
            log_weight_sums,
        }
    }

    fn value(&self, alpha: &[f64]) -> f64 {
        let sum: f64 = alpha.iter().sum();
        let mut v = self.n_bulk * ln_gamma(sum);
        for (&a, &s) in alpha.iter().zip(&self.log_weight_sums) {
            v += (a - 1.0) * s - self.n_bulk * ln_gamma(a);
        }
        v
    }

    fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let psi_sum = digamma(alpha.iter().sum());
        alpha
            .iter()
            .zip(&self.log_weight_sums)
            .map(|(&a, &s)| s + self.n_bulk * (psi_sum - digamma(a)))
            .collect()
    }
}

/// ∂ELBO/∂A. The Jensen anchor u_l is evaluated at the current A.
pub fn grad_a(
    params: &ModelParams,
    stats: &SufficientStats,
    sc: &SingleCellCounts,
) -> Result<Array2<f64>> {
    check_shapes(params, stats, sc)?;
    let (n, k) = params.profile.as_array().dim();
    let mut out = Array2::zeros((n, k));
    for t in 0..k {
        let obj = ColumnObjective::build(stats, sc, t);
        let g = obj.gradient(&params.profile.column(t));
        for (i, v) in g.into_iter().enumerate() {
            out[[i, t]] = v;
        }
    }
    if out.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite("profile gradient".into()));
    }
    Ok(out)
}

/// ∂ELBO/∂α; zero when there are no bulk samples.
pub fn grad_alpha(params: &ModelParams, stats: &SufficientStats) -> Vec<f64> {
    AlphaObjective::build(stats).gradient(&params.alpha)
}

/// Euclidean projection of `v` onto {u : Σu = 1, u ≥ ε}.
pub fn project_capped_simplex(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = v.len();
    if n == 0 || eps < 0.0 || eps * n as f64 > 1.0 + 1e-12 {
        return Err(Error::InfeasibleProjection { floor: eps, len: n });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut rho = 1;
    let mut rho_prefix = sorted[0];
    for (j0, &x) in sorted.iter().enumerate() {
        let j = j0 + 1;
        prefix += x;
        let shift = (1.0 - prefix - (n - j) as f64 * eps) / j as f64;
        if x + shift > eps {
            rho = j;
            rho_prefix = prefix;
        }
    }
    let lambda = (1.0 - rho_prefix - (n - rho) as f64 * eps) / rho as f64;
    Ok(v.iter().map(|&x| (x + lambda).max(eps)).collect())
}

/// Componentwise max with the α floor.
pub fn project_alpha(alpha: &[f64], floor: f64) -> Vec<f64> {
    alpha.iter().map(|&x| x.max(floor)).collect()
}

/// Projected gradient ascent with Armijo backtracking on one block.
/// Returns the final point and the number of accepted steps.
fn ascend<V, G, P>(
    x0: Vec<f64>,
    value: V,
    gradient: G,
    project: P,
    config: &MStepConfig,
) -> Result<(Vec<f64>, usize)>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0;
    let mut fx = value(&x);
    let mut accepted = 0;
    for _ in 0..config.max_iterations {
        let g = gradient(&x);
        if g.iter().all(|&v| v == 0.0) {
            break;
        }
        let mut step = config.initial_step;
        let mut next = None;
        for _ in 0..=config.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let cand = project(&trial)?;
            let fc = value(&cand);
            let dir: f64 = cand
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((c, a), gi)| gi * (c - a))
                .sum();
            if fc.is_finite() && fc >= fx && fc >= fx + config.armijo * dir {
                next = Some((cand, fc));
                break;
            }
            step *= config.backtrack;
        }
        let Some((cand, fc)) = next else {
            log::debug!(
                "line search exhausted {} halvings; keeping iterate",
                config.max_halvings
            );
            break;
        };
        let moved = cand.iter().zip(&x).any(|(c, a)| c != a);
        x = cand;
        let gain = fc - fx;
        fx = fc;
        accepted += 1;
        if !moved || gain <= 1e-14 * fx.abs() {
            break;
        }
    }
    Ok((x, accepted))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentOutcome {
    pub profile: ProfileMatrix,
    pub alpha: Vec<f64>,
    /// Accepted steps per column of A, then for α.
    pub accepted_steps: Vec<usize>,
}

/// Updates A (always) and α (when the stats carry bulk samples) by
/// projected gradient ascent on the bound with the stats held fixed.
pub fn backtracking_ascent(
    params: &ModelParams,
    stats: &SufficientStats,
    sc: &SingleCellCounts,
    config: &MStepConfig,
) -> Result<AscentOutcome> {
    config.validate()?;
    check_shapes(params, stats, sc)?;
    let (n, k) = params.profile.as_array().dim();
    let floor = config.profile_floor_for(n);
    let mut profile = params.profile.as_array().clone();
    let mut accepted_steps = Vec::with_capacity(k + 1);
    for t in 0..k {
        let obj = ColumnObjective::build(stats, sc, t);
        let (col, steps) = ascend(
            params.profile.column(t),
            |c| obj.value(c),
            |c| obj.gradient(c),
            |c| project_capped_simplex(c, floor),
            config,
        )?;
        for (i, v) in col.into_iter().enumerate() {
            profile[[i, t]] = v;
        }
        accepted_steps.push(steps);
    }
    let alpha = if stats.n_bulk() > 0 {
        let obj = AlphaObjective::build(stats);
        let floor = config.alpha_floor;
        let (alpha, steps) = ascend(
            params.alpha.clone(),
            |a| obj.value(a),
            |a| obj.gradient(a),
            |a| Ok(project_alpha(a, floor)),
            config,
        )?;
        accepted_steps.push(steps);
        alpha
    } else {
        accepted_steps.push(0);
        params.alpha.clone()
    };
    Ok(AscentOutcome {
        profile: ProfileMatrix::from_unchecked(profile),
        alpha,
        accepted_steps,
    })
}

/// One full M-step on fixed stats.
pub fn m_step(
    params: &ModelParams,
    stats: &SufficientStats,
    sc: &SingleCellCounts,
    config: &MStepConfig,
) -> Result<ModelParams> {
    let d = update_dropout_params(stats);
    let ascent = backtracking_ascent(params, stats, sc, config)?;
    Ok(ModelParams {
        profile: ascent.profile,
        alpha: ascent.alpha,
        mu_kappa: d.mu_kappa,
        var_kappa: d.var_kappa,
        mu_tau: d.mu_tau,
        var_tau: d.var_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, UnitKind};
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute-force projection: for every nonempty free set F, clamp the rest
    /// at ε, spread the remaining mass uniformly shifted on F, and keep the
    /// feasible candidate nearest to v.
    fn brute_force_projection(v: &[f64], eps: f64) -> Vec<f64> {
        let n = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let clamped = n - free.len();
            let shift = (1.0 - clamped as f64 * eps - free.iter().map(|&i| v[i]).sum::<f64>())
                / free.len() as f64;
            let u: Vec<f64> = (0..n)
                .map(|i| {
                    if mask & (1 << i) != 0 {
                        v[i] + shift
                    } else {
                        eps
                    }
                })
                .collect();
            if u.iter().any(|&x| x < eps - 1e-12) {
                continue;
            }
            let d: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, u));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_examples() {
        let p = project_capped_simplex(&[2.0, 0.0], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15);
        assert_eq!(
            project_capped_simplex(&[0.5, 0.5], 0.0).unwrap(),
            vec![0.5, 0.5]
        );
        let inside = [0.2, 0.3, 0.5];
        let p = project_capped_simplex(&inside, 0.1).unwrap();
        for (a, b) in p.iter().zip(&inside) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            project_capped_simplex(&[1.0, 1.0, 1.0], 0.5),
            Err(Error::InfeasibleProjection { .. })
        ));
        // ε N = 1 leaves a single point.
        assert_eq!(
            project_capped_simplex(&[3.0, -1.0], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn projection_matches_brute_force() {
        let mut r = RngStream::for_unit(3, UnitKind::Test, 0, 0);
        for _ in 0..500 {
            let n = r.random_range(1..=6);
            let eps = r.random::<f64>() / n as f64;
            let v: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            let p = project_capped_simplex(&v, eps).unwrap();
            let b = brute_force_projection(&v, eps);
            for (x, y) in p.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{v:?} eps {eps}: {p:?} vs {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_feasible(v in prop::collection::vec(-5.0f64..5.0, 1..40), frac in 0.0f64..1.0) {
            let eps = frac / v.len() as f64;
            let p = project_capped_simplex(&v, eps).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= eps - 1e-15));
        }

        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let eps = 0.2 / v.len() as f64;
            let p = project_capped_simplex(&v, eps).unwrap();
            let q = project_capped_simplex(&p, eps).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_update_examples() {
        let mut s = SufficientStats::zeros(1, 1, 3, 0);
        s.kappa = vec![-1.0; 3];
        s.kappa_sq = vec![1.25; 3];
        s.tau = vec![2.0, 4.0, 6.0];
        s.tau_sq = vec![4.0, 16.0, 36.0];
        let d = update_dropout_params(&s);
        assert!((d.mu_kappa + 1.0).abs() < 1e-15);
        assert!((d.var_kappa - 0.25).abs() < 1e-15);
        assert!((d.mu_tau - 4.0).abs() < 1e-15);
        assert!((d.var_tau - 8.0 / 3.0).abs() < 1e-12);

        let mut one = SufficientStats::zeros(1, 1, 1, 0);
        one.kappa = vec![0.3];
        one.kappa_sq = vec![0.3 * 0.3 + 0.7];
        one.tau = vec![1.0];
        one.tau_sq = vec![1.0];
        let d = update_dropout_params(&one);
        assert!((d.var_kappa - 0.7).abs() < 1e-12);
        assert_eq!(d.var_tau, VARIANCE_FLOOR);
    }

    /// Random but internally consistent stats for a small problem.
    fn random_problem(
        seed: usize,
        n: usize,
        k: usize,
        l: usize,
        m: usize,
    ) -> (ModelParams, SufficientStats, SingleCellCounts) {
        let mut r = RngStream::for_unit(99, UnitKind::Test, seed, 0);
        let mut a = Array2::from_shape_fn((n, k), |_| r.random_range(0.2..1.0));
        for mut c in a.columns_mut() {
            let s = c.sum();
            c.mapv_inplace(|x| x / s);
        }
        let labels: Vec<usize> = (0..l).map(|c| c % k).collect();
        let y = Array2::from_shape_fn((n, l), |(i, c)| {
            if (i + c) % 3 == 0 {
                0
            } else {
                r.random_range(1..20u64)
            }
        });
        let sc = SingleCellCounts::new(y.clone(), labels, k).unwrap();
        let mut s = SufficientStats::zeros(n, k, l, m);
        s.n_draws = 1;
        for ((i, c), v) in s.observed.indexed_iter_mut() {
            *v = if y[[i, c]] > 0 {
                1.0
            } else {
                r.random_range(0.05..0.95)
            };
        }
        for c in 0..l {
            s.kappa[c] = r.random_range(-2.0..0.0);
            s.kappa_sq[c] = s.kappa[c].powi(2) + r.random_range(0.01..0.5);
            s.tau[c] = r.random_range(1.0..20.0);
            s.tau_sq[c] = s.tau[c].powi(2) + r.random_range(0.1..4.0);
            s.centered_s_kappa[c] = r.random_range(-3.0..3.0);
            s.omega_kappa_sq[c] = r.random_range(0.0..5.0);
        }
        s.omega_tau_sq.mapv_inplace(|_| r.random_range(0.0..50.0));
        s.omega_tau_kappa
            .mapv_inplace(|_| r.random_range(-10.0..10.0));
        s.centered_s_tau
            .mapv_inplace(|_| r.random_range(-10.0..10.0));
        s.alloc = Array3::from_shape_fn((n, m, k), |_| r.random_range(0.0..30.0));
        s.weights = Array2::from_shape_fn((k, m), |_| r.random_range(0.1..0.9));
        s.log_weights = s.weights.mapv(|w| w.ln() - r.random_range(0.0..0.1));
        s.alloc_log_weights = Array2::from_shape_fn((k, m), |_| r.random_range(-20.0..0.0));
        let params = ModelParams {
            profile: ProfileMatrix::from_unchecked(a),
            alpha: (0..k).map(|_| r.random_range(0.5..4.0)).collect(),
            mu_kappa: r.random_range(-1.0..0.0),
            var_kappa: r.random_range(0.2..1.0),
            mu_tau: r.random_range(5.0..15.0),
            var_tau: r.random_range(1.0..5.0),
        };
        (params, s, sc)
    }

    #[test]
    fn elbo_matches_hand_transcription() {
        // K = 1, M = 1, N = 2, one cell.
        let y = array![[3u64], [0]];
        let sc = SingleCellCounts::new(y, vec![0], 1).unwrap();
        let mut s = SufficientStats::zeros(2, 1, 1, 1);
        s.n_draws = 1;
        s.alloc[[0, 0, 0]] = 7.0;
        s.alloc[[1, 0, 0]] = 2.0;
        s.log_weights[[0, 0]] = -0.1;
        s.alloc_log_weights[[0, 0]] = -0.4;
        s.observed = array![[1.0], [0.4]];
        s.kappa = vec![-0.5];
        s.kappa_sq = vec![0.5];
        s.tau = vec![3.0];
        s.tau_sq = vec![10.0];
        s.centered_s_tau = array![[1.5], [-0.3]];
        s.omega_tau_kappa = array![[-0.2], [-0.1]];
        s.omega_tau_sq = array![[2.0], [2.5]];
        s.centered_s_kappa = vec![-0.05];
        s.omega_kappa_sq = vec![0.3];
        let p = ModelParams {
            profile: ProfileMatrix::from_unchecked(array![[0.6], [0.4]]),
            alpha: vec![2.0],
            mu_kappa: -1.0,
            var_kappa: 0.5,
            mu_tau: 2.0,
            var_tau: 4.0,
        };
        let (a1, a2): (f64, f64) = (0.6, 0.4);
        let bulk = ln_gamma(2.0) + (2.0 - 1.0) * -0.1 - ln_gamma(2.0) - 0.4
            + 7.0 * a1.ln()
            + 2.0 * a2.ln();
        let u = a1 * 1.0 + a2 * 0.4;
        let cell = 1.0 * 3.0 * a1.ln() - 3.0 * ((a1 + 0.4 * a2) / u + u.ln())
            + (-0.05 + a1 * 1.5 + a2 * -0.3)
            - 0.5 * (0.3 + 2.0 * a1 * -0.2 + 2.0 * a2 * -0.1 + a1 * a1 * 2.0 + a2 * a2 * 2.5)
            - 0.5 * (0.5f64.ln() + 4.0f64.ln())
            - (0.5 - 2.0 * -1.0 * -0.5 + 1.0) / (2.0 * 0.5)
            - (10.0 - 2.0 * 2.0 * 3.0 + 4.0) / (2.0 * 4.0);
        let got = elbo(&p, &s, &sc).unwrap();
        assert!(
            (got - (bulk + cell)).abs() < 1e-10,
            "{got} vs {}",
            bulk + cell
        );
    }

    #[test]
    fn zero_allocations_remove_bulk_profile_term() {
        let (p, mut s, sc) = random_problem(1, 5, 2, 4, 3);
        let with = elbo(&p, &s, &sc).unwrap();
        let alloc_term: f64 = s
            .alloc
            .indexed_iter()
            .map(|((i, _, t), &z)| z * p.profile.get(i, t).ln())
            .sum();
        s.alloc.fill(0.0);
        let without = elbo(&p, &s, &sc).unwrap();
        assert!((with - without - alloc_term).abs() < 1e-9 * with.abs().max(1.0));
    }

    fn max_rel_err(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..10 {
            let (p, s, sc) = random_problem(trial, 6, 3, 6, 4);
            let g = grad_a(&p, &s, &sc).unwrap();
            let h = 1e-6;
            for ((i, t), &gi) in g.indexed_iter() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let mut ap = plus.profile.as_array().clone();
                ap[[i, t]] += h;
                plus.profile = ProfileMatrix::from_unchecked(ap);
                let mut am = minus.profile.as_array().clone();
                am[[i, t]] -= h;
                minus.profile = ProfileMatrix::from_unchecked(am);
                let fd =
                    (elbo(&plus, &s, &sc).unwrap() - elbo(&minus, &s, &sc).unwrap()) / (2.0 * h);
                assert!(max_rel_err(gi, fd) < 1e-5, "A[{i}][{t}]: {gi} vs {fd}");
            }
            let ga = grad_alpha(&p, &s);
            for t in 0..3 {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.alpha[t] += h;
                minus.alpha[t] -= h;
                let fd =
                    (elbo(&plus, &s, &sc).unwrap() - elbo(&minus, &s, &sc).unwrap()) / (2.0 * h);
                assert!(
                    max_rel_err(ga[t], fd) < 1e-6,
                    "alpha[{t}]: {} vs {fd}",
                    ga[t]
                );
            }
        }
    }

    #[test]
    fn gradient_edge_cases() {
        // No cells of type 1 and no bulk: its gradient column vanishes.
        let (mut p, mut s, _) = random_problem(2, 4, 2, 2, 0);
        let sc = SingleCellCounts::new(array![[1u64, 2], [3, 1], [0, 1], [2, 2]], vec![0, 0], 2)
            .unwrap();
        s.observed[[2, 0]] = 0.5;
        p.profile = ProfileMatrix::from_unchecked(array![
            [0.25, 0.25],
            [0.25, 0.25],
            [0.25, 0.25],
            [0.25, 0.25]
        ]);
        let g = grad_a(&p, &s, &sc).unwrap();
        assert!(g.column(1).iter().all(|&v| v == 0.0));
        assert!(grad_alpha(&p, &s).iter().all(|&v| v == 0.0));

        // Larger allocation → larger gradient entry.
        let (p, mut s, sc) = random_problem(3, 4, 2, 2, 2);
        let before = grad_a(&p, &s, &sc).unwrap()[[1, 0]];
        s.alloc[[1, 0, 0]] += 5.0;
        let after = grad_a(&p, &s, &sc).unwrap()[[1, 0]];
        assert!(after > before);

        // Symmetric stats and α give identical α-gradient components.
        let (mut p, mut s, _) = random_problem(4, 4, 3, 3, 2);
        p.alpha = vec![1.5; 3];
        s.log_weights.fill(-1.2);
        let ga = grad_alpha(&p, &s);
        assert!(ga.iter().all(|&v| v == ga[0]));
    }

    #[test]
    fn m_step_never_decreases_bound() {
        for trial in 0..30 {
            let (p, s, sc) = random_problem(100 + trial, 5, 2, 6, 3);
            let before = elbo(&p, &s, &sc).unwrap();
            let next = m_step(&p, &s, &sc, &MStepConfig::default()).unwrap();
            let after = elbo(&next, &s, &sc).unwrap();
            assert!(after >= before - 1e-9, "trial {trial}: {before} → {after}");
            next.validate(default_profile_floor(5), DEFAULT_ALPHA_FLOOR)
                .unwrap();
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let x = vec![0.3, 0.7];
        let (out, steps) = ascend(
            x.clone(),
            |_| 1.0,
            |v| vec![0.0; v.len()],
            |v| project_capped_simplex(v, 0.01),
            &MStepConfig::default(),
        )
        .unwrap();
        assert_eq!(out, x);
        assert_eq!(steps, 0);
    }

    #[test]
    fn alpha_is_clamped_at_floor() {
        assert_eq!(project_alpha(&[-0.3, 2.0], 1e-3), vec![1e-3, 2.0]);
        // A linear objective decreasing in α₀ pushes it through zero.
        let (out, _) = ascend(
            vec![0.5, 1.0],
            |a| -a[0],
            |_| vec![-1.0, 0.0],
            |a| Ok(project_alpha(a, DEFAULT_ALPHA_FLOOR)),
            &MStepConfig::default(),
        )
        .unwrap();
        assert_eq!(out, vec![DEFAULT_ALPHA_FLOOR, 1.0]);
    }

    #[test]
    fn ascent_output_is_feasible() {
        let (p, s, sc) = random_problem(6, 8, 3, 9, 4);
        let cfg = MStepConfig {
            profile_floor: Some(0.02),
            ..MStepConfig::default()
        };
        let out = backtracking_ascent(&p, &s, &sc, &cfg).unwrap();
        for c in out.profile.as_array().columns() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|&x| x >= 0.02 - 1e-15));
        }
    }
}
