//! Synthetic data with known ground truth, and the naive profile estimator.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{default_profile_floor, logistic, BulkCounts, SingleCellCounts};
use crate::mstep::project_capped_simplex;
use crate::rng::{RngStream, UnitKind};
use crate::samplers::{
    bernoulli_draw, dirichlet_draw, multinomial_into, negative_binomial_draw, normal_draw,
    poisson_draw,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_genes: usize,
    pub n_cells: usize,
    pub n_bulk: usize,
    /// Fraction of single cells per type; its length sets K.
    pub cell_type_fractions: Vec<f64>,
    /// Dirichlet parameter of bulk proportions, length K.
    pub alpha: Vec<f64>,
    pub n_markers: usize,
    pub n_anti_markers: usize,
    pub n_housekeeping: usize,
    pub kappa_mean: f64,
    pub kappa_sd: f64,
    /// Defaults to 1.5 N.
    pub tau_mean: Option<f64>,
    /// Defaults to 0.15 N.
    pub tau_sd: Option<f64>,
    /// Bulk depth is Poisson(bulk_depth_per_gene · N).
    pub bulk_depth_per_gene: f64,
    /// Single-cell depth is negative binomial with mean sc_depth_per_gene · N.
    pub sc_depth_per_gene: f64,
    /// Negative binomial size r: variance μ + μ²/r.
    pub sc_depth_size: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_genes: 200,
            n_cells: 100,
            n_bulk: 150,
            cell_type_fractions: vec![0.3, 0.3, 0.4],
            alpha: vec![1.0, 2.0, 3.0],
            n_markers: 10,
            n_anti_markers: 10,
            n_housekeeping: 30,
            kappa_mean: -1.0,
            kappa_sd: 0.5,
            tau_mean: None,
            tau_sd: None,
            bulk_depth_per_gene: 50.0,
            sc_depth_per_gene: 2.0,
            sc_depth_size: 2.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_types(&self) -> usize {
        self.cell_type_fractions.len()
    }

    pub fn tau_mean(&self) -> f64 {
        self.tau_mean.unwrap_or(1.5 * self.n_genes as f64)
    }

    pub fn tau_sd(&self) -> f64 {
        self.tau_sd.unwrap_or(0.15 * self.n_genes as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_types();
        if k == 0 || self.n_genes == 0 || self.n_cells == 0 {
            return Err(Error::Config(
                "genes, cells and cell types must be positive".into(),
            ));
        }
        let roles = (self.n_markers + self.n_anti_markers) * k + self.n_housekeeping;
        if roles > self.n_genes {
            return Err(Error::Config(format!(
                "{roles} marker, anti-marker and house-keeping genes exceed {} genes",
                self.n_genes
            )));
        }
        if self.n_housekeeping == self.n_genes {
            return Err(Error::Config(
                "at least one gene must not be house-keeping".into(),
            ));
        }
        if self.cell_type_fractions.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::Config(
                "cell-type fractions must be non-negative".into(),
            ));
        }
        if (self.cell_type_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("cell-type fractions must sum to 1".into()));
        }
        if self.alpha.len() != k || self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "alpha must have {k} positive entries"
            )));
        }
        let positive = [
            self.bulk_depth_per_gene,
            self.sc_depth_per_gene,
            self.sc_depth_size,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("depth parameters must be positive".into()));
        }
        if !(self.kappa_sd >= 0.0 && self.tau_sd() >= 0.0) {
            return Err(Error::Config(
                "standard deviations must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Cells per type by largest remainder, so the counts sum to L.
    pub fn cells_per_type(&self) -> Vec<usize> {
        let l = self.n_cells as f64;
        let mut counts: Vec<usize> = self
            .cell_type_fractions
            .iter()
            .map(|f| (f * l).floor() as usize)
            .collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        let rem = |k: usize| self.cell_type_fractions[k] * l - counts[k] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        let missing = self.n_cells - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneRole {
    Marker(usize),
    AntiMarker(usize),
    Housekeeping,
    Other,
}

/// Gene roles in disjoint blocks: markers of each type, anti-markers of each
/// type, house-keeping genes, then the rest.
pub fn gene_roles(config: &SimConfig) -> Vec<GeneRole> {
    let k = config.n_types();
    let mut roles = Vec::with_capacity(config.n_genes);
    for t in 0..k {
        roles.extend(std::iter::repeat_n(GeneRole::Marker(t), config.n_markers));
    }
    for t in 0..k {
        roles.extend(std::iter::repeat_n(
            GeneRole::AntiMarker(t),
            config.n_anti_markers,
        ));
    }
    roles.extend(std::iter::repeat_n(
        GeneRole::Housekeeping,
        config.n_housekeeping,
    ));
    roles.resize(config.n_genes, GeneRole::Other);
    roles
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Profile with exact structural zeros.
    pub profile_exact: Array2<f64>,
    /// Profile the data were drawn from: `profile_exact` projected so every
    /// entry is at least 1/(100 N).
    pub profile: Array2<f64>,
    /// K×M
    pub weights: Array2<f64>,
    /// N×L, 1 = observed, 0 = dropout.
    pub observed: Array2<u8>,
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
    pub gene_roles: Vec<GeneRole>,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub bulk: Option<BulkCounts>,
    pub sc: SingleCellCounts,
    pub truth: GroundTruth,
}

impl Simulation {
    pub fn zero_fraction(&self) -> f64 {
        let y = self.sc.counts();
        y.iter().filter(|&&v| v == 0).count() as f64 / y.len() as f64
    }
}

fn simulate_profile(config: &SimConfig, roles: &[GeneRole], rng: &mut RngStream) -> Array2<f64> {
    let n = config.n_genes;
    let k = config.n_types();
    let mut a = Array2::zeros((n, k));
    for (i, role) in roles.iter().enumerate() {
        match *role {
            GeneRole::Housekeeping => {
                let v = normal_draw(rng, 0.0, 1.0).exp();
                a.row_mut(i).fill(v);
            }
            _ => {
                for t in 0..k {
                    a[[i, t]] = normal_draw(rng, 0.0, 1.0).exp();
                }
            }
        }
        match *role {
            GeneRole::Marker(own) => (0..k).filter(|&t| t != own).for_each(|t| a[[i, t]] = 0.0),
            GeneRole::AntiMarker(own) => a[[i, own]] = 0.0,
            _ => {}
        }
    }
    let hk_share = config.n_housekeeping as f64 / n as f64;
    for mut col in a.columns_mut() {
        let (mut hk, mut rest) = (0.0, 0.0);
        for (v, role) in col.iter().zip(roles) {
            if *role == GeneRole::Housekeeping {
                hk += v;
            } else {
                rest += v;
            }
        }
        for (v, role) in col.iter_mut().zip(roles) {
            if *role == GeneRole::Housekeeping {
                *v *= hk_share / hk;
            } else {
                *v *= (1.0 - hk_share) / rest;
            }
        }
    }
    a
}

/// Draws a data set from the generative model.
pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let n = config.n_genes;
    let k = config.n_types();
    let roles = gene_roles(config);
    let mut rng = RngStream::for_unit(config.seed, UnitKind::Simulation, 0, 0);
    let profile_exact = simulate_profile(config, &roles, &mut rng);
    let floor = default_profile_floor(n);
    let mut profile = profile_exact.clone();
    for t in 0..k {
        let col = project_capped_simplex(&profile_exact.column(t).to_vec(), floor)?;
        profile.column_mut(t).assign(&Array1::from(col));
    }

    let labels: Vec<usize> = config
        .cells_per_type()
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat_n(t, c))
        .collect();
    let l = config.n_cells;
    let mut y = Array2::<u64>::zeros((n, l));
    let mut observed = Array2::<u8>::zeros((n, l));
    let mut kappa = vec![0.0; l];
    let mut tau = vec![0.0; l];
    let sc_mean = config.sc_depth_per_gene * n as f64;
    let mut weights = vec![0.0; n];
    let mut counts = vec![0u64; n];
    for (c, &g) in labels.iter().enumerate() {
        let mut rng = RngStream::for_unit(config.seed, UnitKind::Simulation, c, 1);
        kappa[c] = normal_draw(&mut rng, config.kappa_mean, config.kappa_sd);
        tau[c] = normal_draw(&mut rng, config.tau_mean(), config.tau_sd());
        let depth = loop {
            let d = negative_binomial_draw(&mut rng, sc_mean, config.sc_depth_size);
            if d > 0 {
                break d;
            }
        };
        let total = loop {
            let mut total = 0.0;
            for i in 0..n {
                let a = profile[[i, g]];
                let s = bernoulli_draw(&mut rng, logistic(kappa[c] + tau[c] * a));
                observed[[i, c]] = u8::from(s);
                weights[i] = if s { a } else { 0.0 };
                total += weights[i];
            }
            if total > 0.0 {
                break total;
            }
        };
        multinomial_into(&mut rng, depth, &weights, total, &mut counts);
        for i in 0..n {
            y[[i, c]] = counts[i];
        }
    }
    let sc = SingleCellCounts::new(y, labels, k)?;

    let m = config.n_bulk;
    let bulk_mean = config.bulk_depth_per_gene * n as f64;
    let mut w = Array2::<f64>::zeros((k, m));
    let mut x = Array2::<u64>::zeros((n, m));
    let mut mix = vec![0.0; n];
    for j in 0..m {
        let mut rng = RngStream::for_unit(config.seed, UnitKind::Simulation, j, 2);
        let wj = dirichlet_draw(&mut rng, &config.alpha)?;
        for (i, p) in mix.iter_mut().enumerate() {
            *p = (0..k).map(|t| profile[[i, t]] * wj[t]).sum();
        }
        let depth = loop {
            let d = poisson_draw(&mut rng, bulk_mean);
            if d > 0 {
                break d;
            }
        };
        let total: f64 = mix.iter().sum();
        multinomial_into(&mut rng, depth, &mix, total, &mut counts);
        for i in 0..n {
            x[[i, j]] = counts[i];
        }
        for t in 0..k {
            w[[t, j]] = wj[t];
        }
    }
    let bulk = if m > 0 {
        Some(BulkCounts::new(x)?)
    } else {
        None
    };
    Ok(Simulation {
        bulk,
        sc,
        truth: GroundTruth {
            profile_exact,
            profile,
            weights: w,
            observed,
            kappa,
            tau,
            gene_roles: roles,
        },
    })
}

/// Per-type average of depth-normalized single-cell columns.
pub fn naive_profile(sc: &SingleCellCounts) -> Result<Array2<f64>> {
    let k = sc.n_types();
    let sizes = sc.type_counts();
    if let Some(t) = sizes.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCellType(t + 1));
    }
    let mut a = Array2::<f64>::zeros((sc.n_genes(), k));
    for (l, &g) in sc.labels().iter().enumerate() {
        let r = sc.depths()[l] as f64;
        for (i, &y) in sc.counts().column(l).iter().enumerate() {
            a[[i, g]] += y as f64 / r;
        }
    }
    for (t, mut col) in a.columns_mut().into_iter().enumerate() {
        let size = sizes[t] as f64;
        col.mapv_inplace(|v| v / size);
    }
    Ok(a)
}
