//! Domain types and the deterministic pieces of the model shared by every
//! other module: the profile matrix, validated count matrices, the parameter
//! set, the logistic observation probability and the zero classification.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor on the Dirichlet concentration.
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-3;

/// Tolerance on column sums of a profile matrix.
pub const COLUMN_SUM_TOL: f64 = 1e-9;

/// Default floor on profile entries: `1 / (100 N)`.
pub fn default_profile_floor(n_genes: usize) -> f64 {
    1.0 / (100.0 * n_genes as f64)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_genes: usize,
    pub n_types: usize,
    pub n_cells: usize,
    /// Zero when no bulk data is supplied (single-cell-only fits).
    pub n_bulk: usize,
}

impl Dimensions {
    pub fn new(n_genes: usize, n_types: usize, n_cells: usize, n_bulk: usize) -> Result<Self> {
        if n_genes == 0 || n_types == 0 || n_cells == 0 {
            return Err(Error::DimensionMismatch(format!(
                "genes ({n_genes}), cell types ({n_types}) and cells ({n_cells}) must all be positive"
            )));
        }
        if n_types > n_genes {
            return Err(Error::DimensionMismatch(format!(
                "{n_types} cell types exceed {n_genes} genes"
            )));
        }
        Ok(Self {
            n_genes,
            n_types,
            n_cells,
            n_bulk,
        })
    }
}

/// N×K column-stochastic matrix of relative expression per cell type.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileMatrix(Array2<f64>);

impl ProfileMatrix {
    /// Validates that every entry is at least `floor` (and strictly positive)
    /// and that every column sums to one.
    pub fn new(values: Array2<f64>, floor: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("profile matrix".into()));
        }
        let min_allowed = floor.max(f64::MIN_POSITIVE);
        for ((i, k), &v) in values.indexed_iter() {
            // Projection leaves entries at `floor` up to rounding.
            if v < min_allowed - 1e-15 || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "profile entry ({i}, {k}) = {v} is below the floor {floor}"
                )));
            }
        }
        for (k, col) in values.columns().into_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "profile column {k} sums to {s}"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Wraps a matrix without checks. Used for ground-truth profiles, which
    /// may contain exact zeros.
    pub fn from_unchecked(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn n_genes(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_types(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    #[inline]
    pub fn get(&self, gene: usize, cell_type: usize) -> f64 {
        self.0[[gene, cell_type]]
    }

    /// Copy of column `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.0.column(k).to_vec()
    }
}

fn column_depths(counts: &Array2<u64>, what: &'static str) -> Result<Vec<u64>> {
    counts
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            let r: u64 = col.sum();
            if r == 0 {
                Err(Error::ZeroDepth { what, column: j })
            } else {
                Ok(r)
            }
        })
        .collect()
}

fn to_counts(raw: ArrayView2<'_, f64>) -> Result<Array2<u64>> {
    let mut out = Array2::zeros(raw.dim());
    for ((i, j), &v) in raw.indexed_iter() {
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
            return Err(Error::InvalidCount {
                row: i,
                column: j,
                value: v,
            });
        }
        out[[i, j]] = v as u64;
    }
    Ok(out)
}

/// N×M bulk read counts with per-sample depths.
#[derive(Clone, Debug, PartialEq)]
pub struct BulkCounts {
    counts: Array2<u64>,
    depths: Vec<u64>,
}

impl BulkCounts {
    pub fn new(counts: Array2<u64>) -> Result<Self> {
        let depths = column_depths(&counts, "bulk sample")?;
        Ok(Self { counts, depths })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn depths(&self) -> &[u64] {
        &self.depths
    }

    pub fn n_genes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.counts.ncols()
    }
}

/// N×L single-cell counts with depths and zero-based cell-type labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleCellCounts {
    counts: Array2<u64>,
    depths: Vec<u64>,
    labels: Vec<usize>,
    n_types: usize,
}

impl SingleCellCounts {
    /// `labels` are zero-based type indices.
    pub fn new(counts: Array2<u64>, labels: Vec<usize>, n_types: usize) -> Result<Self> {
        if labels.len() != counts.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} cells",
                labels.len(),
                counts.ncols()
            )));
        }
        if let Some((cell, &label)) = labels.iter().enumerate().find(|(_, &g)| g >= n_types) {
            return Err(Error::LabelOutOfRange {
                cell,
                label: label + 1,
                n_types,
            });
        }
        let depths = column_depths(&counts, "cell")?;
        Ok(Self {
            counts,
            depths,
            labels,
            n_types,
        })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn depths(&self) -> &[u64] {
        &self.depths
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn n_genes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.ncols()
    }

    /// Number of cells of each type.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_types];
        for &g in &self.labels {
            c[g] += 1;
        }
        c
    }
}

/// Validated input: single-cell counts and optional bulk counts over the same
/// genes, in the same order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dims: Dimensions,
    pub bulk: Option<BulkCounts>,
    pub sc: SingleCellCounts,
}

impl Dataset {
    pub fn new(bulk: Option<BulkCounts>, sc: SingleCellCounts) -> Result<Self> {
        let n_bulk = bulk.as_ref().map_or(0, BulkCounts::n_samples);
        let dims = Dimensions::new(sc.n_genes(), sc.n_types(), sc.n_cells(), n_bulk)?;
        if let Some(b) = &bulk {
            if b.n_genes() != sc.n_genes() {
                return Err(Error::DimensionMismatch(format!(
                    "bulk has {} genes, single-cell data has {}",
                    b.n_genes(),
                    sc.n_genes()
                )));
            }
            if b.n_samples() == 0 {
                return Err(Error::DimensionMismatch(
                    "bulk matrix has no samples".into(),
                ));
            }
        }
        Ok(Self { dims, bulk, sc })
    }
}

/// Checks raw matrices against `dims` and converts them into validated count
/// types. `labels` are one-based, as they appear in label files. Depths are
/// always recomputed from the matrices.
pub fn validate_dataset(
    bulk: Option<ArrayView2<'_, f64>>,
    sc: ArrayView2<'_, f64>,
    labels: &[usize],
    dims: Dimensions,
) -> Result<Dataset> {
    if sc.dim() != (dims.n_genes, dims.n_cells) {
        return Err(Error::DimensionMismatch(format!(
            "single-cell matrix is {}x{}, expected {}x{}",
            sc.nrows(),
            sc.ncols(),
            dims.n_genes,
            dims.n_cells
        )));
    }
    if labels.len() != dims.n_cells {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} cells",
            labels.len(),
            dims.n_cells
        )));
    }
    if let Some((cell, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &g)| g == 0 || g > dims.n_types)
    {
        return Err(Error::LabelOutOfRange {
            cell,
            label,
            n_types: dims.n_types,
        });
    }
    let bulk = match bulk {
        Some(x) => {
            if x.dim() != (dims.n_genes, dims.n_bulk) {
                return Err(Error::DimensionMismatch(format!(
                    "bulk matrix is {}x{}, expected {}x{}",
                    x.nrows(),
                    x.ncols(),
                    dims.n_genes,
                    dims.n_bulk
                )));
            }
            Some(BulkCounts::new(to_counts(x)?)?)
        }
        None => None,
    };
    let sc = SingleCellCounts::new(
        to_counts(sc)?,
        labels.iter().map(|g| g - 1).collect(),
        dims.n_types,
    )?;
    let data = Dataset::new(bulk, sc)?;
    if data.dims != dims {
        return Err(Error::DimensionMismatch(format!(
            "declared dimensions {dims:?} differ from data {:?}",
            data.dims
        )));
    }
    Ok(data)
}

/// θ = (A, α, μ_κ, σ_κ², μ_τ, σ_τ²).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub profile: ProfileMatrix,
    pub alpha: Vec<f64>,
    pub mu_kappa: f64,
    pub var_kappa: f64,
    pub mu_tau: f64,
    pub var_tau: f64,
}

impl ModelParams {
    pub fn validate(&self, profile_floor: f64, alpha_floor: f64) -> Result<()> {
        ProfileMatrix::new(self.profile.as_array().clone(), profile_floor)?;
        if self.alpha.len() != self.profile.n_types() {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {} entries for {} cell types",
                self.alpha.len(),
                self.profile.n_types()
            )));
        }
        if let Some(a) = self.alpha.iter().find(|&&a| !(a >= alpha_floor - 1e-15)) {
            return Err(Error::InvalidParameter(format!(
                "alpha entry {a} below floor {alpha_floor}"
            )));
        }
        for (name, v) in [("var_kappa", self.var_kappa), ("var_tau", self.var_tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        if !self.mu_kappa.is_finite() || !self.mu_tau.is_finite() {
            return Err(Error::NonFinite("dropout means".into()));
        }
        Ok(())
    }
}

/// π_il = logistic(κ_l + τ_l A[i][k]): probability that gene `gene` is
/// observed (not dropped out) in a cell of type `cell_type`.
pub fn observation_prob(
    profile: &ProfileMatrix,
    kappa: f64,
    tau: f64,
    gene: usize,
    cell_type: usize,
) -> Result<f64> {
    if !kappa.is_finite() || !tau.is_finite() {
        return Err(Error::NonFinite(format!("kappa = {kappa}, tau = {tau}")));
    }
    Ok(logistic(kappa + tau * profile.get(gene, cell_type)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryClass {
    Observed,
    Dropout,
    StructuralZero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroPartition {
    pub classes: Array2<EntryClass>,
    pub n_observed: usize,
    pub n_dropout: usize,
    pub n_structural: usize,
}

/// Splits every (gene, cell) entry into dropout (S = 0), structural zero
/// (S = 1, Y = 0) or observed (Y > 0).
pub fn classify_zeros(counts: &Array2<u64>, observed: &Array2<u8>) -> Result<ZeroPartition> {
    if counts.dim() != observed.dim() {
        return Err(Error::DimensionMismatch(format!(
            "counts {:?} vs dropout state {:?}",
            counts.dim(),
            observed.dim()
        )));
    }
    let mut classes = Array2::from_elem(counts.dim(), EntryClass::Observed);
    let (mut n_observed, mut n_dropout, mut n_structural) = (0, 0, 0);
    for ((i, l), &y) in counts.indexed_iter() {
        let s = observed[[i, l]];
        let class = match (y > 0, s != 0) {
            (true, true) => {
                n_observed += 1;
                EntryClass::Observed
            }
            (true, false) => return Err(Error::InconsistentDropout { gene: i, cell: l }),
            (false, false) => {
                n_dropout += 1;
                EntryClass::Dropout
            }
            (false, true) => {
                n_structural += 1;
                EntryClass::StructuralZero
            }
        };
        classes[[i, l]] = class;
    }
    Ok(ZeroPartition {
        classes,
        n_observed,
        n_dropout,
        n_structural,
    })
}
