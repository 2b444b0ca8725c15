//! File formats: tab-separated matrices with gene and column identifiers,
//! cell label tables, TOML run configurations, run manifests and fitted
//! parameter files.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gem::{FitConfig, FitMode, FitResult};
use crate::model::{ModelParams, ProfileMatrix};
use crate::posterior::DEFAULT_CALL_THRESHOLD;
use crate::sim::SimConfig;

/// Header of the identifier column in every matrix file.
pub const GENE_COLUMN: &str = "gene";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A matrix with gene identifiers on the rows and sample, cell or type
/// identifiers on the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix<T> {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Array2<T>,
}

impl<T> LabeledMatrix<T> {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, values: Array2<T>) -> Result<Self> {
        if values.dim() != (row_ids.len(), col_ids.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{}×{} values with {} row and {} column identifiers",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        Ok(Self {
            row_ids,
            col_ids,
            values,
        })
    }

    /// Identifiers `prefix1`, `prefix2`, ... for unnamed data.
    pub fn numbered_ids(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// Matrix file contents before the cells are parsed; cells keep their
/// original text so they can be copied through unchanged.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub path: PathBuf,
    pub col_ids: Vec<String>,
    pub row_ids: Vec<String>,
    pub cells: Array2<String>,
}

impl RawTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let parse_err = |line: usize, column: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, 1, "empty file".into()))?;
        let col_ids: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
        if col_ids.is_empty() {
            return Err(parse_err(1, 2, "header has no data columns".into()));
        }
        let mut row_ids = Vec::new();
        let mut flat = Vec::new();
        for (line, row) in lines {
            let mut fields = row.split('\t');
            let id = fields.next().unwrap_or_default();
            let values: Vec<&str> = fields.collect();
            if values.len() != col_ids.len() {
                return Err(parse_err(
                    line,
                    values.len() + 1,
                    format!(
                        "expected {} fields after the identifier, found {}",
                        col_ids.len(),
                        values.len()
                    ),
                ));
            }
            row_ids.push(id.to_string());
            flat.extend(values.into_iter().map(|v| v.trim().to_string()));
        }
        if row_ids.is_empty() {
            return Err(parse_err(1, 1, "no data rows".into()));
        }
        let cells =
            Array2::from_shape_vec((row_ids.len(), col_ids.len()), flat).expect("rectangular rows");
        Ok(Self {
            path: path.to_path_buf(),
            col_ids,
            row_ids,
            cells,
        })
    }

    /// Rows and columns are 1-based file coordinates of the value at (r, c).
    fn located(&self, r: usize, c: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: r + 2,
            column: c + 2,
            message,
        }
    }

    pub fn to_counts(&self) -> Result<LabeledMatrix<u64>> {
        let mut values = Array2::zeros(self.cells.dim());
        for ((r, c), s) in self.cells.indexed_iter() {
            values[[r, c]] = parse_count(s).map_err(|m| self.located(r, c, m))?;
        }
        LabeledMatrix::new(self.row_ids.clone(), self.col_ids.clone(), values)
    }

    pub fn to_reals(&self) -> Result<LabeledMatrix<f64>> {
        let mut values = Array2::zeros(self.cells.dim());
        for ((r, c), s) in self.cells.indexed_iter() {
            let v: f64 = s
                .parse()
                .map_err(|_| self.located(r, c, format!("'{s}' is not a number")))?;
            if !v.is_finite() {
                return Err(self.located(r, c, format!("'{s}' is not finite")));
            }
            values[[r, c]] = v;
        }
        LabeledMatrix::new(self.row_ids.clone(), self.col_ids.clone(), values)
    }
}

/// Accepts non-negative integers, also written with a zero fraction ("3.0").
fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_nan() => Err("NaN is not a count".into()),
        Ok(v) if v < 0.0 => Err(format!("negative count {s}")),
        Ok(v) if v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(v as u64),
        Ok(_) => Err(format!("'{s}' is not a non-negative integer count")),
        Err(_) => Err(format!("'{s}' is not a number")),
    }
}

pub fn read_counts(path: &Path) -> Result<LabeledMatrix<u64>> {
    RawTable::read(path)?.to_counts()
}

pub fn read_reals(path: &Path) -> Result<LabeledMatrix<f64>> {
    RawTable::read(path)?.to_reals()
}

/// Formats a matrix; reals use the shortest representation that parses
/// back to the same value.
pub fn format_matrix<T: Display>(m: &LabeledMatrix<T>) -> String {
    format_matrix_with_corner(GENE_COLUMN, m)
}

/// As [`format_matrix`] with `corner` heading the identifier column.
pub fn format_matrix_with_corner<T: Display>(corner: &str, m: &LabeledMatrix<T>) -> String {
    let mut s = String::from(corner);
    for c in &m.col_ids {
        s.push('\t');
        s.push_str(c);
    }
    s.push('\n');
    for (id, row) in m.row_ids.iter().zip(m.values.rows()) {
        s.push_str(id);
        for v in row {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_matrix<T: Display>(path: &Path, m: &LabeledMatrix<T>) -> Result<()> {
    write_text(path, &format_matrix(m))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_pretty(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads `cell_id<TAB>type` rows (header required, types 1-based) and
/// returns 0-based labels in the order of `cell_ids`.
pub fn read_labels(path: &Path, cell_ids: &[String]) -> Result<(Vec<usize>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(path, &text, cell_ids)
}

pub fn parse_labels(path: &Path, text: &str, cell_ids: &[String]) -> Result<(Vec<usize>, usize)> {
    let err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut by_id = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(
                i + 1,
                fields.len().min(2) + 1,
                "expected cell_id and type".into(),
            ));
        }
        let label: usize = fields[1]
            .trim()
            .parse()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| {
                err(
                    i + 1,
                    2,
                    format!("'{}' is not a type number ≥ 1", fields[1]),
                )
            })?;
        if by_id.insert(fields[0].to_string(), label - 1).is_some() {
            return Err(err(i + 1, 1, format!("duplicate cell '{}'", fields[0])));
        }
    }
    let labels = cell_ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Config(format!("no label for cell '{id}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_types = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, n_types))
}

pub fn format_labels(cell_ids: &[String], labels: &[usize]) -> String {
    let mut s = String::from("cell_id\ttype\n");
    for (id, l) in cell_ids.iter().zip(labels) {
        s.push_str(&format!("{id}\t{}\n", l + 1));
    }
    s
}

/// Fails unless two files list the same genes in the same order.
pub fn check_same_genes(a: &[String], b: &[String]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} genes vs {} genes",
            a.len(),
            b.len()
        )));
    }
    if let Some((i, (x, y))) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x != y) {
        return Err(Error::DimensionMismatch(format!(
            "gene {} is '{x}' in one file and '{y}' in the other",
            i + 1
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub bulk: Option<PathBuf>,
    pub sc: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub seeds: Vec<u64>,
    pub nmf_rank: usize,
    pub nmf_max_iterations: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let d = crate::bench::BenchmarkConfig::default();
        Self {
            seeds: d.seeds,
            nmf_rank: d.nmf_rank,
            nmf_max_iterations: d.nmf_max_iterations,
        }
    }
}

/// Everything one command needs. Every section is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both `sim.seed` and `fit.seed` when set.
    pub seed: Option<u64>,
    pub inputs: InputPaths,
    pub output: Option<PathBuf>,
    pub threshold: f64,
    pub sim: SimConfig,
    pub fit: FitConfig,
    pub benchmark: BenchmarkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            inputs: InputPaths::default(),
            output: None,
            threshold: DEFAULT_CALL_THRESHOLD,
            sim: SimConfig::default(),
            fit: FitConfig::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies the top-level seed to the simulation and fit sections.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.sim.seed = seed;
            self.fit.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} must lie in [0, 1]",
                self.threshold
            )));
        }
        self.sim.validate()?;
        self.fit.validate()?;
        if self.benchmark.nmf_rank == 0 {
            return Err(Error::Config("benchmark.nmf_rank must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so equal settings hash equally
    /// however the file was written. The output directory is left out.
    pub fn hash(&self) -> String {
        let settings = RunConfig {
            output: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&settings).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// The resolved configuration, enough to rerun the command.
    pub config: RunConfig,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &RunConfig, files: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: config.hash(),
            config: config.clone(),
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

/// Serialized form of the fitted parameters and run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub mode: FitMode,
    pub iterations: usize,
    pub converged: bool,
    pub final_elbo: Option<f64>,
    pub alpha: Vec<f64>,
    pub mu_kappa: f64,
    pub var_kappa: f64,
    pub mu_tau: f64,
    pub var_tau: f64,
    /// N×K, also written as a matrix file.
    pub profile: Array2<f64>,
}

impl ParamsFile {
    pub fn from_fit(fit: &FitResult) -> Self {
        let p = &fit.params;
        Self {
            mode: fit.mode,
            iterations: fit.iterations(),
            converged: fit.converged,
            final_elbo: fit.elbo_trace.last().copied(),
            alpha: p.alpha.clone(),
            mu_kappa: p.mu_kappa,
            var_kappa: p.var_kappa,
            mu_tau: p.mu_tau,
            var_tau: p.var_tau,
            profile: p.profile.as_array().clone(),
        }
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            profile: ProfileMatrix::from_unchecked(self.profile.clone()),
            alpha: self.alpha.clone(),
            mu_kappa: self.mu_kappa,
            var_kappa: self.var_kappa,
            mu_tau: self.mu_tau,
            var_tau: self.var_tau,
        }
    }
}
