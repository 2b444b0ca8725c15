use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use ursm::bench::{run_benchmark, BenchmarkConfig};
use ursm::gem::{fit as run_fit, FitMode};
use ursm::io::{
    check_same_genes, format_labels, format_matrix, format_matrix_with_corner, read_json,
    read_labels, read_reals, to_json_pretty, write_json, write_matrix, write_text, LabeledMatrix,
    Manifest, ParamsFile, RawTable, RunConfig, MANIFEST_FILE,
};
use ursm::model::{BulkCounts, EntryClass, SingleCellCounts};
use ursm::posterior::{
    call_dropouts, deconvolve as fitted_proportions, deconvolve_with_params, dropout_posterior,
    impute as impute_matrix,
};
use ursm::sim::simulate as run_simulation;

use crate::{
    BenchmarkArgs, Common, DeconvolveArgs, FitArgs, FitOverrides, ImputeArgs, SimulateArgs,
};

/// Exit status when the EM loop stopped at its iteration cap.
const EXIT_ITERATION_CAP: u8 = 2;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    config.resolve_seed();
    if let Some(out) = &common.out {
        config.output = Some(out.clone());
    }
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, o: &FitOverrides) {
    if let Some(s) = o.sweeps {
        config.fit.estep.n_sweeps = s;
    }
    if let Some(n) = o.em_iters {
        config.fit.max_em_iterations = n;
    }
}

fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config
        .output
        .clone()
        .context("no output directory: pass --out or set `output` in the config")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn type_ids(k: usize) -> Vec<String> {
    LabeledMatrix::<f64>::numbered_ids("type", k)
}

pub fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let config = load_config(&args.common)?;
    config.validate()?;
    let sim = run_simulation(&config.sim)?;
    let dir = output_dir(&config)?;
    let n = config.sim.n_genes;
    let genes = LabeledMatrix::<u64>::numbered_ids("gene", n);
    let cells = LabeledMatrix::<u64>::numbered_ids("cell", config.sim.n_cells);
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        write_text(&dir.join(name), &text)?;
        files.push(name.to_string());
        Ok(())
    };

    if let Some(bulk) = &sim.bulk {
        let samples = LabeledMatrix::<u64>::numbered_ids("bulk", bulk.n_samples());
        let m = LabeledMatrix::new(genes.clone(), samples.clone(), bulk.counts().clone())?;
        put("bulk.tsv", format_matrix(&m))?;
        let w = LabeledMatrix::new(
            type_ids(sim.truth.weights.nrows()),
            samples,
            sim.truth.weights.clone(),
        )?;
        put(
            "truth_proportions.tsv",
            format_matrix_with_corner("type", &w),
        )?;
    }
    put(
        "sc.tsv",
        format_matrix(&LabeledMatrix::new(
            genes.clone(),
            cells.clone(),
            sim.sc.counts().clone(),
        )?),
    )?;
    put("labels.tsv", format_labels(&cells, sim.sc.labels()))?;
    let k = sim.sc.n_types();
    put(
        "truth_profile.tsv",
        format_matrix(&LabeledMatrix::new(
            genes.clone(),
            type_ids(k),
            sim.truth.profile.clone(),
        )?),
    )?;
    put(
        "truth_observed.tsv",
        format_matrix(&LabeledMatrix::new(
            genes,
            cells,
            sim.truth.observed.clone(),
        )?),
    )?;
    put("truth.json", to_json_pretty(&sim.truth)?)?;

    Manifest::new("simulate", config.sim.seed, &config, files).write(&dir)?;
    println!(
        "simulated {} genes, {} cells, {} bulk samples; single-cell zero fraction {:.3}",
        n,
        config.sim.n_cells,
        config.sim.n_bulk,
        sim.zero_fraction()
    );
    Ok(ExitCode::SUCCESS)
}

/// Single-cell counts and labels, with gene and cell identifiers.
struct ScInput {
    raw: RawTable,
    data: SingleCellCounts,
}

fn read_sc(sc: &Path, labels: &Path) -> Result<ScInput> {
    let raw = RawTable::read(sc)?;
    let counts = raw.to_counts()?;
    let (labels, k) = read_labels(labels, &counts.col_ids)?;
    let data = SingleCellCounts::new(counts.values, labels, k)
        .with_context(|| format!("single-cell data in {}", sc.display()))?;
    Ok(ScInput { raw, data })
}

pub fn fit(args: FitArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.common)?;
    apply_overrides(&mut config, &args.overrides);
    if let Some(p) = args.bulk {
        config.inputs.bulk = Some(p);
    }
    if let Some(p) = args.sc {
        config.inputs.sc = Some(p);
    }
    if let Some(p) = args.labels {
        config.inputs.labels = Some(p);
    }
    match (args.mode, &config.inputs.bulk) {
        (Some(m), _) => config.fit.mode = m.into(),
        (None, None) => config.fit.mode = FitMode::SingleCellOnly,
        (None, Some(_)) => {}
    }
    if config.fit.mode.uses_bulk() && config.inputs.bulk.is_none() {
        bail!("mode {} needs bulk counts (--bulk)", config.fit.mode);
    }
    config.validate()?;
    let sc_path = config.inputs.sc.clone().context("missing --sc")?;
    let labels_path = config.inputs.labels.clone().context("missing --labels")?;

    let sc = read_sc(&sc_path, &labels_path)?;
    let genes = sc.raw.row_ids.clone();
    let bulk = match (&config.inputs.bulk, config.fit.mode.uses_bulk()) {
        (Some(path), true) => {
            let m = RawTable::read(path)?.to_counts()?;
            check_same_genes(&genes, &m.row_ids)
                .context("bulk and single-cell gene lists differ")?;
            Some((m.col_ids, BulkCounts::new(m.values)?))
        }
        _ => None,
    };
    let dir = output_dir(&config)?;

    let result = run_fit(bulk.as_ref().map(|b| &b.1), &sc.data, &config.fit)?;
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        write_text(&dir.join(name), &text)?;
        files.push(name.to_string());
        Ok(())
    };

    let k = sc.data.n_types();
    let profile = LabeledMatrix::new(
        genes.clone(),
        type_ids(k),
        result.params.profile.as_array().clone(),
    )?;
    put("profile.tsv", format_matrix(&profile))?;
    put(
        "params.json",
        to_json_pretty(&ParamsFile::from_fit(&result))?,
    )?;
    let mut trace = String::from("iteration\telbo\tseconds\n");
    for (i, (e, s)) in result
        .elbo_trace
        .iter()
        .zip(&result.iteration_seconds)
        .enumerate()
    {
        trace.push_str(&format!("{}\t{e}\t{s}\n", i + 1));
    }
    put("elbo_trace.tsv", trace)?;
    let post = LabeledMatrix::new(genes, sc.raw.col_ids.clone(), dropout_posterior(&result))?;
    put("dropout_posterior.tsv", format_matrix(&post))?;
    if let Some((samples, _)) = &bulk {
        let d = fitted_proportions(&result)?;
        put(
            "proportions.tsv",
            format_matrix_with_corner(
                "type",
                &LabeledMatrix::new(type_ids(k), samples.clone(), d.proportions)?,
            ),
        )?;
    }
    put(
        "labels.tsv",
        format_labels(&sc.raw.col_ids, sc.data.labels()),
    )?;
    Manifest::new("fit", config.fit.seed, &config, files).write(&dir)?;

    println!(
        "{} fit: {} EM iterations, {}",
        result.mode,
        result.iterations(),
        if result.converged {
            "converged"
        } else {
            "stopped at the iteration cap"
        }
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ITERATION_CAP)
    })
}

/// Manifest file name for a command writing into `dir`; a fit directory
/// keeps its own manifest.
fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    if dir.join(MANIFEST_FILE).exists() {
        dir.join(format!("manifest.{command}.json"))
    } else {
        dir.join(MANIFEST_FILE)
    }
}

fn fit_manifest(fit_dir: &Path) -> Result<Manifest> {
    read_json(&fit_dir.join(MANIFEST_FILE))
        .with_context(|| format!("{} is not a fit directory", fit_dir.display()))
}

pub fn impute(args: ImputeArgs) -> Result<ExitCode> {
    let manifest = fit_manifest(&args.fit)?;
    let mut config = manifest.config.clone();
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    config.validate()?;
    let sc = read_sc(&args.sc, &args.fit.join("labels.tsv"))?;
    let profile = read_reals(&args.fit.join("profile.tsv"))?;
    let post = read_reals(&args.fit.join("dropout_posterior.tsv"))?;
    check_same_genes(&sc.raw.row_ids, &profile.row_ids)
        .context("single-cell genes differ from the fit")?;
    if post.col_ids != sc.raw.col_ids || post.row_ids != sc.raw.row_ids {
        bail!(
            "cells or genes of {} differ from the fitted dropout posterior",
            args.sc.display()
        );
    }
    let profile = ursm::model::ProfileMatrix::from_unchecked(profile.values);
    let calls = call_dropouts(post.values.view(), sc.data.counts(), config.threshold)?;
    let imputed = impute_matrix(&sc.data, &calls, &profile, args.round)?;

    // Entries that were not imputed keep their original text.
    let cells = Array2::from_shape_fn(imputed.values.dim(), |(i, l)| match imputed.mask[[i, l]] {
        EntryClass::Dropout => imputed.values[[i, l]].to_string(),
        _ => sc.raw.cells[[i, l]].clone(),
    });
    let mask = imputed.mask.mapv(|c| match c {
        EntryClass::Observed => "observed",
        EntryClass::Dropout => "dropout",
        EntryClass::StructuralZero => "structural_zero",
    });
    let dir = match args.out {
        Some(d) => d,
        None => args.fit.clone(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ids = (sc.raw.row_ids.clone(), sc.raw.col_ids.clone());
    write_matrix(
        &dir.join("imputed.tsv"),
        &LabeledMatrix::new(ids.0.clone(), ids.1.clone(), cells)?,
    )?;
    write_matrix(
        &dir.join("call_mask.tsv"),
        &LabeledMatrix::new(ids.0, ids.1, mask)?,
    )?;
    let files = vec!["imputed.tsv".to_string(), "call_mask.tsv".to_string()];
    write_json(
        &manifest_path(&dir, "impute"),
        &Manifest::new("impute", manifest.seed, &config, files),
    )?;

    let n_zero = sc.data.counts().iter().filter(|&&y| y == 0).count();
    let n_imputed = imputed
        .mask
        .iter()
        .filter(|&&c| c == EntryClass::Dropout)
        .count();
    println!(
        "imputed {n_imputed} of {n_zero} zero entries at threshold {}",
        config.threshold
    );
    Ok(ExitCode::SUCCESS)
}

pub fn deconvolve(args: DeconvolveArgs) -> Result<ExitCode> {
    let manifest = fit_manifest(&args.fit)?;
    let mut config = match &args.common.config {
        Some(_) => load_config(&args.common)?,
        None => manifest.config.clone(),
    };
    if let Some(seed) = args.common.seed {
        config.seed = Some(seed);
        config.resolve_seed();
    }
    if let Some(out) = &args.common.out {
        config.output = Some(out.clone());
    }
    if let Some(s) = args.sweeps {
        config.fit.estep.n_sweeps = s;
    }
    config.inputs.bulk = Some(args.bulk.clone());
    config.validate()?;
    let params: ParamsFile = read_json(&args.fit.join("params.json"))?;
    let genes = read_reals(&args.fit.join("profile.tsv"))?.row_ids;
    let m = RawTable::read(&args.bulk)?.to_counts()?;
    check_same_genes(&genes, &m.row_ids).context("bulk genes differ from the fit")?;
    let bulk = BulkCounts::new(m.values)?;
    let d = deconvolve_with_params(&bulk, &params.params(), &config.fit.estep, config.fit.seed)?;

    let dir = output_dir(&config)?;
    let k = d.proportions.nrows();
    let props = LabeledMatrix::new(type_ids(k), m.col_ids.clone(), d.proportions)?;
    write_text(
        &dir.join("proportions.tsv"),
        &format_matrix_with_corner("type", &props),
    )?;
    let mut dominant = String::from("sample\ttype\n");
    for (s, t) in m.col_ids.iter().zip(&d.dominant_type) {
        dominant.push_str(&format!("{s}\t{}\n", t + 1));
    }
    write_text(&dir.join("dominant_type.tsv"), &dominant)?;
    let files = vec![
        "proportions.tsv".to_string(),
        "dominant_type.tsv".to_string(),
    ];
    write_json(
        &manifest_path(&dir, "deconvolve"),
        &Manifest::new("deconvolve", config.fit.seed, &config, files),
    )?;
    println!(
        "deconvolved {} bulk samples into {k} types",
        m.col_ids.len()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn benchmark(args: BenchmarkArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.common)?;
    apply_overrides(&mut config, &args.overrides);
    if let Some(seeds) = args.seeds {
        config.benchmark.seeds = seeds;
    }
    config.validate()?;
    let bench = BenchmarkConfig {
        seeds: config.benchmark.seeds.clone(),
        sim: config.sim.clone(),
        fit: config.fit.clone(),
        nmf_rank: config.benchmark.nmf_rank,
        nmf_max_iterations: config.benchmark.nmf_max_iterations,
    };
    bench.validate()?;
    let dir = output_dir(&config)?;
    let report = run_benchmark(&bench)?;
    write_text(&dir.join("report.tsv"), &report.to_tsv())?;
    write_json(&dir.join("report.json"), &report)?;
    let summary = report.summary();
    write_text(&dir.join("summary.txt"), &summary)?;
    let files = ["report.tsv", "report.json", "summary.txt"]
        .map(String::from)
        .to_vec();
    let seed = bench.seeds.first().copied().unwrap_or_default();
    Manifest::new("benchmark", seed, &config, files).write(&dir)?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}
