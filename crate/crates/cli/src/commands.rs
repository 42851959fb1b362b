//! Subcommand bodies. Every command writes into its output directory and
//! leaves the fully resolved configuration beside its outputs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use compmap::config::RunConfig;
use compmap::estimator::{self, PosteriorSamples};
use compmap::io::{
    file_checksum, read_cell_counts, read_samples, read_townships, write_cell_counts, write_raster,
    write_samples, write_summary_csv, write_townships, SampleArchive, SummaryField,
};
use compmap::model::{CellCounts, Dataset, TaxonRegistry};
use compmap::sampler::{ChainOutput, RunOptions, Sampler, SamplerConfig};
use compmap::scoring::{run_holdout_experiment, ScoreReport};
use compmap::simulate::{simulate as simulate_data, write_truth, SimulatedData};
use compmap::{Error, Result};
use log::info;
use serde_json::json;

use crate::ConfigArgs;

const RESOLVED: &str = "config.resolved";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Loads the config file (if any) and applies the overrides in order.
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let path = fs::canonicalize(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::load(&path)?
        }
        None => {
            let cwd = std::env::current_dir().map_err(io_err(Path::new(".")))?;
            RunConfig::parse("", &cwd)?
        }
    };
    for kv in &args.overrides {
        cfg.apply_override(kv).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(format!("--set {kv}: {other}")),
        })?;
    }
    Ok(cfg)
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let given = cfg.taxa.clone().map(TaxonRegistry::new).transpose()?;
    let (taxa, counts) = match &cfg.counts {
        Some(path) => read_cell_counts(path, &cfg.grid, given.as_ref())?,
        None => {
            let taxa = given.ok_or_else(|| Error::Config("set either counts or taxa".into()))?;
            let p = taxa.len();
            (taxa, CellCounts::new(Vec::new(), p)?)
        }
    };
    let townships = match (&cfg.township_trees, &cfg.township_overlaps) {
        (Some(trees), Some(overlaps)) => read_townships(trees, overlaps, &cfg.grid, &taxa)?,
        _ => Vec::new(),
    };
    let dataset = Dataset {
        taxa,
        counts,
        townships,
    };
    dataset.validate(cfg.grid.n_data_cells())?;
    Ok(dataset)
}

/// Writes a simulated dataset and points `cfg` at the written files.
fn write_simulated(data: &SimulatedData, cfg: &mut RunConfig, out: &Path) -> Result<()> {
    let out = fs::canonicalize(out).map_err(io_err(out))?;
    let counts = out.join("counts.csv");
    write_cell_counts(&counts, &data.grid, &data.dataset.taxa, &data.dataset.counts)?;
    cfg.counts = Some(counts);
    if data.dataset.townships.is_empty() {
        cfg.township_trees = None;
        cfg.township_overlaps = None;
    } else {
        let (trees, overlaps) = (out.join("township_trees.csv"), out.join("township_overlaps.csv"));
        write_townships(&trees, &overlaps, &data.grid, &data.dataset.taxa, &data.dataset.townships)?;
        cfg.township_trees = Some(trees);
        cfg.township_overlaps = Some(overlaps);
    }
    cfg.taxa = Some(data.dataset.taxa.names().to_vec());
    write_truth(data, &out.join("truth.csv"))
}

pub fn simulate(args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut cfg = resolve(args)?;
    cfg.validate(false)?;
    prepare_dir(out)?;
    let data = simulate_data(&cfg)?;
    write_simulated(&data, &mut cfg, out)?;
    write_text(&out.join(RESOLVED), &cfg.to_text())?;
    println!(
        "simulated {} taxa on {}x{} cells: {} gridded cells, {} townships, {} trees",
        data.dataset.n_taxa(),
        cfg.grid.nx,
        cfg.grid.ny,
        data.dataset.counts.cells.len(),
        data.dataset.townships.len(),
        data.dataset.total_trees()
    );
    Ok(())
}

/// Archive, retained hyperparameters and diagnostics of one chain.
fn write_chain_outputs(output: &ChainOutput, cfg: &SamplerConfig, out: &Path, suffix: &str) -> Result<PathBuf> {
    let archive_path = out.join(format!("samples{suffix}.bin"));
    write_samples(&SampleArchive::from_samples(&output.samples, cfg.seed, &cfg.model), &archive_path)?;

    if let Some(alpha) = &output.alpha_samples {
        let s = &output.samples;
        let draws = PosteriorSamples::new(s.grid.clone(), s.taxa.clone(), s.t_mc, alpha.clone())?;
        let mut archive = SampleArchive::from_samples(&draws, cfg.seed, &cfg.model);
        archive.header.quantity = "alpha".into();
        write_samples(&archive, &out.join(format!("alpha{suffix}.bin")))?;
    }

    let hyper_path = out.join(format!("hyper{suffix}.csv"));
    let mut w = BufWriter::new(File::create(&hyper_path).map_err(io_err(&hyper_path))?);
    let p = output.samples.n_taxa();
    let write_rows = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "sample,taxon,sigma,rho,mu")?;
        for (i, h) in output.retained_hyper.iter().enumerate() {
            let name = output.samples.taxa.name(i % p);
            writeln!(w, "{},{name},{},{},{}", i / p, h.log_sigma.exp(), h.log_rho.exp(), h.mu)?;
        }
        w.flush()
    };
    write_rows(&mut w).map_err(io_err(&hyper_path))?;

    write_json(&out.join(format!("diagnostics{suffix}.json")), &output.diagnostics)?;
    Ok(archive_path)
}

pub fn fit(args: &ConfigArgs, out: &Path, resume: bool, threads: usize) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.validate(true)?;
    let dataset = load_dataset(&cfg)?;
    prepare_dir(out)?;
    write_text(&out.join(RESOLVED), &cfg.to_text())?;

    let sampler = Sampler::new(&dataset, &cfg.grid, &cfg.sampler)?;
    let checkpoint = out.join("checkpoint.bin");
    let state = if resume {
        let s = sampler.load_checkpoint(&checkpoint)?;
        info!("resuming from iteration {}", s.iteration);
        s
    } else {
        sampler.initial_state()?
    };
    let progress_path = out.join("progress.jsonl");
    let mut progress = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume)
            .truncate(!resume)
            .open(&progress_path)
            .map_err(io_err(&progress_path))?,
    );
    let options = RunOptions {
        checkpoint: (cfg.checkpoint_every > 0).then(|| (checkpoint.clone(), cfg.checkpoint_every)),
        progress: Some((&mut progress, cfg.progress_every)),
    };
    let output = sampler.run(state, options)?;
    progress.flush().map_err(io_err(&progress_path))?;

    let archive = write_chain_outputs(&output, &cfg.sampler, out, "")?;
    let checksum = file_checksum(&archive)?;
    write_json(
        &out.join("run.json"),
        &json!({
            "software": concat!("compmap ", env!("CARGO_PKG_VERSION")),
            "command": std::env::args().collect::<Vec<_>>(),
            "threads": threads,
            "seed": cfg.sampler.seed,
            "model": cfg.sampler.model,
            "samples_sha256": checksum,
        }),
    )?;
    let d = &output.diagnostics;
    println!(
        "{} fit: {} iterations, {} retained samples, min theta ESS {}",
        d.model,
        d.iterations,
        output.samples.n_samples,
        d.theta_ess_min.map_or("n/a".into(), |v| format!("{v:.1}"))
    );
    println!("samples: {} (sha256 {checksum})", archive.display());
    Ok(())
}

fn file_stem_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn summarize(archive: &Path, out: &Path, rasters: bool) -> Result<()> {
    let samples = read_samples(archive)?.to_samples()?;
    let summary = estimator::summarize(&samples)?;
    prepare_dir(out)?;
    write_summary_csv(&summary, &out.join("summary.csv"))?;
    if rasters {
        let dir = out.join("rasters");
        prepare_dir(&dir)?;
        for q in 0..summary.taxa.len() {
            let stem = file_stem_safe(summary.taxa.name(q));
            for field in SummaryField::ALL {
                write_raster(&summary, q, field, &dir.join(format!("{stem}_{}.asc", field.name())))?;
            }
        }
    }
    println!(
        "summarised {} samples over {} cells and {} taxa",
        samples.n_samples,
        samples.n_cells(),
        samples.n_taxa()
    );
    Ok(())
}

pub fn score(archives: &[PathBuf], heldout: &Path, per_tree: bool, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.validate(false)?;
    let loaded = archives
        .iter()
        .map(|a| {
            let archive = read_samples(a)?;
            Ok((archive.header.model.clone(), archive.to_samples()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &loaded[0].1;
    let (_, counts) = read_cell_counts(heldout, &first.grid, Some(&first.taxa))?;
    let models: Vec<(&str, &PosteriorSamples)> = loaded.iter().map(|(m, s)| (m.as_str(), s)).collect();
    let design = format!(
        "external {} from {}",
        if per_tree { "held-out trees" } else { "held-out cells" },
        heldout.display()
    );
    let report = ScoreReport::compute(&counts, &models, !per_tree, &cfg.holdout, &design)?;
    prepare_dir(out)?;
    write_text(&out.join(RESOLVED), &cfg.to_text())?;
    write_report(&report, out)
}

fn write_report(report: &ScoreReport, out: &Path) -> Result<()> {
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    write_text(&out.join("report.csv"), &report.to_delimited())?;
    write_json(&out.join("report.json"), report)?;
    print!("{text}");
    Ok(())
}

pub fn holdout(args: &ConfigArgs, out: &Path, threads: usize) -> Result<()> {
    let mut cfg = resolve(args)?;
    cfg.validate(true)?;
    let models = &cfg.holdout.models;
    if (1..models.len()).any(|i| models[..i].contains(&models[i])) {
        return Err(Error::Config("compare_models lists a model twice".into()));
    }
    prepare_dir(out)?;
    let dataset = if cfg.counts.is_none() && cfg.township_trees.is_none() {
        info!("no input data configured; simulating from the sim_* settings");
        let data = simulate_data(&cfg)?;
        write_simulated(&data, &mut cfg, out)?;
        data.dataset
    } else {
        load_dataset(&cfg)?
    };
    write_text(&out.join(RESOLVED), &cfg.to_text())?;

    let configs: Vec<SamplerConfig> = cfg
        .holdout
        .models
        .iter()
        .map(|m| SamplerConfig {
            model: m.clone(),
            ..cfg.sampler.clone()
        })
        .collect();
    let outcome = run_holdout_experiment(&dataset, &cfg.grid, &cfg.holdout, &configs)?;
    write_cell_counts(&out.join("heldout.csv"), &cfg.grid, &dataset.taxa, &outcome.split.heldout)?;
    write_cell_counts(
        &out.join("training.csv"),
        &cfg.grid,
        &dataset.taxa,
        &outcome.split.training.counts,
    )?;
    let mut checksums = serde_json::Map::new();
    for (c, fit) in configs.iter().zip(&outcome.fits) {
        let path = write_chain_outputs(fit, c, out, &format!("_{}", file_stem_safe(&c.model)))?;
        checksums.insert(c.model.clone(), file_checksum(&path)?.into());
    }
    write_json(
        &out.join("run.json"),
        &json!({
            "software": concat!("compmap ", env!("CARGO_PKG_VERSION")),
            "command": std::env::args().collect::<Vec<_>>(),
            "threads": threads,
            "seed": cfg.sampler.seed,
            "holdout_seed": cfg.holdout.seed,
            "samples_sha256": checksums,
        }),
    )?;
    write_report(&outcome.report, out)
}

pub fn validate_config(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.validate(true)?;
    print!("{}", cfg.to_text());
    Ok(())
}
