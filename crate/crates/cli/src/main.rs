use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compmap::ErrorCategory;

mod commands;

/// Bayesian spatial composition maps from gridded and township tree counts.
#[derive(Debug, Parser)]
#[command(name = "compmap", version, about)]
struct Cli {
    /// Worker threads (default: available parallelism). Runs are
    /// bit-reproducible at a fixed thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Config file plus left-to-right `key=value` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (`key = value` lines).
    #[arg(short, long)]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable, applied in order.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset (counts, townships, truth) from the model.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit the model and write posterior composition samples.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Per-cell posterior summaries and rasters from a sample archive.
    Summarize {
        #[arg(short, long)]
        archive: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write one ESRI ASCII raster per taxon and statistic.
        #[arg(long)]
        rasters: bool,
    },
    /// Score one or two sample archives against held-out counts.
    Score {
        /// Sample archive; give twice to compare two models.
        #[arg(short, long, required = true, num_args = 1)]
        archive: Vec<PathBuf>,
        /// Held-out counts in the cell-count format.
        #[arg(long)]
        heldout: PathBuf,
        /// Held-out trees are individual trees from partially observed
        /// cells: skip the full-cell metrics and intervals.
        #[arg(long)]
        per_tree: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Split, fit every compared model on the training part and score.
    Holdout {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check a configuration and print it fully resolved.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let threads = rayon::current_num_threads();

    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Fit { config, out, resume } => commands::fit(&config, &out, resume, threads),
        Command::Summarize { archive, out, rasters } => commands::summarize(&archive, &out, rasters),
        Command::Score {
            archive,
            heldout,
            per_tree,
            config,
            out,
        } => commands::score(&archive, &heldout, per_tree, &config, &out),
        Command::Holdout { config, out } => commands::holdout(&config, &out, threads),
        Command::ValidateConfig { config } => commands::validate_config(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}
