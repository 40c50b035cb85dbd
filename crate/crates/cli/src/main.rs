use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sgl_core::experiment::{run, ExperimentConfig, Manifest, RunOptions, Scale, RECIPES};
use sgl_core::Error;

/// Trains split-depth networks on dual-factor data and writes CSV results,
/// decision-boundary panels and a reproducibility manifest.
#[derive(Debug, Parser)]
#[command(name = "sgl", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with_all = ["recipe", "manifest"])]
    config: Option<PathBuf>,

    /// Built-in recipe name.
    #[arg(long, conflicts_with = "manifest")]
    recipe: Option<String>,

    /// Rerun exactly what an earlier manifest describes.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Comma-separated shared depths, overriding the config.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,

    #[arg(long, value_parser = ["paper", "desk"], default_value = "desk")]
    scale: String,

    #[arg(long, default_value_t = 1)]
    threads: usize,

    /// Base directory for relative dataset paths.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,

    /// Print the built-in recipe names and exit.
    #[arg(long)]
    list_recipes: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILED_CELL: u8 = 3;

fn load(args: &Args) -> Result<(ExperimentConfig, RunOptions), Error> {
    let scale: Scale = args.scale.parse()?;
    let mut opts = RunOptions::new(&args.out);
    opts.data_dir = args.data_dir.clone();
    opts.threads = args.threads;
    let mut cfg = match (&args.config, &args.recipe, &args.manifest) {
        (Some(path), None, None) => {
            opts.origin = path.display().to_string();
            ExperimentConfig::load(path, scale)?
        }
        (None, Some(name), None) => {
            opts.origin = name.clone();
            ExperimentConfig::recipe(name, scale)?
        }
        (None, None, Some(path)) => {
            let m = Manifest::read(path)?;
            opts.origin = m.get("origin").unwrap_or_default().to_string();
            opts.expected_checksums = Some(m.checksums());
            m.config()?
        }
        _ => {
            return Err(Error::Config(
                "give exactly one of --config, --recipe or --manifest".into(),
            ))
        }
    };
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(depths) = &args.depths {
        cfg.depths = Some(depths.clone());
    }
    cfg.validate()?;
    Ok((cfg, opts))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_recipes {
        for (name, _) in RECIPES {
            println!("{name}");
        }
        return ExitCode::SUCCESS;
    }
    let (cfg, opts) = match load(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(&cfg, &opts) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.failed_cells > 0 {
                eprintln!("{} cell(s) failed; see the CSV rows", report.failed_cells);
                return ExitCode::from(EXIT_FAILED_CELL);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
