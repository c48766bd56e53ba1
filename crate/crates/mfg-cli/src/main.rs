//! Experiment runner: binds scenarios, solvers and exports.
//!
//! `mfg --scenario bankrun --stage both --out out/` runs the full pipeline
//! with the shipped defaults. A TOML or JSON config (or a previously written
//! `manifest.json`) overrides them; rerunning a manifest reproduces every
//! numeric output byte for byte.

use clap::Parser;
use mfg_core::experiment::{self, ExperimentConfig, RunOptions, Stage};
use mfg_core::MfgError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Mean field game solver with absorption and common noise")]
struct Args {
    /// Scenario preset used when no config file is given.
    #[arg(long, default_value = "bankrun")]
    scenario: String,

    /// Config file (.toml or .json), or a manifest.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Pipeline stage to execute.
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = sequential).
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Also dump a per-atom sample of controlled paths to paths.csv.
    #[arg(long)]
    dump_paths: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Equilibrium,
    Gap,
    Both,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Equilibrium => Stage::Equilibrium,
            StageArg::Gap => Stage::Gap,
            StageArg::Both => Stage::Both,
        }
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, String> {
    let mut cfg = match &args.config {
        None => {
            if args.scenario != "bankrun" {
                return Err(format!(
                    "unknown scenario `{}`; available: bankrun",
                    args.scenario
                ));
            }
            ExperimentConfig::default()
        }
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            if let Some(from_manifest) = experiment::config_from_manifest_json(&text) {
                from_manifest
            } else if path.extension().map(|e| e == "json").unwrap_or(false) {
                serde_json::from_str(&text).map_err(|e| format!("invalid JSON config: {e}"))?
            } else {
                toml::from_str(&text).map_err(|e| format!("invalid TOML config: {e}"))?
            }
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(workers) = args.workers {
        if workers == 0 {
            mfg_core::parallel::set_sequential_override(true);
        } else {
            #[cfg(feature = "parallel")]
            {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build_global()
                {
                    eprintln!("warning: cannot size thread pool: {e}");
                }
            }
            #[cfg(not(feature = "parallel"))]
            eprintln!("warning: built without the parallel feature; --workers ignored");
        }
    }
    let cfg = match load_config(&args) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match experiment::run(&cfg, args.stage.into(), &args.out, &RunOptions {
        dump_paths: args.dump_paths,
    }) {
        Ok(manifest) => {
            println!(
                "scenario {} seed {} -> {} atoms, {} files in {}",
                manifest.scenario,
                manifest.seed,
                manifest.atoms,
                manifest.outputs.len() + 2,
                args.out.display()
            );
            if let (Some(residual), Some(tol), Some(converged)) =
                (manifest.final_residual, manifest.tol, manifest.converged)
            {
                println!(
                    "equilibrium: residual {residual:.6} vs tol {tol:.6} ({})",
                    if converged { "converged" } else { "NOT converged" }
                );
            }
            ExitCode::SUCCESS
        }
        Err(MfgError::Validation { field, message }) => {
            eprintln!("invalid configuration at `{field}`: {message}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
