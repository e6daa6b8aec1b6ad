use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use forge_core::pipeline::{Bundle, RunStatus};
use forge_core::{DatasetManifest, PipelineConfig};

/// Exit status for a run that completed with fewer synthetic triplets than requested.
const SHORTFALL_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "forge", version, about = "Counterfactual triplet synthesis for composed image retrieval")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults to the bundled toy-e2e config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bundle directory for all artifacts.
    #[arg(long, global = true, default_value = "forge-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption the source images.
    Caption,
    /// Plan counterfactual edits of the captions.
    Perturb,
    /// Generate target images for the planned edits.
    Generate,
    /// Caption, perturb and generate, replacing failed items.
    Synth,
    /// Print dataset statistics of the bundle's manifests, or of one manifest file.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train both arms (without and with synthetic triplets).
    Train,
    /// Evaluate both arms and write the result tables.
    Eval,
    /// Train and evaluate over the configured training fractions.
    Ablate,
    /// Run every configured stage.
    Run,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::toy_e2e(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
        config.validate()?;
    }
    Ok(config)
}

fn print_stats(name: &str, manifest: &DatasetManifest) -> Result<()> {
    println!("{name}\n{}\n", manifest.stats()?);
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Command::Stats { manifest: Some(path) } = &cli.command {
        let manifest = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
        print_stats(&path.display().to_string(), &manifest)?;
        return Ok(ExitCode::SUCCESS);
    }
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    let mut bundle = Bundle::new(config, &cli.out)?;
    match cli.command {
        Command::Caption => {
            let captions = bundle.caption_stage()?;
            println!("captioned {} images", captions.len());
        }
        Command::Perturb => {
            let plan = bundle.perturb_stage()?;
            println!("planned {} edits", plan.len());
        }
        Command::Generate => {
            let manifest = bundle.generate_stage()?;
            println!("generated {} synthetic triplets", manifest.triplets.len());
        }
        Command::Synth => {
            let manifest = bundle.synth_stage()?;
            println!("synthesized {} triplets", manifest.triplets.len());
            if let Some(s) = bundle.stats()?.get(forge_core::pipeline::SYNTHETIC_MANIFEST) {
                println!("{s}");
            }
        }
        Command::Stats { .. } => {
            let stats = bundle.stats()?;
            if stats.is_empty() {
                anyhow::bail!("no manifests in {} yet", cli.out.display());
            }
            for (name, table) in stats {
                println!("{name}\n{table}\n");
            }
        }
        Command::Train => {
            for arm in bundle.train_stage()?.keys() {
                println!("trained {arm}: {}", bundle.checkpoint_path(*arm).display());
            }
        }
        Command::Eval => {
            bundle.eval_stage()?;
            let table = std::fs::read_to_string(bundle.path(forge_core::pipeline::RESULTS_TABLE))?;
            print!("{table}");
        }
        Command::Ablate => {
            print!("{}", bundle.ablation_stage()?.to_csv()?);
        }
        Command::Run => {
            let summary = bundle.run()?;
            println!("{}: {:?}, stages {}", summary.name, summary.status, summary.stages.join(" > "));
            for (key, value) in &summary.counts {
                println!("  {key}: {value}");
            }
            let table = bundle.path(forge_core::pipeline::RESULTS_TABLE);
            if let Ok(text) = std::fs::read_to_string(table) {
                print!("{text}");
            }
            if summary.status != RunStatus::Complete {
                return Ok(ExitCode::FAILURE);
            }
            if let Some(s) = summary.shortfall {
                eprintln!("shortfall: produced {} of {} synthetic triplets", s.produced, s.requested);
                return Ok(ExitCode::from(SHORTFALL_EXIT));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
