// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ffnprobe_cli::pipeline::{self, Outcome};
use ffnprobe_cli::spec::{parse_stages, ExperimentSpec, Stage};
use ffnprobe_cli::tune_allocator;
use ffnprobe_core::nn::Precision;

/// Train single-layer patch forecasters, fit sparse autoencoders on their
/// post-GELU activations and run the probe battery.
#[derive(Parser)]
#[command(name = "ffnprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the forecaster of each cell.
    Train(GridArgs),
    /// Harvest post-GELU activations from trained forecasters.
    Harvest(GridArgs),
    /// Train the SAEs at every dictionary scale.
    Sae(GridArgs),
    /// Substitution, dead-latent, causal and zero-ablation probes.
    Probe(GridArgs),
    /// Sparsity-penalty sweep.
    Sweep(GridArgs),
    /// Render tables and the completeness manifest from existing reports.
    Report(GridArgs),
    /// Run several stages in dependency order.
    Run {
        #[command(flatten)]
        grid: GridArgs,
        /// `all` or a comma-separated list of train,harvest,sae,probe,sweep,report.
        #[arg(long, default_value = "all")]
        stages: String,
    },
}

#[derive(Args, Clone)]
struct GridArgs {
    /// JSON experiment spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Dataset names, comma separated.
    #[arg(long, value_delimiter = ',')]
    dataset: Vec<String>,
    /// Forecast horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,
    /// Dictionary scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    scale: Vec<f64>,
    /// L1 penalty of the main SAEs.
    #[arg(long)]
    lambda: Option<f64>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset registry JSON (defaults to the built-in benchmark registry).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Dataset directory (defaults to $FFNPROBE_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Worker threads over grid cells; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    /// Maximum forecaster epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Maximum SAE epochs.
    #[arg(long)]
    sae_max_epochs: Option<usize>,
    /// Activation rows kept per harvest.
    #[arg(long)]
    harvest_cap: Option<usize>,
    /// Print per-epoch progress.
    #[arg(long)]
    verbose: bool,
}

impl GridArgs {
    fn resolve(&self, stages: Vec<Stage>) -> Result<ExperimentSpec> {
        let mut s = match &self.spec {
            Some(p) => ExperimentSpec::from_file(p)?,
            None => ExperimentSpec::default(),
        };
        if !self.dataset.is_empty() {
            s.datasets = self.dataset.clone();
        }
        if !self.horizon.is_empty() {
            s.horizons = self.horizon.clone();
        }
        if !self.scale.is_empty() {
            s.scales = self.scale.clone();
        }
        if !self.seed.is_empty() {
            s.seeds = self.seed.clone();
        }
        s.lambda = self.lambda.unwrap_or(s.lambda);
        s.out = self.out.clone().unwrap_or(s.out);
        s.registry = self.registry.clone().or(s.registry);
        s.data_dir = self.data_dir.clone().or(s.data_dir);
        s.jobs = self.jobs.unwrap_or(s.jobs);
        s.precision = self.precision.unwrap_or(s.precision);
        s.train.max_epochs = self.max_epochs.unwrap_or(s.train.max_epochs);
        s.sae.max_epochs = self.sae_max_epochs.unwrap_or(s.sae.max_epochs);
        s.harvest_cap = self.harvest_cap.unwrap_or(s.harvest_cap);
        s.verbose |= self.verbose;
        s.stages = stages;
        Ok(s)
    }
}

fn execute(cli: Cli) -> Result<bool> {
    let (grid, stages) = match cli.command {
        Command::Train(g) => (g, vec![Stage::Train]),
        Command::Harvest(g) => (g, vec![Stage::Harvest]),
        Command::Sae(g) => (g, vec![Stage::Sae]),
        Command::Probe(g) => (g, vec![Stage::Probe]),
        Command::Sweep(g) => (g, vec![Stage::Sweep]),
        Command::Report(g) => (g, vec![Stage::Report]),
        Command::Run { grid, stages } => (grid, parse_stages(&stages)?),
    };
    let spec = grid.resolve(stages)?;
    let summary = pipeline::run(&spec)?;
    for (key, log) in &summary.cells {
        let stages: Vec<String> = log
            .iter()
            .map(|(s, o)| format!("{s}:{}", if *o == Outcome::Ran { "ran" } else { "skipped" }))
            .collect();
        println!("{} H{} seed {}: {}", key.dataset, key.horizon, key.seed, stages.join(" "));
    }
    if let Some(m) = &summary.manifest {
        println!(
            "tables written to {} ({} cells present, {} absent, {} incomplete)",
            spec.out.join("tables").display(),
            m.present.len(),
            m.absent.len(),
            m.incomplete.len()
        );
    }
    for (key, err) in &summary.failures {
        eprintln!("error: {} H{} seed {}: {err:#}", key.dataset, key.horizon, key.seed);
    }
    Ok(summary.ok())
}

fn main() -> ExitCode {
    tune_allocator();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
