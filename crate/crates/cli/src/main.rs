//! `cfdebias` command-line entry point.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{CorpusKind, ExperimentData, Global};

/// Counterfactual adversarial debiasing: data preparation, training and
/// evaluation runs with checksummed manifests.
#[derive(Parser)]
#[command(name = "cfdebias", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config document; keys mirror the library config structs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `<out-root>/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, global = true, env = "CFDEBIAS_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Config override, e.g. `--set lr=3e-4`; later overrides win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Dataset directory with `train` (and optionally `ood`) splits.
    #[arg(long, required_unless_present_any = ["synth", "synth_config"], conflicts_with_all = ["synth", "synth_config"])]
    data: Option<PathBuf>,
    /// Dataset directory providing the `ood` split.
    #[arg(long, requires = "data")]
    ood: Option<PathBuf>,
    /// Regenerate synthetic data per seed with the generator defaults.
    #[arg(long)]
    synth: bool,
    /// Regenerate synthetic data per seed from this generator config.
    #[arg(long, value_name = "PATH")]
    synth_config: Option<PathBuf>,
    /// Comma-separated seeds (default 0,1,2,3,4).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl ExperimentArgs {
    fn data(&self) -> ExperimentData {
        match &self.data {
            Some(d) => ExperimentData::Files { data: d.clone(), ood: self.ood.clone() },
            None => ExperimentData::Synthetic(self.synth_config.clone()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a confounded synthetic dataset (train and ood splits).
    SynthGen,
    /// Extract standardized cycles from a raw corpus and print the class summary.
    PrepareData {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long)]
        input: PathBuf,
        /// Cycle length in seconds.
        #[arg(long, default_value_t = cfdebias::dataio::CYCLE_DURATION_S)]
        duration: f64,
        #[arg(long, default_value_t = cfdebias::dataio::TARGET_SAMPLE_RATE)]
        sample_rate: u32,
    },
    /// Train one model per seed and report mean and variance.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Comma-separated seeds (default: the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Score a checkpoint on one dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ood")]
        split: String,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Restrict to validation-tagged cycles.
        #[arg(long)]
        valid_only: bool,
    },
    /// Score a checkpoint at α = 0.0, 0.1, …, 1.0 on each split.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Splits to sweep (default: every split in the dataset).
        #[arg(long = "split")]
        splits: Vec<String>,
        #[arg(long)]
        valid_only: bool,
    },
    /// Component ablation over seeds.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Also run the variant without any debiasing component.
        #[arg(long)]
        baseline: bool,
    },
    /// Compare adversarially debiased attribute sets over seeds.
    CompareAttrs {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::PrepareData { .. } => "prepare-data",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::SweepAlpha { .. } => "sweep-alpha",
            Command::Ablate { .. } => "ablate",
            Command::CompareAttrs { .. } => "compare-attrs",
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let a = cli.global;
    let level = if a.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let g = Global {
        config: a.config,
        out: a.out.unwrap_or_else(|| a.out_root.join(cli.command.name())),
        seed: a.seed,
        force: a.force,
        quiet: a.quiet,
        overrides: a.overrides,
    };
    match &cli.command {
        Command::SynthGen => commands::synth_gen(&g),
        Command::PrepareData { kind, input, duration, sample_rate } => {
            commands::prepare_data(&g, *kind, input, *duration, *sample_rate)
        }
        Command::Train { data, ood, seeds } => commands::train(&g, data, ood.as_deref(), seeds),
        Command::Evaluate { checkpoint, data, split, alpha, valid_only } => {
            commands::evaluate_cmd(&g, checkpoint, data, split, *alpha, *valid_only)
        }
        Command::SweepAlpha { checkpoint, data, splits, valid_only } => {
            commands::sweep_alpha_cmd(&g, checkpoint, data, splits, *valid_only)
        }
        Command::Ablate { exp, baseline } => commands::ablate(&g, &exp.data(), &exp.seeds, *baseline),
        Command::CompareAttrs { exp } => commands::compare_attrs(&g, &exp.data(), &exp.seeds),
    }
}
