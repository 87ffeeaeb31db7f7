//! Subcommand bodies. Each one delegates to the library, writes its outputs
//! through a [`RunDir`] and finishes by verifying the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfdebias::dataio::{
    icbhi, read_dataset, sprsound, write_dataset, ClassSummary, LabeledCycle, Resampler, Split, SynthConfig,
    MANIFEST_FILE,
};
use cfdebias::evaluation::{
    comparison_attribute_sets, default_alphas, evaluate, run_ablation, run_attribute_comparison, sweep_alpha,
    DataSource, DatasetPair, ExperimentTable, Metrics, MetricsReport,
};
use cfdebias::model::ModelBundle;
use cfdebias::training::{prepare_examples, train_from_cycles, write_run_dir, TrainConfig};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{decode, load_table, set};
use crate::manifest::{checksum_inputs, RunDir};

/// Flags shared by every subcommand.
pub struct Global {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub force: bool,
    pub quiet: bool,
    pub overrides: Vec<String>,
}

impl Global {
    fn table(&self) -> Result<toml::Table> {
        let mut t = load_table(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            set(&mut t, "seed", toml::Value::Integer(seed as i64))?;
        }
        Ok(t)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let cfg: TrainConfig = decode(self.table()?, "training config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn inputs(&self, paths: &[&Path]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for p in self.config.iter().map(PathBuf::as_path).chain(paths.iter().copied()) {
            out.extend(checksum_inputs(p)?);
        }
        Ok(out)
    }

    fn print(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Icbhi,
    Sprsound,
}

pub fn synth_gen(g: &Global) -> Result<()> {
    let cfg: SynthConfig = decode(g.table()?, "synthetic data config")?;
    let (train, ood) = cfdebias::dataio::generate_synthetic(&cfg)?;
    let mut run = RunDir::create(&g.out, g.force)?;
    let manifest =
        write_dataset(run.path(), "synthetic", serde_json::to_value(&cfg)?, &[("train", &train), ("ood", &ood)])?;
    let mut files: Vec<String> = manifest.files.keys().cloned().collect();
    files.push(MANIFEST_FILE.to_string());
    run.record_existing("", &files)?;
    for (name, cycles) in [("train", &train), ("ood", &ood)] {
        g.print(&format!("[{name}]\n{}", ClassSummary::from_labels(cycles.iter().map(|c| c.label)).to_table()));
    }
    run.finish("synth-gen", serde_json::to_value(&cfg)?, vec![cfg.seed], g.inputs(&[])?)?;
    info!("wrote {}", g.out.display());
    Ok(())
}

pub fn prepare_data(g: &Global, kind: CorpusKind, input: &Path, duration_s: f64, sample_rate: u32) -> Result<()> {
    if !input.is_dir() {
        bail!("input directory {} does not exist", input.display());
    }
    let sr = sample_rate as f64;
    let (cycles, split) = match kind {
        CorpusKind::Icbhi => {
            let (cycles, warnings) = icbhi::load_corpus(input, duration_s, sr, Resampler::Linear)?;
            for w in warnings {
                warn!("{w}");
            }
            (cycles, "train")
        }
        CorpusKind::Sprsound => (sprsound::load_corpus(input, duration_s, sr, Resampler::Linear)?, "ood"),
    };
    if cycles.is_empty() {
        bail!("no respiratory cycles found in {}", input.display());
    }
    let echo = serde_json::json!({ "kind": kind, "duration_s": duration_s, "sample_rate": sample_rate });
    let summary = ClassSummary::from_labels(cycles.iter().map(|c| c.label));
    let mut run = RunDir::create(&g.out, g.force)?;
    let manifest = write_dataset(run.path(), kind_name(kind), echo.clone(), &[(split, &cycles)])?;
    let mut files: Vec<String> = manifest.files.keys().cloned().collect();
    files.push(MANIFEST_FILE.to_string());
    run.record_existing("", &files)?;
    let table = summary.to_table();
    run.write("summary.tsv", table.as_bytes())?;
    g.print(&table);
    run.finish("prepare-data", echo, Vec::new(), g.inputs(&[input])?)?;
    Ok(())
}

fn kind_name(kind: CorpusKind) -> &'static str {
    match kind {
        CorpusKind::Icbhi => "icbhi",
        CorpusKind::Sprsound => "sprsound",
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<LabeledCycle>> {
    let (manifest, mut splits) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    splits.remove(split).with_context(|| {
        format!("dataset {} has no split `{split}` (available: {})", dir.display(), manifest.splits.join(", "))
    })
}

/// In-distribution cycles from the `train` split of `data`; shifted cycles
/// from the `ood` split of `ood` (or of `data` when absent).
fn load_pair(data: &Path, ood: Option<&Path>) -> Result<DatasetPair> {
    Ok(DatasetPair { id: load_split(data, "train")?, ood: load_split(ood.unwrap_or(data), "ood")? })
}

/// Aggregate of a multi-seed training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub best_epochs: Vec<usize>,
    pub valid: MetricsReport,
    pub ood: Option<MetricsReport>,
}

impl TrainReport {
    fn to_tsv(&self) -> String {
        let mut out = String::from("split\tsp_mean\tsp_var\tse_mean\tse_var\tscore_mean\tscore_var\n");
        for (name, rep) in std::iter::once(("valid", &self.valid)).chain(self.ood.as_ref().map(|r| ("ood", r))) {
            out.push_str(name);
            for s in [rep.sp, rep.se, rep.score] {
                out.push_str(&format!("\t{:.2}\t{:.2}", s.mean, s.variance));
            }
            out.push('\n');
        }
        out
    }
}

pub fn train(g: &Global, data: &Path, ood: Option<&Path>, seeds: &[u64]) -> Result<()> {
    let base = g.train_config()?;
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let id = load_split(data, "train")?;
    let ood_cycles = match ood {
        Some(p) => Some(load_split(p, "ood")?),
        None => load_split(data, "ood").ok(),
    };
    let valid: Vec<LabeledCycle> = id.iter().filter(|c| c.source_split == Split::Valid).cloned().collect();
    if valid.is_empty() {
        bail!("the train split of {} has no validation-tagged cycles", data.display());
    }
    let mut run = RunDir::create(&g.out, g.force)?;
    let alpha = base.selection_alpha;
    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            let outcome = train_from_cycles(&id, &cfg)?;
            let v = evaluate(&outcome.best, &valid, alpha)?.metrics;
            let o = ood_cycles.as_ref().map(|c| evaluate(&outcome.best, c, alpha)).transpose()?.map(|r| r.metrics);
            Ok((cfg, outcome, v, o))
        })
        .collect::<Result<Vec<_>, cfdebias::Error>>()?;
    let mut valid_runs = Vec::new();
    let mut ood_runs: Vec<Metrics> = Vec::new();
    let mut best_epochs = Vec::new();
    for (cfg, outcome, v, o) in &outcomes {
        let rel = format!("seed-{}", cfg.seed);
        let files = write_run_dir(&run.path().join(&rel), cfg, outcome)?;
        run.record_existing(&rel, &files)?;
        valid_runs.push(*v);
        ood_runs.extend(o);
        best_epochs.push(outcome.state.best_epoch);
        info!("seed {}: best epoch {}, valid score {:.2}", cfg.seed, outcome.state.best_epoch, v.score);
    }
    let report = TrainReport {
        alpha,
        seeds: seeds.clone(),
        best_epochs,
        valid: MetricsReport::from_runs(valid_runs)?,
        ood: if ood_runs.is_empty() { None } else { Some(MetricsReport::from_runs(ood_runs)?) },
    };
    run.write_json("report.json", &report)?;
    let tsv = report.to_tsv();
    run.write("report.tsv", tsv.as_bytes())?;
    g.print(&tsv);
    let inputs = g.inputs(&[data].into_iter().chain(ood).collect::<Vec<_>>())?;
    run.finish("train", serde_json::to_value(&base)?, seeds, inputs)?;
    Ok(())
}

fn load_checked(checkpoint: &Path, cycles: &[LabeledCycle]) -> Result<ModelBundle> {
    let bundle =
        ModelBundle::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if let Some(c) = cycles.first() {
        if c.signal.len() != bundle.config.feature_dim {
            bail!(
                "checkpoint expects feature vectors of shape [{}], dataset provides shape [{}]",
                bundle.config.feature_dim,
                c.signal.len()
            );
        }
    }
    Ok(bundle)
}

fn select(cycles: Vec<LabeledCycle>, valid_only: bool) -> Vec<LabeledCycle> {
    if valid_only {
        cycles.into_iter().filter(|c| c.source_split == Split::Valid).collect()
    } else {
        cycles
    }
}

pub fn evaluate_cmd(
    g: &Global,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    alpha: f64,
    valid_only: bool,
) -> Result<()> {
    let cycles = select(load_split(data, split)?, valid_only);
    let bundle = load_checked(checkpoint, &cycles)?;
    let result = evaluate(&bundle, &cycles, alpha)?;
    let report = MetricsReport::from_runs(vec![result.metrics])?;
    let mut run = RunDir::create(&g.out, g.force)?;
    run.write_json("metrics.json", &result)?;
    run.write_json("report.json", &report)?;
    let m = result.metrics;
    g.print(&format!("split\talpha\tsp\tse\tscore\n{split}\t{alpha}\t{:.2}\t{:.2}\t{:.2}\n", m.sp, m.se, m.score));
    let echo = serde_json::json!({ "split": split, "alpha": alpha, "valid_only": valid_only });
    run.finish("evaluate", echo, Vec::new(), g.inputs(&[checkpoint, data])?)?;
    Ok(())
}

pub fn sweep_alpha_cmd(g: &Global, checkpoint: &Path, data: &Path, splits: &[String], valid_only: bool) -> Result<()> {
    let (manifest, mut all) = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let names: Vec<String> = if splits.is_empty() { manifest.splits.clone() } else { splits.to_vec() };
    let mut cycles = Vec::new();
    for n in &names {
        let c = all.remove(n).with_context(|| format!("dataset {} has no split `{n}`", data.display()))?;
        cycles.push(select(c, valid_only));
    }
    let bundle = load_checked(checkpoint, cycles.first().map(Vec::as_slice).unwrap_or_default())?;
    let templates = cfdebias::metadata::TemplateTable::default();
    let prepared = cycles
        .iter()
        .map(|c| prepare_examples(c, &bundle.vocabulary, &templates, bundle.config.max_tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<(&str, &[_])> = names.iter().map(String::as_str).zip(prepared.iter().map(Vec::as_slice)).collect();
    let table = sweep_alpha(&bundle, &refs, &default_alphas())?;
    let mut run = RunDir::create(&g.out, g.force)?;
    run.write_json("sweep.json", &table)?;
    let tsv = table.to_tsv();
    run.write("sweep.tsv", tsv.as_bytes())?;
    run.write("plot.tsv", table.plot_data().as_bytes())?;
    g.print(&tsv);
    let echo = serde_json::json!({ "splits": names, "alphas": default_alphas(), "valid_only": valid_only });
    run.finish("sweep-alpha", echo, Vec::new(), g.inputs(&[checkpoint, data])?)?;
    Ok(())
}

/// Data source for experiment harnesses.
pub enum ExperimentData {
    Files {
        data: PathBuf,
        ood: Option<PathBuf>,
    },
    /// Synthetic pair regenerated per seed; `None` uses generator defaults.
    Synthetic(Option<PathBuf>),
}

impl ExperimentData {
    fn source(&self) -> Result<(DataSource, Vec<PathBuf>)> {
        Ok(match self {
            ExperimentData::Files { data, ood } => (
                DataSource::Fixed(load_pair(data, ood.as_deref())?),
                [Some(data.clone()), ood.clone()].into_iter().flatten().collect(),
            ),
            ExperimentData::Synthetic(path) => {
                let table = load_table(path.as_deref(), &[])?;
                let cfg: SynthConfig = decode(table, "synthetic data config")?;
                cfg.validate()?;
                (DataSource::Synthetic(cfg), path.iter().cloned().collect())
            }
        })
    }
}

fn finish_experiment(
    g: &Global,
    command: &str,
    table: &ExperimentTable,
    base: &TrainConfig,
    inputs: &[PathBuf],
) -> Result<()> {
    let mut run = RunDir::create(&g.out, g.force)?;
    run.write_json("table.json", table)?;
    let tsv = table.to_tsv();
    run.write("table.tsv", tsv.as_bytes())?;
    g.print(&tsv);
    let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    run.finish(command, serde_json::to_value(base)?, table.seeds.clone(), g.inputs(&paths)?)?;
    Ok(())
}

fn experiment_seeds(g: &Global, seeds: &[u64]) -> Vec<u64> {
    match (seeds.is_empty(), g.seed) {
        (false, _) => seeds.to_vec(),
        (true, Some(s)) => vec![s],
        (true, None) => (0..5).collect(),
    }
}

pub fn ablate(g: &Global, data: &ExperimentData, seeds: &[u64], baseline: bool) -> Result<()> {
    let base = g.train_config()?;
    let (source, inputs) = data.source()?;
    let table = run_ablation(&base, &source, &experiment_seeds(g, seeds), &default_alphas(), baseline)?;
    finish_experiment(g, "ablate", &table, &base, &inputs)
}

pub fn compare_attrs(g: &Global, data: &ExperimentData, seeds: &[u64]) -> Result<()> {
    let base = g.train_config()?;
    let (source, inputs) = data.source()?;
    let table = run_attribute_comparison(
        &base,
        &comparison_attribute_sets(),
        &source,
        &experiment_seeds(g, seeds),
        &default_alphas(),
    )?;
    finish_experiment(g, "compare-attrs", &table, &base, &inputs)
}
