//! Specificity, sensitivity and ICBHI Score; α sweeps; the ablation and
//! attribute-comparison harnesses.
//!
//! Metrics are stored at full precision and rounded to two decimals only
//! when tables are rendered.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::debiased_inference;
use crate::dataio::{generate_synthetic, LabeledCycle, Split, SynthConfig};
use crate::metadata::{Attribute, Vocabulary};
use crate::model::{BranchOutputs, ModelBundle};
use crate::training::{prepare_examples, split_examples, train, PreparedExample, TrainConfig};
use crate::{Result, N_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("metric undefined: no {0} examples")]
    EmptySupport(&'static str),
    #[error("class index {0} out of range")]
    ClassOutOfRange(usize),
    #[error("attribute set {0} is empty")]
    EmptyAttributeSet(usize),
    #[error("alpha grid must be nonempty, within [0, 1] and strictly increasing")]
    InvalidAlphaGrid,
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("dataset split `{0}` is empty")]
    EmptySplit(String),
}

/// 4×4 confusion counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub matrix: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionCounts {
    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), EvaluationError> {
        let cell = self
            .matrix
            .get_mut(truth)
            .ok_or(EvaluationError::ClassOutOfRange(truth))?
            .get_mut(predicted)
            .ok_or(EvaluationError::ClassOutOfRange(predicted))?;
        *cell += 1;
        Ok(())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, EvaluationError> {
        let mut c = Self::default();
        for (t, p) in pairs {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn support(&self, class: usize) -> u64 {
        self.matrix[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..N_CLASSES).map(|c| self.support(c)).sum()
    }
}

/// Percentages at full precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sp: f64,
    pub se: f64,
    pub score: f64,
}

/// Specificity over class 0, sensitivity over classes 1–3 with an exact
/// class match, and their mean, all in percent.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<Metrics, EvaluationError> {
    let normal = counts.support(0);
    let abnormal: u64 = (1..N_CLASSES).map(|c| counts.support(c)).sum();
    if normal == 0 {
        return Err(EvaluationError::EmptySupport("normal"));
    }
    if abnormal == 0 {
        return Err(EvaluationError::EmptySupport("abnormal"));
    }
    let correct_abnormal: u64 = (1..N_CLASSES).map(|c| counts.matrix[c][c]).sum();
    let sp = 100.0 * counts.matrix[0][0] as f64 / normal as f64;
    let se = 100.0 * correct_abnormal as f64 / abnormal as f64;
    Ok(Metrics { sp, se, score: (sp + se) / 2.0 })
}

/// Rounds to two decimals for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Mean and unbiased sample variance (zero for a single run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub variance: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance =
            if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, variance }
    }
}

/// Metrics over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sp: Stat,
    pub se: Stat,
    pub score: Stat,
    pub runs: Vec<Metrics>,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<Metrics>) -> Result<Self, EvaluationError> {
        if runs.is_empty() {
            return Err(EvaluationError::NoSeeds);
        }
        let col = |f: fn(&Metrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            sp: Stat::of(&col(|m| m.sp)),
            se: Stat::of(&col(|m| m.se)),
            score: Stat::of(&col(|m| m.score)),
            runs,
        })
    }
}

/// Single-run result of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub alpha: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Branch outputs of every example (unaugmented prompts on both branches).
pub fn branch_cache(bundle: &ModelBundle, examples: &[PreparedExample]) -> Result<Vec<BranchOutputs>> {
    examples.iter().map(|ex| Ok(bundle.branch_outputs(&ex.input())?)).collect()
}

/// Confusion counts of debiased predictions at `alpha`. Models without the
/// counterfactual branch always predict from the fused scores.
pub fn counts_at(
    bundle: &ModelBundle,
    outputs: &[BranchOutputs],
    labels: &[usize],
    alpha: f64,
) -> Result<ConfusionCounts> {
    let alpha = if bundle.config.counterfactual { alpha } else { 0.0 };
    let mut counts = ConfusionCounts::default();
    for (o, &label) in outputs.iter().zip(labels) {
        let pred = debiased_inference(&o.y_tm, &o.y_tmstar, alpha)?.class;
        counts.add(label, pred)?;
    }
    Ok(counts)
}

pub fn evaluate_examples(bundle: &ModelBundle, examples: &[PreparedExample], alpha: f64) -> Result<EvalResult> {
    let outputs = branch_cache(bundle, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let counts = counts_at(bundle, &outputs, &labels, alpha)?;
    Ok(EvalResult { alpha, counts, metrics: compute_metrics(&counts)? })
}

/// Evaluates `bundle` on labeled cycles at debiasing strength `alpha`.
pub fn evaluate(bundle: &ModelBundle, cycles: &[LabeledCycle], alpha: f64) -> Result<EvalResult> {
    let templates = crate::metadata::TemplateTable::default();
    let examples = prepare_examples(cycles, &bundle.vocabulary, &templates, bundle.config.max_tokens)?;
    evaluate_examples(bundle, &examples, alpha)
}

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_grid(alphas: &[f64]) -> Result<(), EvaluationError> {
    let ok =
        !alphas.is_empty() && alphas.iter().all(|a| (0.0..=1.0).contains(a)) && alphas.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EvaluationError::InvalidAlphaGrid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub split: String,
    pub alpha: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\talpha\tsp\tse\tscore\n");
        for r in &self.rows {
            let m = r.metrics;
            writeln!(
                out,
                "{}\t{:.1}\t{:.2}\t{:.2}\t{:.2}",
                r.split,
                r.alpha,
                round2(m.sp),
                round2(m.se),
                round2(m.score)
            )
            .unwrap();
        }
        out
    }

    /// `(x, y, series)` triples: α, Score, split.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("x\ty\tseries\n");
        for r in &self.rows {
            writeln!(out, "{:.1}\t{:.2}\t{}", r.alpha, round2(r.metrics.score), r.split).unwrap();
        }
        out
    }

    pub fn split(&self, name: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.split == name).collect()
    }
}

/// Score per `(split, α)`; splits keep the given order, α ascends within each.
pub fn sweep_alpha(bundle: &ModelBundle, splits: &[(&str, &[PreparedExample])], alphas: &[f64]) -> Result<SweepTable> {
    check_grid(alphas)?;
    let mut rows = Vec::new();
    for (name, examples) in splits {
        if examples.is_empty() {
            return Err(EvaluationError::EmptySplit(name.to_string()).into());
        }
        let outputs = branch_cache(bundle, examples)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        for &alpha in alphas {
            let metrics = compute_metrics(&counts_at(bundle, &outputs, &labels, alpha)?)?;
            rows.push(SweepRow { split: name.to_string(), alpha, metrics });
        }
    }
    Ok(SweepTable { rows })
}

/// In-distribution cycles (train + valid tags) and the shifted test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub id: Vec<LabeledCycle>,
    pub ood: Vec<LabeledCycle>,
}

/// Data for each seed: a fixed pair, or a synthetic pair regenerated with the
/// seed substituted into the generator config.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Fixed(DatasetPair),
    Synthetic(SynthConfig),
}

impl DataSource {
    pub fn pair(&self, seed: u64) -> Result<DatasetPair> {
        Ok(match self {
            DataSource::Fixed(p) => p.clone(),
            DataSource::Synthetic(cfg) => {
                let (id, ood) = generate_synthetic(&SynthConfig { seed, ..cfg.clone() })?;
                DatasetPair { id, ood }
            }
        })
    }
}

/// Ablation variants plus the no-debiasing baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Without counterfactual reasoning: no counterfactual branch, no KL, α = 0.
    WithoutCounterfactual,
    /// Without adversarial debiasing.
    WithoutAdversary,
    /// Without counterfactual metadata augmentation.
    WithoutAugmentation,
    Full,
    /// None of the three components.
    Baseline,
}

impl Variant {
    pub const ABLATION: [Variant; 4] =
        [Variant::WithoutCounterfactual, Variant::WithoutAdversary, Variant::WithoutAugmentation, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WithoutCounterfactual => "w/o (a)",
            Variant::WithoutAdversary => "w/o (b)",
            Variant::WithoutAugmentation => "w/o (c)",
            Variant::Full => "Full",
            Variant::Baseline => "w/o (a+b+c)",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let no_cf = |c: &mut TrainConfig| {
            c.counterfactual = false;
            c.lambda_kl = 0.0;
        };
        let no_adv = |c: &mut TrainConfig| {
            c.adversary.enabled = false;
            c.adversary.lambda_location = 0.0;
            c.adversary.lambda_device = 0.0;
        };
        match self {
            Variant::Full => {}
            Variant::WithoutCounterfactual => no_cf(&mut cfg),
            Variant::WithoutAdversary => no_adv(&mut cfg),
            Variant::WithoutAugmentation => cfg.augment_p = 0.0,
            Variant::Baseline => {
                no_cf(&mut cfg);
                no_adv(&mut cfg);
                cfg.augment_p = 0.0;
            }
        }
        cfg
    }
}

/// Rows of the comparison table of debiasing attributes.
pub fn comparison_attribute_sets() -> Vec<BTreeSet<Attribute>> {
    use Attribute::*;
    [
        vec![Age],
        vec![Sex],
        vec![Location],
        vec![Device],
        vec![Age, Sex],
        vec![Age, Location, Device],
        vec![Location, Device],
    ]
    .into_iter()
    .map(|v| v.into_iter().collect())
    .collect()
}

/// One trained and evaluated (configuration, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub id: Vec<Metrics>,
    pub ood: Vec<Metrics>,
    pub best_epoch: usize,
}

impl CellResult {
    /// Index of the highest Score; the smallest α wins ties.
    fn argmax(scores: &[Metrics]) -> usize {
        let mut best = 0;
        for (i, m) in scores.iter().enumerate() {
            if m.score > scores[best].score {
                best = i;
            }
        }
        best
    }

    pub fn best_id(&self) -> (f64, Metrics) {
        let i = Self::argmax(&self.id);
        (self.alphas[i], self.id[i])
    }

    pub fn best_ood(&self) -> (f64, Metrics) {
        let i = Self::argmax(&self.ood);
        (self.alphas[i], self.ood[i])
    }

    /// OOD metrics at the α that maximizes the ID Score.
    pub fn ood_at_id_best(&self) -> (f64, Metrics) {
        let i = Self::argmax(&self.id);
        (self.alphas[i], self.ood[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub name: String,
    pub config: TrainConfig,
    /// Best over α, chosen per split.
    pub id: MetricsReport,
    pub ood: MetricsReport,
    /// OOD at the α chosen on the ID split.
    pub ood_id_selected: MetricsReport,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn row(&self, name: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One line per (row, split) with mean and variance of each metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\tsplit\tsp_mean\tsp_var\tse_mean\tse_var\tscore_mean\tscore_var\n");
        for r in &self.rows {
            for (split, rep) in [("id", &r.id), ("ood", &r.ood), ("ood_id_selected", &r.ood_id_selected)] {
                write!(out, "{}\t{split}", r.name).unwrap();
                for s in [rep.sp, rep.se, rep.score] {
                    write!(out, "\t{:.2}\t{:.2}", round2(s.mean), round2(s.variance)).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Trains one configuration on one seed and evaluates it over the α grid.
pub fn run_cell(cfg: &TrainConfig, data: &DatasetPair, seed: u64, alphas: &[f64]) -> Result<CellResult> {
    check_grid(alphas)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let templates = cfg.template_table()?;
    let vocabulary = Vocabulary::from_templates(&templates);
    let feature_dim =
        data.id.first().map(|c| c.signal.len()).ok_or_else(|| EvaluationError::EmptySplit("id".into()))?;
    let bundle = ModelBundle::new(cfg.model_config(feature_dim), vocabulary.clone(), seed)?;
    let (train_set, valid_set) = split_examples(prepare_examples(&data.id, &vocabulary, &templates, cfg.max_tokens)?);
    let ood_set = prepare_examples(&data.ood, &vocabulary, &templates, cfg.max_tokens)?;
    if valid_set.is_empty() {
        return Err(EvaluationError::EmptySplit(Split::Valid.key().into()).into());
    }
    let outcome = train(bundle, &train_set, &valid_set, &cfg)?;
    let alphas: Vec<f64> = if cfg.counterfactual { alphas.to_vec() } else { vec![0.0] };
    let sweep = sweep_alpha(&outcome.best, &[("id", &valid_set), ("ood", &ood_set)], &alphas)?;
    Ok(CellResult {
        seed,
        id: sweep.split("id").iter().map(|r| r.metrics).collect(),
        ood: sweep.split("ood").iter().map(|r| r.metrics).collect(),
        alphas,
        best_epoch: outcome.state.best_epoch,
    })
}

/// Trains every (row, seed) cell in parallel and merges results in row then
/// seed order.
pub fn run_experiment(
    kind: &str,
    rows: &[(String, TrainConfig)],
    data: &DataSource,
    seeds: &[u64],
    alphas: &[f64],
) -> Result<ExperimentTable> {
    if seeds.is_empty() {
        return Err(EvaluationError::NoSeeds.into());
    }
    check_grid(alphas)?;
    let pairs: Vec<DatasetPair> = seeds.iter().map(|&s| data.pair(s)).collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..seeds.len()).map(move |s| (r, s))).collect();
    let results: Vec<CellResult> =
        cells.par_iter().map(|&(r, s)| run_cell(&rows[r].1, &pairs[s], seeds[s], alphas)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (r, (name, config)) in rows.iter().enumerate() {
        let cells: Vec<CellResult> = results[r * seeds.len()..(r + 1) * seeds.len()].to_vec();
        let report =
            |f: fn(&CellResult) -> (f64, Metrics)| MetricsReport::from_runs(cells.iter().map(|c| f(c).1).collect());
        out.push(ExperimentRow {
            name: name.clone(),
            config: config.clone(),
            id: report(CellResult::best_id)?,
            ood: report(CellResult::best_ood)?,
            ood_id_selected: report(CellResult::ood_at_id_best)?,
            cells,
        });
    }
    Ok(ExperimentTable { kind: kind.to_string(), seeds: seeds.to_vec(), rows: out })
}

/// The four ablation variants, optionally followed by the baseline.
pub fn run_ablation(
    base: &TrainConfig,
    data: &DataSource,
    seeds: &[u64],
    alphas: &[f64],
    include_baseline: bool,
) -> Result<ExperimentTable> {
    let mut variants = Variant::ABLATION.to_vec();
    if include_baseline {
        variants.push(Variant::Baseline);
    }
    let rows: Vec<(String, TrainConfig)> = variants.iter().map(|v| (v.name().to_string(), v.apply(base))).collect();
    run_experiment("ablation", &rows, data, seeds, alphas)
}

/// One row per attribute set, with adversary targets set to exactly that set.
pub fn run_attribute_comparison(
    base: &TrainConfig,
    sets: &[BTreeSet<Attribute>],
    data: &DataSource,
    seeds: &[u64],
    alphas: &[f64],
) -> Result<ExperimentTable> {
    let mut rows = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(EvaluationError::EmptyAttributeSet(i).into());
        }
        let mut cfg = base.clone();
        cfg.adversary.targets = set.clone();
        cfg.adversary.validate()?;
        let name = set.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" & ");
        rows.push((name, cfg));
    }
    run_experiment("attributes", &rows, data, seeds, alphas)
}
