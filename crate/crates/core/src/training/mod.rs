//! The training objective and optimization loop.
//!
//! Per step: shuffle-ordered mini-batch, counterfactual augmentation of the
//! text-only branch's prompt, forward through every branch, one AdamW update
//! of all parameters. The fusion branch always sees the unaugmented prompt.
//! Validation Score selects the returned checkpoint.

pub mod losses;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{attribute_label, AdversaryConfig};
use crate::dataio::{LabeledCycle, Split};
use crate::evaluation::{evaluate_examples, EvaluationError, Metrics};
use crate::metadata::{
    build_prompt, counterfactual_augment, Attribute, MetadataRecord, PromptText, TemplateTable, TokenSequence,
    Vocabulary,
};
use crate::model::{ExampleInput, ModelBundle, ModelConfig, Objective};
use crate::nn::{AdamW, AdamWConfig, Schedule};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub use losses::{classification_loss, consistency_loss, consistency_loss_grad, total_loss, LossComponents, LossTerms};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("class label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("tensor `{name}` shape mismatch: expected {expected}, found {actual}")]
    ShapeMismatch { name: String, expected: String, actual: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("feature dimension mismatch: model expects {expected}, data has {actual}")]
    FeatureDim { expected: usize, actual: usize },
    /// The loss or parameters became non-finite. `last_good` holds the
    /// parameters at the end of the last completed epoch.
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged { epoch: usize, step: usize, message: String, last_good: Box<ModelBundle> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub adversary: AdversaryConfig,
    /// Per-sentence placeholder probability for the text-only branch prompt.
    pub augment_p: f64,
    /// Attributes eligible for placeholder replacement.
    pub sensitive: BTreeSet<Attribute>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Use the counterfactual fusion; when false the model is a plain
    /// multimodal classifier and the KL and counterfactual CE terms vanish.
    pub counterfactual: bool,
    pub embed_dim: usize,
    pub audio_hidden: Vec<usize>,
    pub max_tokens: usize,
    /// Debiasing strength used when scoring the validation split.
    pub selection_alpha: f64,
    /// Replacement template table; the built-in table when absent.
    pub templates: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_kl: 1.0,
            adversary: AdversaryConfig::default(),
            augment_p: 0.25,
            sensitive: Attribute::ALL.into_iter().collect(),
            lr: 5e-5,
            epochs: 30,
            batch_size: 8,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            schedule: Schedule::Cosine,
            counterfactual: true,
            embed_dim: 64,
            audio_hidden: vec![128],
            max_tokens: crate::metadata::DEFAULT_MAX_TOKENS,
            selection_alpha: 0.0,
            templates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            return bad("augment_p must lie in [0, 1]");
        }
        if !(self.lambda_ce >= 0.0 && self.lambda_kl >= 0.0 && self.weight_decay >= 0.0) {
            return bad("loss weights and weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.selection_alpha) {
            return bad("selection_alpha must lie in [0, 1]");
        }
        if self.max_tokens == 0 || self.embed_dim == 0 {
            return bad("max_tokens and embed_dim must be positive");
        }
        self.adversary.validate().map_err(|e| TrainingError::InvalidConfig(e.to_string()))
    }

    pub fn template_table(&self) -> Result<TemplateTable> {
        Ok(match &self.templates {
            Some(p) => TemplateTable::load(p)?,
            None => TemplateTable::default(),
        })
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            audio_hidden: self.audio_hidden.clone(),
            adversary_hidden: self.adversary.adversary_hidden,
            adversary_targets: self.adversary.targets.clone(),
            counterfactual: self.counterfactual,
            max_tokens: self.max_tokens,
            ..ModelConfig::new(feature_dim)
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda_ce: self.lambda_ce,
            lambda_kl: if self.counterfactual { self.lambda_kl } else { 0.0 },
            adversary: self.adversary.clone(),
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// One example with its rendered prompt, fusion-branch tokens and
/// discriminator labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub split: Split,
    pub patient_id: String,
    pub metadata: MetadataRecord,
    pub prompt: PromptText,
    pub tokens: TokenSequence,
    pub attr_labels: BTreeMap<Attribute, usize>,
}

impl PreparedExample {
    pub fn input(&self) -> ExampleInput<'_> {
        ExampleInput { features: &self.features, fusion_tokens: &self.tokens, nde_tokens: &self.tokens }
    }
}

pub fn prepare_examples(
    cycles: &[LabeledCycle],
    vocabulary: &Vocabulary,
    templates: &TemplateTable,
    max_tokens: usize,
) -> Result<Vec<PreparedExample>> {
    cycles
        .iter()
        .map(|c| {
            c.metadata.validate()?;
            let prompt = build_prompt(&c.metadata, templates);
            let tokens = vocabulary.tokenize(&prompt, max_tokens)?;
            let attr_labels = [Attribute::Age, Attribute::Sex, Attribute::Location, Attribute::Device]
                .into_iter()
                .filter_map(|a| attribute_label(&c.metadata, a).map(|l| (a, l)))
                .collect();
            Ok(PreparedExample {
                features: c.signal.clone(),
                label: c.label.index(),
                split: c.source_split,
                patient_id: c.patient_id.clone(),
                metadata: c.metadata.clone(),
                prompt,
                tokens,
                attr_labels,
            })
        })
        .collect()
}

/// Logged loss terms of one optimizer step (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
}

impl StepLog {
    /// Recomputes the total from the logged terms.
    pub fn weighted_sum(&self, cfg: &TrainConfig) -> f64 {
        let c = self.terms.components(&cfg.adversary);
        cfg.lambda_ce * c.ce + cfg.lambda_kl * c.kl + c.adv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub valid: Option<Metrics>,
    /// Training-set discriminator accuracy per adversarial target.
    pub discriminator_accuracy: BTreeMap<Attribute, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub loss_history: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
    pub best_valid_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation Score (last epoch without validation data).
    pub best: ModelBundle,
    pub state: TrainState,
}

/// Splits prepared examples into the training pool and the validation split.
pub fn split_examples(examples: Vec<PreparedExample>) -> (Vec<PreparedExample>, Vec<PreparedExample>) {
    examples.into_iter().partition(|e| e.split == Split::Train)
}

fn discriminator_accuracy(
    bundle: &ModelBundle,
    examples: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<BTreeMap<Attribute, f64>> {
    let mut hits: BTreeMap<Attribute, (usize, usize)> = BTreeMap::new();
    if !cfg.adversary.enabled {
        return Ok(BTreeMap::new());
    }
    for ex in examples {
        let out = bundle.branch_outputs(&ex.input())?;
        let adv = bundle.adversary_forward(&out.z_t, cfg.adversary.grl_coefficient)?;
        for (attr, logits) in &adv.logits {
            if let Some(&l) = ex.attr_labels.get(attr) {
                let e = hits.entry(*attr).or_default();
                e.0 += (crate::nn::argmax(logits) == l) as usize;
                e.1 += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(a, (h, n))| (a, h as f64 / n.max(1) as f64)).collect())
}

fn valid_score(bundle: &ModelBundle, valid: &[PreparedExample], alpha: f64) -> Result<Option<Metrics>> {
    if valid.is_empty() {
        return Ok(None);
    }
    match evaluate_examples(bundle, valid, alpha) {
        Ok(report) => Ok(Some(report.metrics)),
        Err(Error::Evaluation(EvaluationError::EmptySupport(_))) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `bundle` on `train`, selecting the checkpoint by Score on `valid`.
pub fn train(
    mut bundle: ModelBundle,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset.into());
    }
    for ex in train.iter().chain(valid) {
        if ex.features.len() != bundle.config.feature_dim {
            return Err(
                TrainingError::FeatureDim { expected: bundle.config.feature_dim, actual: ex.features.len() }.into()
            );
        }
    }
    if cfg.adversary.enabled {
        let missing: Vec<_> =
            cfg.adversary.targets.iter().filter(|a| !bundle.config.adversary_targets.contains(a)).collect();
        if !missing.is_empty() {
            return Err(TrainingError::InvalidConfig(format!("model has no discriminator for {missing:?}")).into());
        }
    }
    let templates = cfg.template_table()?;
    let objective = cfg.objective();
    let mut optimizer = AdamW::new(cfg.optimizer());
    let mut order_rng = substream(cfg.seed, Stream::DataOrder);
    let mut aug_rng = substream(cfg.seed, Stream::Augmentation);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;

    let mut state = TrainState {
        epoch: 0,
        step: 0,
        loss_history: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_score: None,
    };
    let mut best = bundle.clone();
    let mut last_good = bundle.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.schedule.lr(cfg.lr, state.step as f64 / total_steps);
            let weight = 1.0 / batch.len() as f64;
            let mut grad = bundle.params.zeros_like();
            let mut terms = LossTerms::default();
            for &i in batch {
                let ex = &train[i];
                let nde_prompt =
                    counterfactual_augment(&ex.prompt, cfg.augment_p, &cfg.sensitive, &templates, &mut aug_rng)?;
                let nde_tokens = bundle.vocabulary.tokenize(&nde_prompt, cfg.max_tokens)?;
                let input = ExampleInput { features: &ex.features, fusion_tokens: &ex.tokens, nde_tokens: &nde_tokens };
                let t = bundle.loss_and_grad(&input, ex.label, &ex.attr_labels, &objective, weight, &mut grad)?;
                terms.add_scaled(&t, weight);
            }
            let diverged = |message: String, last_good: &ModelBundle| {
                Error::Training(TrainingError::Diverged {
                    epoch,
                    step: state.step,
                    message,
                    last_good: Box::new(last_good.clone()),
                })
            };
            let total = match total_loss(&terms.components(&cfg.adversary), cfg) {
                Ok(t) => t,
                Err(e) => return Err(diverged(e.to_string(), &last_good)),
            };
            if !grad.all_finite() {
                return Err(diverged("non-finite gradient".into(), &last_good));
            }
            let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|t| t.data.to_vec()).collect();
            optimizer.step(lr, bundle.params.tensors_mut(), grads.iter().map(Vec::as_slice).collect());
            if !bundle.params.all_finite() {
                return Err(diverged("non-finite parameters after update".into(), &last_good));
            }
            state.step += 1;
            epoch_total += total;
            state.loss_history.push(StepLog { epoch, step: state.step, lr, terms, total });
        }
        let valid_metrics = valid_score(&bundle, valid, cfg.selection_alpha)?;
        let improved = match (&valid_metrics, state.best_valid_score) {
            (Some(m), Some(b)) => m.score > b,
            (Some(_), None) => true,
            (None, _) => state.best_valid_score.is_none(),
        };
        if improved {
            state.best_epoch = epoch;
            state.best_valid_score = valid_metrics.as_ref().map(|m| m.score);
            best = bundle.clone();
        }
        state.epochs.push(EpochLog {
            epoch,
            mean_total: epoch_total / steps_per_epoch as f64,
            valid: valid_metrics,
            discriminator_accuracy: discriminator_accuracy(&bundle, train, cfg)?,
        });
        log::debug!("epoch {epoch}: mean loss {:.5}", epoch_total / steps_per_epoch as f64);
        last_good = bundle.clone();
    }
    Ok(TrainOutcome { best, state })
}

/// Writes the run directory: `config.json`, `epochs.tsv`, `loss_log.tsv`,
/// `checkpoint.json` and `train_state.json`. Returns the written file names.
pub fn write_run_dir(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Vec<String>> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<String> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io(&p))?;
        Ok(name.to_string())
    };
    let mut files = vec![write("config.json", &serde_json::to_vec_pretty(cfg)?)?];

    let mut epochs = Vec::new();
    writeln!(epochs, "epoch\tmean_loss\tvalid_sp\tvalid_se\tvalid_score").expect("vec write");
    for e in &outcome.state.epochs {
        let (sp, se, sc) = e.valid.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.sp, m.se, m.score));
        writeln!(epochs, "{}\t{:.6}\t{sp:.2}\t{se:.2}\t{sc:.2}", e.epoch, e.mean_total).expect("vec write");
    }
    files.push(write("epochs.tsv", &epochs)?);

    let targets: Vec<Attribute> = cfg.adversary.targets.iter().copied().collect();
    let mut log = Vec::new();
    write!(log, "epoch\tstep\tlr\tce_factual\tce_counterfactual\tkl\tce_nde").expect("vec write");
    for a in &targets {
        write!(log, "\tadv_{a}").expect("vec write");
    }
    writeln!(log, "\ttotal").expect("vec write");
    for s in &outcome.state.loss_history {
        let t = &s.terms;
        write!(
            log,
            "{}\t{}\t{:e}\t{}\t{}\t{}\t{}",
            s.epoch, s.step, s.lr, t.ce_factual, t.ce_counterfactual, t.kl, t.ce_nde
        )
        .expect("vec write");
        for a in &targets {
            write!(log, "\t{}", t.adversary.get(a).copied().unwrap_or(0.0)).expect("vec write");
        }
        writeln!(log, "\t{}", s.total).expect("vec write");
    }
    files.push(write("loss_log.tsv", &log)?);
    files.push(write("checkpoint.json", &serde_json::to_vec(&outcome.best.to_checkpoint())?)?);
    files.push(write("train_state.json", &serde_json::to_vec_pretty(&outcome.state)?)?);
    Ok(files)
}

/// Builds a fresh model for `cfg` and trains it on the `train`/`valid` parts
/// of `cycles`.
pub fn train_from_cycles(cycles: &[LabeledCycle], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let templates = cfg.template_table()?;
    let vocabulary = Vocabulary::from_templates(&templates);
    let feature_dim = cycles.first().map(|c| c.signal.len()).ok_or(TrainingError::EmptyDataset)?;
    let bundle = ModelBundle::new(cfg.model_config(feature_dim), vocabulary.clone(), cfg.seed)?;
    let (tr, va) = split_examples(prepare_examples(cycles, &vocabulary, &templates, cfg.max_tokens)?);
    train(bundle, &tr, &va, cfg)
}
