//! Adversarial debiasing of the text-only (direct-effect) branch.
//!
//! The text-only logits pass through a gradient-reversal transform into a
//! shared adversary layer `U`, whose representation feeds one discriminator
//! per metadata attribute. Discriminators learn to recover the attribute;
//! the reversed gradient pushes the text branch to hide it.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::{AgeGroup, Attribute, Device, MetadataRecord, Sex};
use crate::nn::{cross_entropy, cross_entropy_grad, relu_in_place, Linear, ParamRef};
use crate::N_CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum AdversarialError {
    #[error("attribute `{0}` is not an adversarial target")]
    UnconfiguredTarget(Attribute),
    #[error("missing label for adversarial target `{0}`")]
    MissingLabel(Attribute),
    #[error("label {label} out of range for `{attribute}` ({classes} classes)")]
    LabelOutOfRange { attribute: Attribute, label: usize, classes: usize },
    #[error("class label {0} out of range")]
    ClassOutOfRange(usize),
    #[error("invalid adversary config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} text logits, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Number of discriminator classes for an attribute.
pub fn n_classes(attribute: Attribute) -> Option<usize> {
    match attribute {
        Attribute::Age => Some(AgeGroup::KNOWN.len()),
        Attribute::Sex => Some(Sex::KNOWN.len()),
        Attribute::Location => Some(crate::metadata::Location::KNOWN.len()),
        Attribute::Device => Some(Device::N_CLASSES),
        Attribute::Anthropometrics => None,
    }
}

/// Ground-truth discriminator class of `attribute` for a record, if known.
pub fn attribute_label(record: &MetadataRecord, attribute: Attribute) -> Option<usize> {
    match attribute {
        Attribute::Age => AgeGroup::KNOWN.iter().position(|&a| a == record.age_group),
        Attribute::Sex => Sex::KNOWN.iter().position(|&s| s == record.sex),
        Attribute::Location => record.location.class_index(),
        Attribute::Device => record.device.class_index(),
        Attribute::Anthropometrics => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    /// Whether the adversarial objective (text-branch CE plus discriminator
    /// terms) is part of training at all.
    pub enabled: bool,
    pub grl_coefficient: f64,
    pub lambda_age: f64,
    pub lambda_sex: f64,
    pub lambda_location: f64,
    pub lambda_device: f64,
    pub targets: BTreeSet<Attribute>,
    pub adversary_hidden: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grl_coefficient: 1.0,
            lambda_age: 0.01,
            lambda_sex: 0.01,
            lambda_location: 0.01,
            lambda_device: 0.1,
            targets: BTreeSet::from([Attribute::Location, Attribute::Device]),
            adversary_hidden: 32,
        }
    }
}

impl AdversaryConfig {
    pub fn lambda(&self, attribute: Attribute) -> f64 {
        match attribute {
            Attribute::Age => self.lambda_age,
            Attribute::Sex => self.lambda_sex,
            Attribute::Location => self.lambda_location,
            Attribute::Device => self.lambda_device,
            Attribute::Anthropometrics => 0.0,
        }
    }

    pub fn n_classes_per_target(&self) -> BTreeMap<Attribute, usize> {
        self.targets.iter().filter_map(|&a| n_classes(a).map(|n| (a, n))).collect()
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        if !(self.grl_coefficient >= 0.0 && self.grl_coefficient.is_finite()) {
            return Err(AdversarialError::InvalidConfig("grl_coefficient must be a finite value ≥ 0".into()));
        }
        for a in [Attribute::Age, Attribute::Sex, Attribute::Location, Attribute::Device] {
            let l = self.lambda(a);
            if !(l >= 0.0 && l.is_finite()) {
                return Err(AdversarialError::InvalidConfig(format!("lambda_{a} must be a finite value ≥ 0")));
            }
        }
        if let Some(a) = self.targets.iter().find(|&&a| n_classes(a).is_none()) {
            return Err(AdversarialError::InvalidConfig(format!("`{a}` cannot be an adversarial target")));
        }
        if self.enabled && self.targets.is_empty() {
            return Err(AdversarialError::InvalidConfig("targets must be nonempty when enabled".into()));
        }
        if self.adversary_hidden == 0 {
            return Err(AdversarialError::InvalidConfig("adversary_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Identity forward; scales the backward sensitivity by `-coefficient`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub coefficient: f64,
}

impl GradientReversal {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        grad_out.iter().map(|&g| -self.coefficient * g).collect()
    }
}

/// Forward half of [`GradientReversal`].
pub fn gradient_reverse(x: &[f64], _coefficient: f64) -> Vec<f64> {
    x.to_vec()
}

/// Shared adversary `U` and per-attribute discriminators `D_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adversary {
    pub shared: Linear,
    pub heads: Vec<(Attribute, Linear)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryOutputs {
    /// Input after gradient reversal (equal to the text logits).
    pub input: Array1<f64>,
    /// Representation `z = relu(U x)`.
    pub z: Array1<f64>,
    pub logits: BTreeMap<Attribute, Vec<f64>>,
}

impl AdversaryOutputs {
    pub fn logits_for(&self, attribute: Attribute) -> Result<&[f64], AdversarialError> {
        self.logits.get(&attribute).map(Vec::as_slice).ok_or(AdversarialError::UnconfiguredTarget(attribute))
    }
}

impl Adversary {
    pub fn init<R: Rng + ?Sized>(cfg: &AdversaryConfig, rng: &mut R) -> Result<Self, AdversarialError> {
        cfg.validate()?;
        let shared = Linear::init(N_CLASSES, cfg.adversary_hidden, rng);
        let heads = cfg
            .n_classes_per_target()
            .into_iter()
            .map(|(a, k)| (a, Linear::init(cfg.adversary_hidden, k, rng)))
            .collect();
        Ok(Self { shared, heads })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shared: Linear::zeros(self.shared.input_dim(), self.shared.output_dim()),
            heads: self.heads.iter().map(|(a, l)| (*a, Linear::zeros(l.input_dim(), l.output_dim()))).collect(),
        }
    }

    pub fn targets(&self) -> impl Iterator<Item = Attribute> + '_ {
        self.heads.iter().map(|(a, _)| *a)
    }

    pub fn forward(&self, y_t: &[f64], grl: &GradientReversal) -> Result<AdversaryOutputs, AdversarialError> {
        if y_t.len() != self.shared.input_dim() {
            return Err(AdversarialError::DimensionMismatch { expected: self.shared.input_dim(), actual: y_t.len() });
        }
        let input = Array1::from(grl.forward(y_t));
        let mut z = self.shared.forward(input.view());
        relu_in_place(&mut z);
        let logits = self.heads.iter().map(|(a, head)| (*a, head.forward(z.view()).to_vec())).collect();
        Ok(AdversaryOutputs { input, z, logits })
    }

    /// Backpropagates per-target logit gradients; returns the gradient with
    /// respect to the text logits, already reversed.
    pub fn backward(
        &self,
        out: &AdversaryOutputs,
        grad_logits: &BTreeMap<Attribute, Vec<f64>>,
        grl: &GradientReversal,
        grad: &mut Adversary,
    ) -> Vec<f64> {
        let mut dz = Array1::zeros(out.z.len());
        for ((attribute, head), (_, head_grad)) in self.heads.iter().zip(grad.heads.iter_mut()) {
            if let Some(g) = grad_logits.get(attribute) {
                dz += &head.backward(out.z.view(), ArrayView1::from(g.as_slice()), head_grad);
            }
        }
        let mask = out.z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let dpre = dz * mask;
        let dx = self.shared.backward(out.input.view(), dpre.view(), &mut grad.shared);
        grl.backward(dx.as_slice().expect("contiguous"))
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.shared.collect(&format!("{prefix}.shared"), out);
        for (a, head) in &self.heads {
            head.collect(&format!("{prefix}.head.{a}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.shared.collect_mut(out);
        for (_, head) in &mut self.heads {
            head.collect_mut(out);
        }
    }
}

/// Unweighted terms of the adversarial objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLoss {
    /// CE of the text-only logits against the class label.
    pub nde_ce: f64,
    /// Discriminator CE per target.
    pub terms: BTreeMap<Attribute, f64>,
    /// `nde_ce + Σ λ_a · terms[a]`.
    pub total: f64,
}

/// `CE(y_t, y) + Σ_a λ_a · CE(D_a(z), l_a)` over the configured targets.
pub fn adversarial_loss(
    y_t: &[f64],
    label: usize,
    adv: &AdversaryOutputs,
    attr_labels: &BTreeMap<Attribute, usize>,
    cfg: &AdversaryConfig,
) -> Result<AdversarialLoss, AdversarialError> {
    if label >= y_t.len() {
        return Err(AdversarialError::ClassOutOfRange(label));
    }
    let nde_ce = cross_entropy(y_t, label);
    let mut terms = BTreeMap::new();
    let mut total = nde_ce;
    for &attribute in &cfg.targets {
        let logits = adv.logits_for(attribute)?;
        let l = *attr_labels.get(&attribute).ok_or(AdversarialError::MissingLabel(attribute))?;
        if l >= logits.len() {
            return Err(AdversarialError::LabelOutOfRange { attribute, label: l, classes: logits.len() });
        }
        let term = cross_entropy(logits, l);
        total += cfg.lambda(attribute) * term;
        terms.insert(attribute, term);
    }
    Ok(AdversarialLoss { nde_ce, terms, total })
}

/// Gradients of [`adversarial_loss`] with respect to the text logits (the
/// direct CE path only) and each discriminator's logits.
pub fn adversarial_loss_grads(
    y_t: &[f64],
    label: usize,
    adv: &AdversaryOutputs,
    attr_labels: &BTreeMap<Attribute, usize>,
    cfg: &AdversaryConfig,
) -> (Vec<f64>, BTreeMap<Attribute, Vec<f64>>) {
    let d_text = cross_entropy_grad(y_t, label);
    let mut d_logits = BTreeMap::new();
    for &attribute in &cfg.targets {
        if let (Some(logits), Some(&l)) = (adv.logits.get(&attribute), attr_labels.get(&attribute)) {
            let w = cfg.lambda(attribute);
            d_logits.insert(attribute, cross_entropy_grad(logits, l).into_iter().map(|g| w * g).collect());
        }
    }
    (d_text, d_logits)
}
