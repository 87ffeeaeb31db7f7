use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainingError};
use crate::adversarial::AdversaryConfig;
use crate::metadata::Attribute;
use crate::nn::{cross_entropy, cross_entropy_grad, log_softmax};
use crate::N_CLASSES;

fn check_label(label: usize) -> Result<(), TrainingError> {
    if label >= N_CLASSES {
        return Err(TrainingError::LabelOutOfRange(label));
    }
    Ok(())
}

/// `CE(y_tm, y) + CE(y_tm*, y)`.
pub fn classification_loss(y_tm: &[f64], y_tmstar: &[f64], label: usize) -> Result<f64, TrainingError> {
    check_label(label)?;
    Ok(cross_entropy(y_tm, label) + cross_entropy(y_tmstar, label))
}

/// `KL(softmax(y_tm*) ‖ softmax(y_tm))`.
pub fn consistency_loss(y_tmstar: &[f64], y_tm: &[f64]) -> f64 {
    let log_p = log_softmax(y_tmstar);
    let log_q = log_softmax(y_tm);
    log_p.iter().zip(&log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum()
}

/// Gradient of [`consistency_loss`] with respect to `y_tm*`; the factual
/// distribution is a fixed target and receives no gradient.
pub fn consistency_loss_grad(y_tmstar: &[f64], y_tm: &[f64]) -> Vec<f64> {
    let log_p = log_softmax(y_tmstar);
    let log_q = log_softmax(y_tm);
    let diff: Vec<f64> = log_p.iter().zip(&log_q).map(|(lp, lq)| lp - lq).collect();
    let kl: f64 = log_p.iter().zip(&diff).map(|(lp, d)| lp.exp() * d).sum();
    log_p.iter().zip(&diff).map(|(lp, d)| lp.exp() * (d - kl)).collect()
}

pub(crate) fn classification_grads(y_tm: &[f64], y_tmstar: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
    (cross_entropy_grad(y_tm, label), cross_entropy_grad(y_tmstar, label))
}

/// Raw per-example (or batch-mean) loss terms, before weighting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce_factual: f64,
    pub ce_counterfactual: f64,
    pub kl: f64,
    pub ce_nde: f64,
    pub adversary: BTreeMap<Attribute, f64>,
}

impl LossTerms {
    /// Groups the terms into the three weighted components of the objective.
    pub fn components(&self, adversary: &AdversaryConfig) -> LossComponents {
        let adv = if adversary.enabled {
            self.ce_nde + self.adversary.iter().map(|(&a, &l)| adversary.lambda(a) * l).sum::<f64>()
        } else {
            0.0
        };
        LossComponents { ce: self.ce_factual + self.ce_counterfactual, kl: self.kl, adv }
    }

    pub fn add_scaled(&mut self, other: &LossTerms, scale: f64) {
        self.ce_factual += scale * other.ce_factual;
        self.ce_counterfactual += scale * other.ce_counterfactual;
        self.kl += scale * other.kl;
        self.ce_nde += scale * other.ce_nde;
        for (&a, &l) in &other.adversary {
            *self.adversary.entry(a).or_insert(0.0) += scale * l;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// `L_CE`: factual plus counterfactual cross-entropy.
    pub ce: f64,
    /// `L_KL`.
    pub kl: f64,
    /// `L_adv`: text-branch CE plus weighted discriminator terms.
    pub adv: f64,
}

/// `λ_CE · L_CE + λ_KL · L_KL + L_adv`.
pub fn total_loss(components: &LossComponents, cfg: &TrainConfig) -> Result<f64, TrainingError> {
    for (name, v) in [("ce", components.ce), ("kl", components.kl), ("adv", components.adv)] {
        if !v.is_finite() {
            return Err(TrainingError::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    Ok(cfg.lambda_ce * components.ce + cfg.lambda_kl * components.kl + components.adv)
}
