//! Counterfactual fusion and causal-effect decomposition.
//!
//! The factual score `y_tm` fuses the multimodal logits with a sigmoid mask of
//! the text-only logits. The counterfactual score `y_tm*` replaces the
//! multimodal logits with a constant dummy vector, leaving only the direct
//! text-to-label path. Their difference is the total indirect effect used for
//! debiased inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{argmax, sigmoid};

#[derive(Debug, Error, PartialEq)]
pub enum CausalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("alpha must be finite, got {0}")]
    InvalidAlpha(f64),
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), CausalError> {
    if a.len() != b.len() {
        return Err(CausalError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    /// Fraction of the counterfactual score subtracted at inference.
    pub alpha: f64,
    /// Constant standing in for the multimodal representation.
    pub dummy_value: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self { alpha: 0.0, dummy_value: 1.0 }
    }
}

/// `y_tm = z_m ⊙ σ(z_t)`.
pub fn fuse(z_t: &[f64], z_m: &[f64]) -> Result<Vec<f64>, CausalError> {
    check_len(z_t, z_m)?;
    Ok(z_t.iter().zip(z_m).map(|(&t, &m)| m * sigmoid(t)).collect())
}

/// Fusion with the multimodal input replaced by `dummy_value · 1`.
pub fn counterfactual_branch(z_t: &[f64], cfg: &DebiasConfig) -> Vec<f64> {
    let dummy = vec![cfg.dummy_value; z_t.len()];
    fuse(z_t, &dummy).expect("dummy matches z_t length")
}

/// Fused score of the no-treatment world, `fuse(0, dummy · 1)`.
pub fn reference_outcome(n: usize, cfg: &DebiasConfig) -> Vec<f64> {
    counterfactual_branch(&vec![0.0; n], cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEffects {
    pub te: Vec<f64>,
    pub nde: Vec<f64>,
    pub tie: Vec<f64>,
}

/// TE, NDE and TIE against the reference outcome `y_ref`. `tie` is formed
/// directly as `y_tm − y_tm*`, so it does not depend on `y_ref`.
pub fn causal_effects(y_tm: &[f64], y_tmstar: &[f64], y_ref: &[f64]) -> Result<CausalEffects, CausalError> {
    check_len(y_tm, y_tmstar)?;
    check_len(y_tm, y_ref)?;
    let te = y_tm.iter().zip(y_ref).map(|(a, r)| a - r).collect();
    let nde = y_tmstar.iter().zip(y_ref).map(|(a, r)| a - r).collect();
    let tie = y_tm.iter().zip(y_tmstar).map(|(a, b)| a - b).collect();
    Ok(CausalEffects { te, nde, tie })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Debiased {
    pub scores: Vec<f64>,
    pub class: usize,
}

/// `ŷ = y_tm − α · y_tm*`, with lowest-index argmax.
pub fn debiased_inference(y_tm: &[f64], y_tmstar: &[f64], alpha: f64) -> Result<Debiased, CausalError> {
    check_len(y_tm, y_tmstar)?;
    if !alpha.is_finite() {
        return Err(CausalError::InvalidAlpha(alpha));
    }
    let scores: Vec<f64> =
        if alpha == 0.0 { y_tm.to_vec() } else { y_tm.iter().zip(y_tmstar).map(|(&f, &c)| f - alpha * c).collect() };
    let class = argmax(&scores);
    Ok(Debiased { scores, class })
}

/// Values of α in `[lo, hi]` where the debiased argmax changes, found by
/// intersecting the score lines `y_tm[c] − α·y_tm*[c]` pairwise.
pub fn prediction_breakpoints(y_tm: &[f64], y_tmstar: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>, CausalError> {
    check_len(y_tm, y_tmstar)?;
    let mut candidates = Vec::new();
    for i in 0..y_tm.len() {
        for j in i + 1..y_tm.len() {
            let slope = y_tmstar[i] - y_tmstar[j];
            if slope != 0.0 {
                let a = (y_tm[i] - y_tm[j]) / slope;
                if a > lo && a < hi {
                    candidates.push(a);
                }
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Keep only crossings that change the winner.
    let predict = |a: f64| argmax(&y_tm.iter().zip(y_tmstar).map(|(&f, &c)| f - a * c).collect::<Vec<_>>());
    let mut out = Vec::new();
    let mut edges = vec![lo];
    edges.extend(&candidates);
    edges.push(hi);
    for w in 1..edges.len() - 1 {
        let before = predict(0.5 * (edges[w - 1] + edges[w]));
        let after = predict(0.5 * (edges[w] + edges[w + 1]));
        if before != after {
            out.push(edges[w]);
        }
    }
    Ok(out)
}
