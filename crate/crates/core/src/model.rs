//! The full model: audio and text encoders, both heads, the counterfactual
//! fusion, and the adversary, with a combined forward/backward pass and a
//! JSON checkpoint format.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adversarial_loss, adversarial_loss_grads, Adversary, AdversaryConfig, AdversaryOutputs, GradientReversal,
};
use crate::causal::{counterfactual_branch, fuse, DebiasConfig};
use crate::encoders::{AudioEncoder, AudioTrace, EncoderError, EncoderSpec, MultimodalHead, TextEncoder, TextHead};
use crate::metadata::{Attribute, TokenSequence, Vocabulary};
use crate::nn::{sigmoid, Linear, ParamRef};
use crate::rng::{substream, Stream};
use crate::training::losses::{classification_grads, consistency_loss, consistency_loss_grad, LossTerms};
use crate::training::TrainingError;
use crate::{Error, Result, N_CLASSES};

pub const CHECKPOINT_FORMAT: &str = "cfdebias-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub audio_hidden: Vec<usize>,
    pub adversary_hidden: usize,
    pub adversary_targets: BTreeSet<Attribute>,
    /// Whether predictions use the counterfactual fusion `z_m ⊙ σ(z_t)`;
    /// when false the multimodal logits are the prediction.
    pub counterfactual: bool,
    pub dummy_value: f64,
    pub max_tokens: usize,
}

impl ModelConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 64,
            audio_hidden: vec![128],
            adversary_hidden: 32,
            adversary_targets: BTreeSet::from([Attribute::Location, Attribute::Device]),
            counterfactual: true,
            dummy_value: 1.0,
            max_tokens: crate::metadata::DEFAULT_MAX_TOKENS,
        }
    }

    pub fn debias(&self, alpha: f64) -> DebiasConfig {
        DebiasConfig { alpha, dummy_value: self.dummy_value }
    }
}

/// Per-example scores of the three causal branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutputs {
    /// Text-only logits `Y_t`.
    pub z_t: Vec<f64>,
    /// Multimodal logits.
    pub z_m: Vec<f64>,
    /// Factual fused scores `Y_{t,m}`.
    pub y_tm: Vec<f64>,
    /// Counterfactual scores `Y_{t,m*}`.
    pub y_tmstar: Vec<f64>,
}

/// Model inputs for one example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    pub features: &'a [f64],
    /// Prompt tokens for the fusion branch (never augmented).
    pub fusion_tokens: &'a TokenSequence,
    /// Prompt tokens for the text-only branch.
    pub nde_tokens: &'a TokenSequence,
}

/// Trainable tensors, also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub audio: AudioEncoder,
    pub fusion_text: TextEncoder,
    pub nde_text: TextEncoder,
    pub multimodal_head: MultimodalHead,
    pub text_head: TextHead,
    pub adversary: Adversary,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            audio: self.audio.zeros_like(),
            fusion_text: self.fusion_text.zeros_like(),
            nde_text: self.nde_text.zeros_like(),
            multimodal_head: MultimodalHead::new(
                Linear::zeros(self.multimodal_head.affine.input_dim(), N_CLASSES),
                self.multimodal_head.audio_dim,
            ),
            text_head: TextHead { affine: Linear::zeros(self.text_head.affine.input_dim(), N_CLASSES) },
            adversary: self.adversary.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.audio.collect("audio", &mut out);
        self.fusion_text.collect("fusion_text", &mut out);
        self.nde_text.collect("nde_text", &mut out);
        self.multimodal_head.affine.collect("multimodal_head", &mut out);
        self.text_head.affine.collect("text_head", &mut out);
        self.adversary.collect("adversary", &mut out);
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.audio.collect_mut(&mut out);
        self.fusion_text.collect_mut(&mut out);
        self.nde_text.collect_mut(&mut out);
        self.multimodal_head.affine.collect_mut(&mut out);
        self.text_head.affine.collect_mut(&mut out);
        self.adversary.collect_mut(&mut out);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Loss weights and switches consumed by [`ModelBundle::loss_and_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub adversary: AdversaryConfig,
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    audio_trace: AudioTrace,
    audio_emb: Array1<f64>,
    fusion_emb: Array1<f64>,
    nde_emb: Array1<f64>,
    pub branches: BranchOutputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub params: ModelParams,
}

fn derive_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ModelBundle {
    pub fn new(config: ModelConfig, vocabulary: Vocabulary, seed: u64) -> Result<Self> {
        let audio_spec = EncoderSpec {
            hidden_dims: config.audio_hidden.clone(),
            embed_dim: config.embed_dim,
            ..EncoderSpec::toy_audio(config.feature_dim, derive_seed(seed, 1))
        };
        let text_spec = |k| EncoderSpec {
            embed_dim: config.embed_dim,
            ..EncoderSpec::toy_text(vocabulary.len(), derive_seed(seed, k))
        };
        let audio = AudioEncoder::from_spec(&audio_spec)?;
        let fusion_text = TextEncoder::from_spec(&text_spec(2))?;
        let nde_text = TextEncoder::from_spec(&text_spec(3))?;
        let mut rng = substream(derive_seed(seed, 4), Stream::Init);
        let multimodal_head =
            MultimodalHead::new(Linear::init(2 * config.embed_dim, N_CLASSES, &mut rng), config.embed_dim);
        let text_head = TextHead { affine: Linear::init(config.embed_dim, N_CLASSES, &mut rng) };
        let adv_cfg = AdversaryConfig {
            enabled: false,
            targets: config.adversary_targets.clone(),
            adversary_hidden: config.adversary_hidden,
            ..Default::default()
        };
        let adversary = Adversary::init(&adv_cfg, &mut rng)?;
        Ok(Self {
            config,
            vocabulary,
            params: ModelParams { audio, fusion_text, nde_text, multimodal_head, text_head, adversary },
        })
    }

    pub fn forward(&self, input: &ExampleInput<'_>) -> Result<ForwardPass, EncoderError> {
        let p = &self.params;
        let (audio_emb, audio_trace) = p.audio.forward(input.features)?;
        let fusion_emb = p.fusion_text.encode(input.fusion_tokens)?;
        let nde_emb = p.nde_text.encode(input.nde_tokens)?;
        let z_m = p.multimodal_head.forward(audio_emb.view(), fusion_emb.view())?.to_vec();
        let z_t = p.text_head.forward(nde_emb.view())?.to_vec();
        let y_tm = if self.config.counterfactual { fuse(&z_t, &z_m).expect("both length 4") } else { z_m.clone() };
        let y_tmstar = counterfactual_branch(&z_t, &self.config.debias(0.0));
        Ok(ForwardPass {
            audio_trace,
            audio_emb,
            fusion_emb,
            nde_emb,
            branches: BranchOutputs { z_t, z_m, y_tm, y_tmstar },
        })
    }

    pub fn branch_outputs(&self, input: &ExampleInput<'_>) -> Result<BranchOutputs, EncoderError> {
        self.forward(input).map(|f| f.branches)
    }

    pub fn adversary_forward(&self, z_t: &[f64], grl_coefficient: f64) -> Result<AdversaryOutputs> {
        Ok(self.params.adversary.forward(z_t, &GradientReversal { coefficient: grl_coefficient })?)
    }

    /// Computes the raw loss terms for one example and accumulates the
    /// gradient of the weighted objective, scaled by `weight`, into `grad`.
    ///
    /// Text-branch parameters receive the discriminator gradient reversed by
    /// the gradient-reversal coefficient; every other path is a true gradient.
    pub fn loss_and_grad(
        &self,
        input: &ExampleInput<'_>,
        label: usize,
        attr_labels: &BTreeMap<Attribute, usize>,
        objective: &Objective,
        weight: f64,
        grad: &mut ModelParams,
    ) -> Result<LossTerms> {
        if label >= N_CLASSES {
            return Err(TrainingError::LabelOutOfRange(label).into());
        }
        let fwd = self.forward(input)?;
        let BranchOutputs { z_t, z_m, y_tm, y_tmstar } = &fwd.branches;
        let cf = self.config.counterfactual;
        let dummy = self.config.dummy_value;
        let s: Vec<f64> = z_t.iter().map(|&z| sigmoid(z)).collect();

        let mut terms = LossTerms { ce_factual: crate::nn::cross_entropy(y_tm, label), ..Default::default() };
        let (g_tm, g_cf) = classification_grads(y_tm, y_tmstar, label);
        let d_ytm: Vec<f64> = g_tm.iter().map(|g| weight * objective.lambda_ce * g).collect();
        let mut dz_t = vec![0.0; N_CLASSES];
        let dz_m: Vec<f64> = if cf {
            terms.ce_counterfactual = crate::nn::cross_entropy(y_tmstar, label);
            terms.kl = consistency_loss(y_tmstar, y_tm);
            let g_kl = consistency_loss_grad(y_tmstar, y_tm);
            for c in 0..N_CLASSES {
                let d_ycf = weight * (objective.lambda_ce * g_cf[c] + objective.lambda_kl * g_kl[c]);
                let ds = d_ytm[c] * z_m[c] + dummy * d_ycf;
                dz_t[c] += ds * s[c] * (1.0 - s[c]);
            }
            d_ytm.iter().zip(&s).map(|(d, s)| d * s).collect()
        } else {
            d_ytm
        };

        // Targets whose value is unknown for this example contribute no term.
        let restricted;
        let adv_cfg = if objective.adversary.targets.iter().all(|a| attr_labels.contains_key(a)) {
            &objective.adversary
        } else {
            restricted = AdversaryConfig {
                targets: objective.adversary.targets.iter().copied().filter(|a| attr_labels.contains_key(a)).collect(),
                ..objective.adversary.clone()
            };
            &restricted
        };
        if adv_cfg.enabled {
            let grl = GradientReversal { coefficient: adv_cfg.grl_coefficient };
            let adv_out = self.params.adversary.forward(z_t, &grl)?;
            let adv = adversarial_loss(z_t, label, &adv_out, attr_labels, adv_cfg)?;
            terms.ce_nde = adv.nde_ce;
            terms.adversary = adv.terms;
            let (d_text, d_logits) = adversarial_loss_grads(z_t, label, &adv_out, attr_labels, adv_cfg);
            let d_logits =
                d_logits.into_iter().map(|(a, g)| (a, g.into_iter().map(|v| weight * v).collect())).collect();
            let reversed = self.params.adversary.backward(&adv_out, &d_logits, &grl, &mut grad.adversary);
            for c in 0..N_CLASSES {
                dz_t[c] += weight * d_text[c] + reversed[c];
            }
        }

        let p = &self.params;
        let (d_audio, d_fusion) = p.multimodal_head.backward(
            fwd.audio_emb.view(),
            fwd.fusion_emb.view(),
            ArrayView1::from(dz_m.as_slice()),
            &mut grad.multimodal_head,
        );
        p.audio.backward(&fwd.audio_trace, d_audio.view(), &mut grad.audio);
        p.fusion_text.backward(input.fusion_tokens, d_fusion.view(), &mut grad.fusion_text);
        let d_nde = p.text_head.backward(fwd.nde_emb.view(), ArrayView1::from(dz_t.as_slice()), &mut grad.text_head);
        p.nde_text.backward(input.nde_tokens, d_nde.view(), &mut grad.nde_text);
        Ok(terms)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|t| TensorRecord { name: t.name, shape: t.shape, data: t.data.to_vec() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Training(TrainingError::Checkpoint(format!(
                "unsupported checkpoint header {} v{}",
                ckpt.format, ckpt.version
            ))));
        }
        let mut bundle = ModelBundle::new(ckpt.config, ckpt.vocabulary, 0)?;
        let layout: Vec<(String, Vec<usize>)> =
            bundle.params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if layout.len() != ckpt.tensors.len() {
            return Err(Error::Training(TrainingError::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                layout.len(),
                ckpt.tensors.len()
            ))));
        }
        for ((name, shape), (dst, rec)) in layout.iter().zip(bundle.params.tensors_mut().into_iter().zip(&ckpt.tensors))
        {
            if *name != rec.name || *shape != rec.shape || rec.data.len() != dst.len() {
                return Err(Error::Training(TrainingError::ShapeMismatch {
                    name: rec.name.clone(),
                    expected: format!("{name} {shape:?}"),
                    actual: format!("{} {:?}", rec.name, rec.shape),
                }));
            }
            dst.copy_from_slice(&rec.data);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat keyed tensors with shapes, a config echo and a versioned header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorRecord>,
}
