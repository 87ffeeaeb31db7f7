//! Audio and text encoders plus the two classification heads.
//!
//! The toy encoders stand in for pretrained backbones: a ReLU MLP over
//! feature vectors and a mean-pooled token embedding table. Both expose
//! explicit backward passes so the training loop can run without an autodiff
//! framework.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::TokenSequence;
use crate::nn::{relu_in_place, Linear, ParamRef};
use crate::rng::{substream, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyAudioMlp,
    ToyTextBag,
    /// Adapter-backed encoder; the identifier names the adapter.
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn toy_audio(input_dim: usize, seed: u64) -> Self {
        Self { kind: EncoderKind::ToyAudioMlp, input_dim, embed_dim: 64, hidden_dims: vec![128], seed }
    }

    /// `input_dim` is the vocabulary size.
    pub fn toy_text(vocab_size: usize, seed: u64) -> Self {
        Self { kind: EncoderKind::ToyTextBag, input_dim: vocab_size, embed_dim: 64, hidden_dims: Vec::new(), seed }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim == 0 {
            return Err(EncoderError::InvalidSpec("embed_dim must be at least 1".into()));
        }
        if self.input_dim == 0 {
            return Err(EncoderError::InvalidSpec("input_dim must be at least 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(EncoderError::InvalidSpec("hidden layer widths must be positive".into()));
        }
        if let EncoderKind::External(id) = &self.kind {
            if id.is_empty() {
                return Err(EncoderError::InvalidSpec("external encoder needs an adapter identifier".into()));
            }
        }
        Ok(())
    }
}

/// Interface for encoders backed by an outside implementation (for example a
/// pretrained model behind an FFI boundary). No adapters ship with this crate.
pub trait ExternalEncoder: Send + Sync {
    fn adapter_id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn embed(&self, input: &[f64]) -> Result<Vec<f64>, EncoderError>;
    /// Flat trainable parameters, if the adapter exposes any.
    fn parameters(&self) -> Vec<ParamRef<'_>> {
        Vec::new()
    }
}

/// ReLU multilayer perceptron over a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub layers: Vec<Linear>,
}

/// Layer inputs saved by the forward pass.
#[derive(Debug, Clone)]
pub struct AudioTrace {
    inputs: Vec<Array1<f64>>,
}

impl AudioEncoder {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        if spec.kind != EncoderKind::ToyAudioMlp {
            return Err(EncoderError::InvalidSpec(format!("{:?} is not a toy audio encoder", spec.kind)));
        }
        let mut rng = substream(spec.seed, Stream::Init);
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden_dims);
        dims.push(spec.embed_dim);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Linear::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn encode(&self, input: &[f64]) -> Result<Array1<f64>, EncoderError> {
        self.forward(input).map(|(out, _)| out)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Array1<f64>, AudioTrace), EncoderError> {
        if input.len() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                what: "audio encoder input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut x = Array1::from(input.to_vec());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(x.view());
            if i < last {
                relu_in_place(&mut y);
            }
            inputs.push(x);
            x = y;
        }
        Ok((x, AudioTrace { inputs }))
    }

    /// Returns `dL/dinput`.
    pub fn backward(&self, trace: &AudioTrace, grad_out: ArrayView1<f64>, grad: &mut AudioEncoder) -> Array1<f64> {
        let mut g = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.inputs[i];
            let gx = self.layers[i].backward(x.view(), g.view(), &mut grad.layers[i]);
            g = if i > 0 {
                // `x` is the post-ReLU output of layer i-1.
                gx * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
            } else {
                gx
            };
        }
        g
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.layers.{i}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.layers {
            l.collect_mut(out);
        }
    }
}

/// Bag-of-tokens encoder: the mean of embedding-table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub table: Array2<f64>,
}

impl TextEncoder {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        if spec.kind != EncoderKind::ToyTextBag {
            return Err(EncoderError::InvalidSpec(format!("{:?} is not a toy text encoder", spec.kind)));
        }
        let mut rng = substream(spec.seed, Stream::Init);
        let layer = Linear::init(spec.embed_dim, spec.input_dim, &mut rng);
        Ok(Self { table: layer.weight })
    }

    pub fn zeros_like(&self) -> Self {
        Self { table: Array2::zeros(self.table.raw_dim()) }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    fn check(&self, tokens: &TokenSequence) -> Result<(), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyTokens);
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(EncoderError::TokenOutOfRange { id, vocab: self.vocab_size() });
        }
        Ok(())
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<Array1<f64>, EncoderError> {
        self.check(tokens)?;
        let mut acc = Array1::zeros(self.embed_dim());
        for &id in &tokens.ids {
            acc += &self.table.row(id as usize);
        }
        Ok(acc / tokens.len() as f64)
    }

    pub fn backward(&self, tokens: &TokenSequence, grad_out: ArrayView1<f64>, grad: &mut TextEncoder) {
        let scale = 1.0 / tokens.len() as f64;
        for &id in &tokens.ids {
            grad.table.row_mut(id as usize).scaled_add(scale, &grad_out);
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef::matrix(format!("{prefix}.table"), &self.table));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.table.as_slice_mut().expect("standard layout"));
    }
}

/// Affine head over the concatenated `[audio; text]` embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalHead {
    pub affine: Linear,
    pub audio_dim: usize,
}

impl MultimodalHead {
    pub fn new(affine: Linear, audio_dim: usize) -> Self {
        Self { affine, audio_dim }
    }

    pub fn forward(&self, audio_emb: ArrayView1<f64>, text_emb: ArrayView1<f64>) -> Result<Array1<f64>, EncoderError> {
        if audio_emb.len() != self.audio_dim {
            return Err(EncoderError::DimensionMismatch {
                what: "multimodal head audio input",
                expected: self.audio_dim,
                actual: audio_emb.len(),
            });
        }
        let text_dim = self.affine.input_dim() - self.audio_dim;
        if text_emb.len() != text_dim {
            return Err(EncoderError::DimensionMismatch {
                what: "multimodal head text input",
                expected: text_dim,
                actual: text_emb.len(),
            });
        }
        let joint = concatenate(Axis(0), &[audio_emb, text_emb]).expect("1-d concat");
        Ok(self.affine.forward(joint.view()))
    }

    /// Returns `(dL/daudio, dL/dtext)`.
    pub fn backward(
        &self,
        audio_emb: ArrayView1<f64>,
        text_emb: ArrayView1<f64>,
        grad_out: ArrayView1<f64>,
        grad: &mut MultimodalHead,
    ) -> (Array1<f64>, Array1<f64>) {
        let joint = concatenate(Axis(0), &[audio_emb, text_emb]).expect("1-d concat");
        let g = self.affine.backward(joint.view(), grad_out, &mut grad.affine);
        (g.slice(s![..self.audio_dim]).to_owned(), g.slice(s![self.audio_dim..]).to_owned())
    }
}

/// Affine head producing the text-only logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TextHead {
    pub affine: Linear,
}

impl TextHead {
    pub fn forward(&self, text_emb: ArrayView1<f64>) -> Result<Array1<f64>, EncoderError> {
        if text_emb.len() != self.affine.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                what: "text head input",
                expected: self.affine.input_dim(),
                actual: text_emb.len(),
            });
        }
        Ok(self.affine.forward(text_emb))
    }

    pub fn backward(&self, text_emb: ArrayView1<f64>, grad_out: ArrayView1<f64>, grad: &mut TextHead) -> Array1<f64> {
        self.affine.backward(text_emb, grad_out, &mut grad.affine)
    }
}
