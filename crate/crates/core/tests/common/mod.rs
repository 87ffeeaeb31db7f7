//! Checks shared by the integration suites and the acceptance report. Each
//! check returns an `Outcome` so the acceptance target can print one line per
//! criterion while the focused suites assert on the same code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use cfdebias::adversarial::{Adversary, AdversaryConfig, GradientReversal};
use cfdebias::causal::{
    causal_effects, counterfactual_branch, debiased_inference, fuse, reference_outcome, DebiasConfig,
};
use cfdebias::dataio::{generate_synthetic, icbhi, write_wav_f32, ClassSummary, SynthConfig};
use cfdebias::encoders::{AudioEncoder, EncoderSpec, MultimodalHead, TextEncoder, TextHead};
use cfdebias::evaluation::{compute_metrics, round2, ConfusionCounts};
use cfdebias::metadata::{
    build_prompt, counterfactual_augment, AgeGroup, Attribute, Device, Location, MetadataRecord, Sex, TemplateTable,
    TokenSequence, Vocabulary,
};
use cfdebias::model::{ExampleInput, ModelBundle, ModelParams, Objective};
use cfdebias::nn::{cross_entropy, cross_entropy_grad, Linear};
use cfdebias::training::{
    classification_loss, consistency_loss, consistency_loss_grad, prepare_examples, PreparedExample,
};
use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn timed(f: impl FnOnce() -> (bool, String)) -> Self {
        let t = Instant::now();
        let (passed, detail) = f();
        Self { passed, detail, elapsed: t.elapsed() }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Entries whose analytic gradient depends on the reversal coefficient.
    pub reversed: usize,
}

impl GradCheck {
    pub fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            if e >= self.max_rel {
                self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
            }
        }
    }

    pub fn merge(&mut self, name: &str, other: GradCheck) {
        self.checked += other.checked;
        self.reversed += other.reversed;
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = format!("{name}: {}", other.worst);
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_REL_TOL
    }
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_EPS) - f(x - FD_EPS)) / (2.0 * FD_EPS)
}

/// Checks `grad` against central differences of `loss` over every entry of
/// every tensor returned by `params`.
fn check_params<M: Clone>(
    name: &str,
    module: &M,
    params: for<'a> fn(&'a mut M) -> Vec<&'a mut [f64]>,
    grad: &mut M,
    loss: &dyn Fn(&M) -> f64,
    out: &mut GradCheck,
) {
    let analytic: Vec<Vec<f64>> = params(grad).into_iter().map(|t| t.to_vec()).collect();
    let mut m = module.clone();
    for (t, a_t) in analytic.iter().enumerate() {
        for (i, &a) in a_t.iter().enumerate() {
            let x0 = params(&mut m)[t][i];
            let mut f = |x: f64| {
                params(&mut m)[t][i] = x;
                loss(&m)
            };
            let n = central(&mut f, x0);
            params(&mut m)[t][i] = x0;
            out.record(|| format!("{name} tensor {t} entry {i}"), a, n);
        }
    }
}

fn check_input(name: &str, x: &[f64], grad: &[f64], loss: &dyn Fn(&[f64]) -> f64, out: &mut GradCheck) {
    let mut v = x.to_vec();
    for i in 0..x.len() {
        let mut f = |xi: f64| {
            v[i] = xi;
            loss(&v)
        };
        let n = central(&mut f, x[i]);
        v[i] = x[i];
        out.record(|| format!("{name} input {i}"), grad[i], n);
    }
}

fn linear_params(l: &mut Linear) -> Vec<&mut [f64]> {
    let mut v = Vec::new();
    l.collect_mut(&mut v);
    v
}

fn audio_params(a: &mut AudioEncoder) -> Vec<&mut [f64]> {
    let mut v = Vec::new();
    a.collect_mut(&mut v);
    v
}

fn text_params(t: &mut TextEncoder) -> Vec<&mut [f64]> {
    let mut v = Vec::new();
    t.collect_mut(&mut v);
    v
}

fn mm_params(h: &mut MultimodalHead) -> Vec<&mut [f64]> {
    linear_params(&mut h.affine)
}

fn th_params(h: &mut TextHead) -> Vec<&mut [f64]> {
    linear_params(&mut h.affine)
}

fn adv_params(a: &mut Adversary) -> Vec<&mut [f64]> {
    let mut v = Vec::new();
    a.collect_mut(&mut v);
    v
}

fn model_params(p: &mut ModelParams) -> Vec<&mut [f64]> {
    p.tensors_mut()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn grad_cross_entropy(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    for _ in 0..50 {
        let z = rand_vec(&mut r, 4, 5.0);
        let y = r.random_range(0..4);
        check_input("cross_entropy", &z, &cross_entropy_grad(&z, y), &|v| cross_entropy(v, y), &mut out);
        // Both summands of the classification loss share this gradient form.
        let s = rand_vec(&mut r, 4, 5.0);
        check_input(
            "classification_loss (factual)",
            &z,
            &cross_entropy_grad(&z, y),
            &|v| classification_loss(v, &s, y).unwrap(),
            &mut out,
        );
        check_input(
            "classification_loss (counterfactual)",
            &s,
            &cross_entropy_grad(&s, y),
            &|v| classification_loss(&z, v, y).unwrap(),
            &mut out,
        );
    }
    out
}

pub fn grad_consistency(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    for _ in 0..50 {
        let p = rand_vec(&mut r, 4, 4.0);
        let q = rand_vec(&mut r, 4, 4.0);
        check_input("consistency_loss", &p, &consistency_loss_grad(&p, &q), &|v| consistency_loss(v, &q), &mut out);
    }
    out
}

pub fn grad_linear(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    let l = Linear::init(7, 5, &mut r);
    let x = rand_vec(&mut r, 7, 1.0);
    let w = rand_vec(&mut r, 5, 1.0);
    let mut g = Linear::zeros(7, 5);
    let dx = l.backward(ArrayView1::from(&x), ArrayView1::from(&w), &mut g);
    let loss = |m: &Linear| dot(m.forward(ArrayView1::from(&x)).as_slice().unwrap(), &w);
    check_params("linear", &l, linear_params, &mut g, &loss, &mut out);
    check_input(
        "linear",
        &x,
        dx.as_slice().unwrap(),
        &|v| dot(l.forward(ArrayView1::from(v)).as_slice().unwrap(), &w),
        &mut out,
    );
    out
}

pub fn grad_audio_encoder(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    let spec = EncoderSpec { hidden_dims: vec![12, 10], embed_dim: 6, ..EncoderSpec::toy_audio(9, seed) };
    let enc = AudioEncoder::from_spec(&spec).unwrap();
    for _ in 0..3 {
        let x = rand_vec(&mut r, 9, 2.0);
        let w = rand_vec(&mut r, 6, 1.0);
        let (_, trace) = enc.forward(&x).unwrap();
        let mut g = enc.zeros_like();
        let dx = enc.backward(&trace, ArrayView1::from(&w), &mut g);
        let loss = |m: &AudioEncoder| dot(m.encode(&x).unwrap().as_slice().unwrap(), &w);
        check_params("audio encoder", &enc, audio_params, &mut g, &loss, &mut out);
        check_input(
            "audio encoder",
            &x,
            dx.as_slice().unwrap(),
            &|v| dot(enc.encode(v).unwrap().as_slice().unwrap(), &w),
            &mut out,
        );
    }
    out
}

pub fn grad_text_encoder(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    let spec = EncoderSpec { embed_dim: 5, ..EncoderSpec::toy_text(11, seed) };
    let enc = TextEncoder::from_spec(&spec).unwrap();
    let tokens = TokenSequence { ids: vec![3, 0, 7, 3, 10] };
    let w = rand_vec(&mut r, 5, 1.0);
    let mut g = enc.zeros_like();
    enc.backward(&tokens, ArrayView1::from(&w), &mut g);
    let loss = |m: &TextEncoder| dot(m.encode(&tokens).unwrap().as_slice().unwrap(), &w);
    check_params("text encoder", &enc, text_params, &mut g, &loss, &mut out);
    out
}

pub fn grad_heads(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    let mm = MultimodalHead::new(Linear::init(10, 4, &mut r), 6);
    let (a, t) = (rand_vec(&mut r, 6, 1.0), rand_vec(&mut r, 4, 1.0));
    let w = rand_vec(&mut r, 4, 1.0);
    let mut g = MultimodalHead::new(Linear::zeros(10, 4), 6);
    let (da, dt) = mm.backward(ArrayView1::from(&a), ArrayView1::from(&t), ArrayView1::from(&w), &mut g);
    let f = |m: &MultimodalHead, a: &[f64], t: &[f64]| {
        dot(m.forward(ArrayView1::from(a), ArrayView1::from(t)).unwrap().as_slice().unwrap(), &w)
    };
    check_params("multimodal head", &mm, mm_params, &mut g, &|m| f(m, &a, &t), &mut out);
    check_input("multimodal head audio", &a, da.as_slice().unwrap(), &|v| f(&mm, v, &t), &mut out);
    check_input("multimodal head text", &t, dt.as_slice().unwrap(), &|v| f(&mm, &a, v), &mut out);

    let th = TextHead { affine: Linear::init(5, 4, &mut r) };
    let e = rand_vec(&mut r, 5, 1.0);
    let mut g = TextHead { affine: Linear::zeros(5, 4) };
    let de = th.backward(ArrayView1::from(&e), ArrayView1::from(&w), &mut g);
    let f = |m: &TextHead, e: &[f64]| dot(m.forward(ArrayView1::from(e)).unwrap().as_slice().unwrap(), &w);
    check_params("text head", &th, th_params, &mut g, &|m| f(m, &e), &mut out);
    check_input("text head", &e, de.as_slice().unwrap(), &|v| f(&th, v), &mut out);
    out
}

/// Fusion `z_m ⊙ σ(z_t)` against its closed-form partials.
pub fn grad_fusion(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    for _ in 0..50 {
        let zt = rand_vec(&mut r, 4, 6.0);
        let zm = rand_vec(&mut r, 4, 6.0);
        let w = rand_vec(&mut r, 4, 1.0);
        let s: Vec<f64> = zt.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let d_zm: Vec<f64> = (0..4).map(|c| w[c] * s[c]).collect();
        let d_zt: Vec<f64> = (0..4).map(|c| w[c] * zm[c] * s[c] * (1.0 - s[c])).collect();
        check_input("fuse z_m", &zm, &d_zm, &|v| dot(&fuse(&zt, v).unwrap(), &w), &mut out);
        check_input("fuse z_t", &zt, &d_zt, &|v| dot(&fuse(v, &zm).unwrap(), &w), &mut out);
        let cfg = DebiasConfig::default();
        let d_cf: Vec<f64> = (0..4).map(|c| w[c] * s[c] * (1.0 - s[c])).collect();
        check_input("counterfactual branch", &zt, &d_cf, &|v| dot(&counterfactual_branch(v, &cfg), &w), &mut out);
    }
    out
}

/// Adversary behind gradient reversal: parameter gradients are true
/// gradients; the input gradient is the true gradient times `-coefficient`.
pub fn grad_adversary(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck::default();
    let cfg = AdversaryConfig { targets: Attribute::ALL[..4].iter().copied().collect(), ..Default::default() };
    let adv = Adversary::init(&cfg, &mut r).unwrap();
    for coef in [1.0, 0.5, 2.0] {
        let grl = GradientReversal { coefficient: coef };
        let x = rand_vec(&mut r, 4, 3.0);
        let w: BTreeMap<Attribute, Vec<f64>> =
            adv.heads.iter().map(|(a, h)| (*a, rand_vec(&mut r, h.output_dim(), 1.0))).collect();
        let loss = |m: &Adversary, x: &[f64]| {
            let o = m.forward(x, &grl).unwrap();
            o.logits.iter().map(|(a, l)| dot(l, &w[a])).sum::<f64>()
        };
        let o = adv.forward(&x, &grl).unwrap();
        let mut g = adv.zeros_like();
        let dx = adv.backward(&o, &w, &grl, &mut g);
        check_params("adversary", &adv, adv_params, &mut g, &|m| loss(m, &x), &mut out);
        let unreversed: Vec<f64> = dx.iter().map(|d| -d / coef).collect();
        check_input("adversary through reversal", &x, &unreversed, &|v| loss(&adv, v), &mut out);
    }
    out
}

fn tiny_bundle(seed: u64, counterfactual: bool) -> (ModelBundle, Vec<PreparedExample>) {
    let templates = TemplateTable::default();
    let vocab = Vocabulary::from_templates(&templates);
    let cfg = cfdebias::model::ModelConfig {
        embed_dim: 6,
        audio_hidden: vec![8],
        adversary_hidden: 5,
        adversary_targets: Attribute::ALL[..4].iter().copied().collect(),
        counterfactual,
        ..cfdebias::model::ModelConfig::new(5)
    };
    let bundle = ModelBundle::new(cfg, vocab.clone(), seed).unwrap();
    let synth = SynthConfig { n_train: 6, n_ood: 1, feature_dim: 5, seed, ..Default::default() };
    let (cycles, _) = generate_synthetic(&synth).unwrap();
    (bundle, prepare_examples(&cycles, &vocab, &templates, 64).unwrap())
}

/// Independent forward evaluation of the full objective with the factual
/// side of the KL term held at `kl_target`.
fn objective_value(
    b: &ModelBundle,
    input: &ExampleInput<'_>,
    label: usize,
    attrs: &BTreeMap<Attribute, usize>,
    obj: &Objective,
    kl_target: &[f64],
) -> f64 {
    let o = b.branch_outputs(input).unwrap();
    let mut l = obj.lambda_ce * cross_entropy(&o.y_tm, label);
    if b.config.counterfactual {
        l += obj.lambda_ce * cross_entropy(&o.y_tmstar, label)
            + obj.lambda_kl * consistency_loss(&o.y_tmstar, kl_target);
    }
    if obj.adversary.enabled {
        l += cross_entropy(&o.z_t, label);
        let adv = b.adversary_forward(&o.z_t, obj.adversary.grl_coefficient).unwrap();
        for a in &obj.adversary.targets {
            l += obj.adversary.lambda(*a) * cross_entropy(&adv.logits[a], attrs[a]);
        }
    }
    l
}

/// Whole-model gradient with every loss term active. Reversal makes the
/// analytic gradient differ from the objective's true gradient on the text
/// branch; with `g_c` the analytic gradient at coefficient `c`, the true
/// gradient is `2·g_0 − g_1`, and `g_c = g_0 − c·(g_true − g_0)` for any `c`.
pub fn grad_model(seed: u64, counterfactual: bool) -> GradCheck {
    let (bundle, examples) = tiny_bundle(seed, counterfactual);
    let mut out = GradCheck::default();
    let objective = |coef: f64| Objective {
        lambda_ce: 1.0,
        lambda_kl: 1.0,
        adversary: AdversaryConfig {
            grl_coefficient: coef,
            lambda_age: 0.3,
            lambda_sex: 0.2,
            lambda_location: 0.5,
            lambda_device: 0.7,
            targets: Attribute::ALL[..4].iter().copied().collect(),
            ..Default::default()
        },
    };
    // Distinct fusion and text-only prompts exercise the two text encoders
    // independently.
    for k in 0..2 {
        let (ex, other) = (&examples[k], &examples[k + 2]);
        let input = ExampleInput { features: &ex.features, fusion_tokens: &ex.tokens, nde_tokens: &other.tokens };
        let attrs = &ex.attr_labels;
        let kl_target = bundle.branch_outputs(&input).unwrap().y_tm;
        let grad_at = |coef: f64| {
            let mut g = bundle.params.zeros_like();
            bundle.loss_and_grad(&input, ex.label, attrs, &objective(coef), 1.0, &mut g).unwrap();
            g.tensors().into_iter().map(|t| t.data.to_vec()).collect::<Vec<_>>()
        };
        let (g0, g1, ghalf) = (grad_at(0.0), grad_at(1.0), grad_at(0.5));
        let obj = objective(1.0);
        let mut b = bundle.clone();
        let names: Vec<String> = bundle.params.tensors().into_iter().map(|t| t.name).collect();
        for t in 0..g0.len() {
            for i in 0..g0[t].len() {
                let x0 = model_params(&mut b.params)[t][i];
                let mut f = |x: f64| {
                    model_params(&mut b.params)[t][i] = x;
                    objective_value(&b, &input, ex.label, attrs, &obj, &kl_target)
                };
                let n = central(&mut f, x0);
                model_params(&mut b.params)[t][i] = x0;
                let what = || format!("{} entry {i}", names[t]);
                out.reversed += (g0[t][i] != g1[t][i]) as usize;
                out.record(what, 2.0 * g0[t][i] - g1[t][i], n);
                let reversed_half = g0[t][i] - 0.5 * (n - g0[t][i]);
                if (ghalf[t][i] - reversed_half).abs() > 1e-6 * (1.0 + n.abs()) {
                    out.record(|| format!("{} entry {i} at coefficient 0.5", names[t]), ghalf[t][i], reversed_half);
                }
            }
        }
    }
    out
}

pub fn gradient_suite() -> (GradCheck, bool) {
    let mut all = GradCheck::default();
    all.merge("cross_entropy", grad_cross_entropy(1));
    all.merge("consistency", grad_consistency(2));
    all.merge("linear", grad_linear(3));
    all.merge("audio encoder", grad_audio_encoder(4));
    all.merge("text encoder", grad_text_encoder(5));
    all.merge("heads", grad_heads(6));
    all.merge("fusion", grad_fusion(7));
    all.merge("adversary", grad_adversary(8));
    all.merge("model (counterfactual)", grad_model(9, true));
    all.merge("model (plain)", grad_model(10, false));
    (all, reversal_identity(11))
}

/// Gradient reversal forward leaves every bit pattern unchanged.
pub fn reversal_identity(seed: u64) -> bool {
    let mut r = rng(seed);
    (0..1000).all(|_| {
        let x: Vec<f64> = (0..8).map(|_| f64::from_bits(r.random::<u64>() >> 2)).collect();
        let y = cfdebias::adversarial::gradient_reverse(&x, r.random_range(0.0..3.0));
        let z = GradientReversal { coefficient: 1.7 }.forward(&x);
        x.iter().zip(&y).zip(&z).all(|((a, b), c)| a.to_bits() == b.to_bits() && a.to_bits() == c.to_bits())
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Specificity and sensitivity by direct tally over `(truth, prediction)`.
pub fn brute_force_metrics(pairs: &[(usize, usize)]) -> Option<(f64, f64, f64)> {
    let normals: Vec<_> = pairs.iter().filter(|(t, _)| *t == 0).collect();
    let abnormal: Vec<_> = pairs.iter().filter(|(t, _)| *t != 0).collect();
    if normals.is_empty() || abnormal.is_empty() {
        return None;
    }
    let sp = 100.0 * normals.iter().filter(|(_, p)| *p == 0).count() as f64 / normals.len() as f64;
    let se = 100.0 * abnormal.iter().filter(|(t, p)| t == p).count() as f64 / abnormal.len() as f64;
    Some((sp, se, (sp + se) / 2.0))
}

pub fn metric_fixtures(seed: u64, n: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut compared = 0;
    for k in 0..n {
        let len = r.random_range(2..=200);
        let pairs: Vec<(usize, usize)> = (0..len).map(|_| (r.random_range(0..4), r.random_range(0..4))).collect();
        let counts = ConfusionCounts::from_pairs(pairs.iter().copied()).map_err(|e| e.to_string())?;
        match (brute_force_metrics(&pairs), compute_metrics(&counts)) {
            (Some((sp, se, score)), Ok(m)) => {
                if (m.sp, m.se, m.score) != (sp, se, score) {
                    return Err(format!("fixture {k}: library {m:?}, tally {:?}", (sp, se, score)));
                }
                compared += 1;
            }
            (None, Err(_)) => {}
            (a, b) => return Err(format!("fixture {k}: support disagreement {a:?} vs {b:?}")),
        }
    }
    Ok(compared)
}

/// Reported Score arithmetic of the two headline rows.
pub fn reported_scores() -> Result<(), String> {
    for ((sp, se), score) in [((84.42, 44.83), 64.63), ((82.02, 41.90), 61.96)] {
        let got = round2((sp + se) / 2.0);
        if got != score {
            return Err(format!("({sp} + {se}) / 2 rounds to {got}, expected {score}"));
        }
        // Same numbers routed through the confusion-matrix path: 10000
        // normals and 10000 abnormals give two-decimal percentages exactly.
        let mut c = ConfusionCounts::default();
        let (n_sp, n_se) = ((sp * 100.0_f64).round() as u64, (se * 100.0_f64).round() as u64);
        c.matrix[0][0] = n_sp;
        c.matrix[0][1] = 10_000 - n_sp;
        c.matrix[1][1] = n_se;
        c.matrix[1][0] = 10_000 - n_se;
        let m = compute_metrics(&c).map_err(|e| e.to_string())?;
        if round2(m.score) != score || round2(m.sp) != sp || round2(m.se) != se {
            return Err(format!("compute_metrics gave {m:?} for Sp {sp}, Se {se}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Causal algebra
// ---------------------------------------------------------------------------

/// Logit-scale operands; the absolute bound below assumes magnitudes where
/// three roundings stay under 1e-12.
fn rand_logit(r: &mut impl Rng) -> f64 {
    r.random_range(-100.0..100.0)
}

pub fn causal_suite(n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for k in 0..n {
        let (a, b, c) = (rand_logit(&mut r), rand_logit(&mut r), rand_logit(&mut r));
        let e = causal_effects(&[a], &[b], &[c]).map_err(|e| e.to_string())?;
        let gap = (e.tie[0] - (e.te[0] - e.nde[0])).abs();
        if gap > 1e-12 {
            return Err(format!("triple {k}: ({a}, {b}, {c}) gives tie − (te − nde) = {gap:e}"));
        }
    }
    for k in 0..n / 10 {
        let zt: Vec<f64> = (0..4).map(|_| r.random_range(-40.0..40.0)).collect();
        let zm: Vec<f64> = (0..4).map(|_| r.random_range(-40.0..40.0)).collect();
        let cf = counterfactual_branch(&zt, &DebiasConfig::default());
        let fused_one = fuse(&zt, &[1.0; 4]).map_err(|e| e.to_string())?;
        if cf.iter().zip(&fused_one).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("case {k}: counterfactual branch differs from fuse(z_t, 1)"));
        }
        let y_tm = fuse(&zt, &zm).map_err(|e| e.to_string())?;
        let d0 = debiased_inference(&y_tm, &cf, 0.0).map_err(|e| e.to_string())?;
        if d0.scores.iter().zip(&y_tm).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("case {k}: α = 0 does not return y_tm"));
        }
        let d1 = debiased_inference(&y_tm, &cf, 1.0).map_err(|e| e.to_string())?;
        let tie =
            causal_effects(&y_tm, &cf, &reference_outcome(4, &DebiasConfig::default())).map_err(|e| e.to_string())?.tie;
        if d1.scores.iter().zip(&tie).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("case {k}: α = 1 does not return the TIE"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

pub fn full_record() -> MetadataRecord {
    MetadataRecord {
        age_group: AgeGroup::Adult,
        sex: Sex::Male,
        location: Location::Trachea,
        device: Device::Meditron,
        bmi: Some(24.3),
        ..MetadataRecord::unknown()
    }
}

/// Golden prompts: every attribute combination the built-in templates render.
pub fn golden_records() -> Vec<MetadataRecord> {
    let mut out = vec![MetadataRecord::unknown(), full_record()];
    for (i, loc) in Location::KNOWN.iter().enumerate() {
        let dev = Device::SEEN[i % Device::SEEN.len()].clone();
        out.push(MetadataRecord {
            age_group: if i % 2 == 0 { AgeGroup::Pediatric } else { AgeGroup::Adult },
            sex: if i % 3 == 0 { Sex::Female } else { Sex::Male },
            location: *loc,
            device: dev,
            weight_kg: (i % 2 == 0).then_some(20.0 + i as f64),
            height_cm: (i % 4 == 0).then_some(110.5),
            ..MetadataRecord::unknown()
        });
    }
    out.push(MetadataRecord { device: Device::YuntingIi, ..MetadataRecord::unknown() });
    out
}

/// Per-attribute replacement frequency over `draws` augmentations of a fully
/// specified prompt at probability `p`.
pub fn replacement_rates(p: f64, draws: usize, seed: u64) -> BTreeMap<Attribute, f64> {
    let t = TemplateTable::default();
    let prompt = build_prompt(&full_record(), &t);
    let sensitive: BTreeSet<Attribute> = Attribute::ALL.into_iter().collect();
    let mut hits: BTreeMap<Attribute, usize> = BTreeMap::new();
    let mut r = cfdebias::rng::substream(seed, cfdebias::rng::Stream::Augmentation);
    for _ in 0..draws {
        let aug = counterfactual_augment(&prompt, p, &sensitive, &t, &mut r).unwrap();
        for (before, after) in prompt.sentences().iter().zip(aug.sentences()) {
            if before.text != after.text {
                *hits.entry(before.attribute).or_default() += 1;
            }
        }
    }
    prompt
        .sentences()
        .iter()
        .map(|s| (s.attribute, hits.get(&s.attribute).copied().unwrap_or(0) as f64 / draws as f64))
        .collect()
}

pub fn augmentation_identity_at_zero() -> bool {
    let t = TemplateTable::default();
    let sensitive: BTreeSet<Attribute> = Attribute::ALL.into_iter().collect();
    let mut r = rng(5);
    golden_records().iter().all(|rec| {
        let p = build_prompt(rec, &t);
        counterfactual_augment(&p, 0.0, &sensitive, &t, &mut r).unwrap() == p
    })
}

/// The quoted example pair: the adult sentence and its placeholder.
pub fn age_pair_verbatim() -> Result<(), String> {
    let t = TemplateTable::default();
    let rec = MetadataRecord { age_group: AgeGroup::Adult, ..MetadataRecord::unknown() };
    let p = build_prompt(&rec, &t);
    let before = p.sentence(Attribute::Age).unwrap_or_default().to_string();
    let sensitive = BTreeSet::from([Attribute::Age]);
    let after = counterfactual_augment(&p, 1.0, &sensitive, &t, &mut rng(0)).map_err(|e| e.to_string())?;
    let after = after.sentence(Attribute::Age).unwrap_or_default().to_string();
    let expected = ("This patient is an adult patient.", "This patient\u{2019}s age is unknown.");
    if (before.as_str(), after.as_str()) == expected {
        Ok(())
    } else {
        Err(format!("got ({before:?}, {after:?})"))
    }
}

// ---------------------------------------------------------------------------
// ICBHI-layout fixtures
// ---------------------------------------------------------------------------

/// Writes a corpus directory in the ICBHI layout. Recording `k` holds the
/// cycles `labels[k]`, each 0.4 s long, over a 220 Hz tone.
pub fn write_icbhi_fixture(dir: &Path, recordings: &[Vec<(bool, bool)>], with_audio: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let mut demo = String::new();
    let devices = ["Meditron", "LittC2SE", "Litt3200", "AKGC417L"];
    let locations = ["Tc", "Al", "Ar", "Pl", "Pr", "Ll", "Lr"];
    for (k, cycles) in recordings.iter().enumerate() {
        let patient = 101 + k;
        let stem = format!("{patient}_1b1_{}_sc_{}", locations[k % locations.len()], devices[k % devices.len()]);
        let mut ann = String::new();
        for (i, (c, w)) in cycles.iter().enumerate() {
            let start = 0.4 * i as f64;
            ann.push_str(&format!("{:.3}\t{:.3}\t{}\t{}\n", start, start + 0.4, *c as u8, *w as u8));
        }
        std::fs::write(dir.join(format!("{stem}.txt")), ann).unwrap();
        if with_audio {
            let sr = 4000;
            let n = (0.4 * sr as f64 * cycles.len() as f64).ceil() as usize + 1;
            let tone: Vec<f64> =
                (0..n).map(|i| (2.0 * std::f64::consts::PI * 220.0 * i as f64 / sr as f64).sin() * 0.3).collect();
            write_wav_f32(&dir.join(format!("{stem}.wav")), &tone, sr).unwrap();
        }
        if k % 2 == 0 {
            demo.push_str(&format!("{patient} 70 M 26.4 NA NA\n"));
        } else {
            demo.push_str(&format!("{patient} 6 F NA 21.5 118.0\n"));
        }
    }
    std::fs::write(dir.join(icbhi::DEMOGRAPHICS_FILE), demo).unwrap();
}

/// The miniature corpus: 1050 cycles split 523/308/127/92 across 30
/// recordings of 35 cycles each.
pub fn miniature_labels() -> (Vec<Vec<(bool, bool)>>, [usize; 4]) {
    let counts = [523usize, 308, 127, 92];
    let mut flat = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        let flags = match class {
            0 => (false, false),
            1 => (true, false),
            2 => (false, true),
            _ => (true, true),
        };
        flat.extend(std::iter::repeat_n(flags, n));
    }
    // Interleave so every recording mixes classes.
    let mut r = rng(42);
    for i in (1..flat.len()).rev() {
        flat.swap(i, r.random_range(0..=i));
    }
    (flat.chunks(35).map(<[_]>::to_vec).collect(), counts)
}

pub fn miniature_tally(dir: &Path) -> Result<ClassSummary, String> {
    let (recs, _) = miniature_labels();
    write_icbhi_fixture(dir, &recs, false);
    icbhi::tally_annotations(dir).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Reference single-branch trainer
// ---------------------------------------------------------------------------

/// Plain multimodal classifier trained with cross-entropy only: audio MLP,
/// fusion-branch bag-of-tokens, linear head. Written against raw arrays so it
/// shares no training code with the library.
pub struct ReferenceTrainer {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    pub table: Vec<Vec<f64>>,
    pub head: (Vec<Vec<f64>>, Vec<f64>),
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

fn matvec(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(row, bi)| dot(row, x) + bi).collect()
}

impl ReferenceTrainer {
    pub fn from_bundle(b: &ModelBundle) -> Self {
        let lin = |l: &Linear| (l.weight.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(), l.bias.to_vec());
        Self {
            layers: b.params.audio.layers.iter().map(lin).collect(),
            table: b.params.fusion_text.table.rows().into_iter().map(|r| r.to_vec()).collect(),
            head: lin(&b.params.multimodal_head.affine),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    fn forward(&self, x: &[f64], tokens: &[u32]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut acts = vec![x.to_vec()];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut y = matvec(w, b, acts.last().unwrap());
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        let dim = self.table[0].len();
        let mut text = vec![0.0; dim];
        for &id in tokens {
            for (t, e) in text.iter_mut().zip(&self.table[id as usize]) {
                *t += e;
            }
        }
        text.iter_mut().for_each(|t| *t /= tokens.len() as f64);
        let joint: Vec<f64> = acts.last().unwrap().iter().chain(&text).copied().collect();
        let logits = matvec(&self.head.0, &self.head.1, &joint);
        (acts, joint, logits)
    }

    pub fn predict(&self, x: &[f64], tokens: &[u32]) -> (Vec<f64>, usize) {
        let logits = self.forward(x, tokens).2;
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        (logits, best)
    }

    /// Flat gradient in tensor order (layers, table, head) for one example.
    fn grads(&self, x: &[f64], tokens: &[u32], label: usize, scale: f64, acc: &mut [Vec<f64>]) {
        let (acts, joint, logits) = self.forward(x, tokens);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let dlog: Vec<f64> =
            logits.iter().enumerate().map(|(c, l)| scale * ((l - mx).exp() / z - (c == label) as u8 as f64)).collect();
        let nl = self.layers.len();
        let (hw, hb) = (2 * nl + 1, 2 * nl + 2);
        let cols = joint.len();
        for (c, d) in dlog.iter().enumerate() {
            for j in 0..cols {
                acc[hw][c * cols + j] += d * joint[j];
            }
            acc[hb][c] += d;
        }
        let djoint: Vec<f64> = (0..cols).map(|j| (0..dlog.len()).map(|c| self.head.0[c][j] * dlog[c]).sum()).collect();
        let audio_dim = acts.last().unwrap().len();
        let dim = self.table[0].len();
        for &id in tokens {
            for k in 0..dim {
                acc[2 * nl][id as usize * dim + k] += djoint[audio_dim + k] / tokens.len() as f64;
            }
        }
        let mut g = djoint[..audio_dim].to_vec();
        for i in (0..nl).rev() {
            let (w, _) = &self.layers[i];
            let input = &acts[i];
            for (o, go) in g.iter().enumerate() {
                for j in 0..input.len() {
                    acc[2 * i][o * input.len() + j] += go * input[j];
                }
                acc[2 * i + 1][o] += go;
            }
            if i > 0 {
                g = (0..input.len())
                    .map(|j| if input[j] > 0.0 { (0..g.len()).map(|o| w[o][j] * g[o]).sum() } else { 0.0 })
                    .collect();
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<Vec<&mut f64>> {
        let mut out: Vec<Vec<&mut f64>> = Vec::new();
        for (w, b) in &mut self.layers {
            out.push(w.iter_mut().flat_map(|r| r.iter_mut()).collect());
            out.push(b.iter_mut().collect());
        }
        out.push(self.table.iter_mut().flat_map(|r| r.iter_mut()).collect());
        out.push(self.head.0.iter_mut().flat_map(|r| r.iter_mut()).collect());
        out.push(self.head.1.iter_mut().collect());
        out
    }

    fn shapes(&self) -> Vec<usize> {
        let mut s = Vec::new();
        for (w, b) in &self.layers {
            s.push(w.len() * w[0].len());
            s.push(b.len());
        }
        s.push(self.table.len() * self.table[0].len());
        s.push(self.head.0.len() * self.head.0[0].len());
        s.push(self.head.1.len());
        s
    }

    /// One AdamW step on the batch mean (β = 0.9/0.999, ε = 1e-8, decay 1e-4).
    pub fn step(&mut self, batch: &[&PreparedExample], lr: f64) {
        let mut acc: Vec<Vec<f64>> = self.shapes().into_iter().map(|n| vec![0.0; n]).collect();
        for ex in batch {
            self.grads(&ex.features, &ex.tokens.ids, ex.label, 1.0 / batch.len() as f64, &mut acc);
        }
        if self.m.is_empty() {
            self.m = acc.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 1e-4);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        let mut m = std::mem::take(&mut self.m);
        let mut v = std::mem::take(&mut self.v);
        for (t, params) in self.tensors_mut().into_iter().enumerate() {
            for (i, p) in params.into_iter().enumerate() {
                let g = acc[t][i];
                *p -= lr * wd * *p;
                m[t][i] = b1 * m[t][i] + (1.0 - b1) * g;
                v[t][i] = b2 * v[t][i] + (1.0 - b2) * g * g;
                *p -= lr * (m[t][i] / c1) / ((v[t][i] / c2).sqrt() + eps);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Trains the reference with the library's batch order and cosine schedule
/// and returns it.
pub fn reference_train(
    init: &ModelBundle,
    train: &[PreparedExample],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> ReferenceTrainer {
    let mut model = ReferenceTrainer::from_bundle(init);
    let mut order_rng = cfdebias::rng::substream(seed, cfdebias::rng::Stream::DataOrder);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total = (train.len().div_ceil(batch) * epochs) as f64;
    let mut step = 0usize;
    for _ in 0..epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        for chunk in order.chunks(batch) {
            let progress = step as f64 / total;
            let rate = lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let exs: Vec<&PreparedExample> = chunk.iter().map(|&i| &train[i]).collect();
            model.step(&exs, rate);
            step += 1;
        }
    }
    model
}

pub fn logits_of(bundle: &ModelBundle, ex: &PreparedExample) -> Vec<f64> {
    bundle.branch_outputs(&ex.input()).unwrap().y_tm
}

pub fn array(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

// ---------------------------------------------------------------------------
// Data pipeline
// ---------------------------------------------------------------------------

/// The seven raw labels and their merged class.
pub const SPRSOUND_TABLE: [(&str, cfdebias::dataio::Label); 7] = {
    use cfdebias::dataio::Label::*;
    [
        ("Normal", Normal),
        ("Fine Crackle", Crackle),
        ("Coarse Crackle", Crackle),
        ("Wheeze", Wheeze),
        ("Stridor", Wheeze),
        ("Rhonchi", Wheeze),
        ("Wheeze+Crackle", Both),
    ]
};

pub fn sprsound_mapping() -> Result<(), String> {
    for (raw, want) in SPRSOUND_TABLE {
        let got = cfdebias::dataio::sprsound::map_sprsound_label(raw).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("{raw} maps to {got:?}, expected {want:?}"));
        }
    }
    match cfdebias::dataio::sprsound::map_sprsound_label("Poor Quality") {
        Ok(l) => Err(format!("unknown label accepted as {l:?}")),
        Err(_) => Ok(()),
    }
}

/// Output length of `extract_cycle` at 8 s and 48 kHz over windows shorter
/// than, equal to and longer than the target, at several input rates.
pub fn extract_lengths(seed: u64) -> Result<usize, String> {
    use cfdebias::dataio::{extract_cycle, CycleAnnotation, Resampler};
    let mut r = rng(seed);
    let mut checked = 0;
    for sr in [4000.0, 16000.0, 44100.0, 48000.0] {
        for &(dur, method) in &[
            (0.05, Resampler::Linear),
            (2.7, Resampler::Sinc { half_width: 8 }),
            (8.0, Resampler::Linear),
            (13.3, Resampler::Sinc { half_width: 4 }),
        ] {
            let n = (sr * (dur + 1.0)) as usize;
            let signal = rand_vec(&mut r, n, 1.0);
            let start = r.random_range(0.0..0.9);
            let ann = CycleAnnotation { start_s: start, end_s: start + dur, has_crackle: false, has_wheeze: false };
            let out = extract_cycle(&signal, sr, &ann, 8.0, 48000.0, method).map_err(|e| e.to_string())?;
            if out.len() != 384_000 {
                return Err(format!("{dur} s at {sr} Hz gave {} samples", out.len()));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Class percentages of the miniature fixture against the reported training
/// distribution, compared at two decimals.
pub fn miniature_ratios(dir: &Path) -> Result<[f64; 4], String> {
    let summary = miniature_tally(dir)?;
    let (_, counts) = miniature_labels();
    if summary.counts != counts {
        return Err(format!("tally {:?}, written {counts:?}", summary.counts));
    }
    let pct = summary.percentages().map(round2);
    let reported = [49.81, 29.33, 12.10, 8.76];
    if pct != reported {
        return Err(format!("percentages {pct:?}, expected {reported:?}"));
    }
    Ok(pct)
}

// ---------------------------------------------------------------------------
// Loss contracts
// ---------------------------------------------------------------------------

pub fn loss_contracts(pairs: usize, seed: u64) -> Result<(), String> {
    use cfdebias::training::{total_loss, LossComponents, TrainConfig};
    let mut r = rng(seed);
    let target = 2.0 * 4f64.ln();
    for label in 0..4 {
        let c = r.random_range(-50.0..50.0);
        let l = classification_loss(&[c; 4], &[-c; 4], label).map_err(|e| e.to_string())?;
        if (l - target).abs() > 1e-10 {
            return Err(format!("uniform logits ({c}) give {l}, expected {target}"));
        }
    }
    for k in 0..pairs {
        let p = rand_vec(&mut r, 4, 10.0);
        let q = rand_vec(&mut r, 4, 10.0);
        let same = consistency_loss(&p, &p);
        if same != 0.0 {
            return Err(format!("pair {k}: KL(p, p) = {same:e}"));
        }
        let kl = consistency_loss(&p, &q);
        if kl.is_nan() || kl < 0.0 {
            return Err(format!("pair {k}: KL = {kl:e} for {p:?}, {q:?}"));
        }
    }
    let cfg = TrainConfig::default();
    if (cfg.lambda_ce, cfg.lambda_kl) != (1.0, 1.0) {
        return Err(format!("default weights ({}, {})", cfg.lambda_ce, cfg.lambda_kl));
    }
    for _ in 0..1000 {
        let c = LossComponents {
            ce: r.random_range(0.0..10.0),
            kl: r.random_range(0.0..5.0),
            adv: r.random_range(0.0..10.0),
        };
        let t = total_loss(&c, &cfg).map_err(|e| e.to_string())?;
        if (t - (c.ce + c.kl + c.adv)).abs() > 1e-10 {
            return Err(format!("{c:?} totals {t}"));
        }
    }
    Ok(())
}

/// Configuration under which the framework reduces to plain multimodal
/// cross-entropy training: no augmentation, no KL, no adversary, no
/// counterfactual fusion, α = 0.
pub fn degenerate_config() -> cfdebias::training::TrainConfig {
    let mut cfg = cfdebias::training::TrainConfig {
        augment_p: 0.0,
        lambda_kl: 0.0,
        counterfactual: false,
        selection_alpha: 0.0,
        lr: 3e-3,
        epochs: 4,
        batch_size: 8,
        embed_dim: 8,
        audio_hidden: vec![12],
        seed: 5,
        ..Default::default()
    };
    cfg.adversary.enabled = false;
    cfg.adversary.lambda_location = 0.0;
    cfg.adversary.lambda_device = 0.0;
    cfg
}

/// Trains the library and the reference on the same data and initial
/// parameters; returns the largest parameter and logit gaps, the number of
/// class disagreements, and how far training moved the head weights.
pub fn degenerate_pipeline() -> Result<(f64, f64, usize, f64), String> {
    use cfdebias::training::{split_examples, train};
    let cfg = degenerate_config();
    let synth =
        SynthConfig { n_train: 90, n_ood: 30, feature_dim: 10, valid_fraction: 0.0, seed: 5, ..Default::default() };
    let (cycles, ood) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let templates = TemplateTable::default();
    let vocab = Vocabulary::from_templates(&templates);
    let bundle = ModelBundle::new(cfg.model_config(10), vocab.clone(), cfg.seed).map_err(|e| e.to_string())?;
    let (tr, va) =
        split_examples(prepare_examples(&cycles, &vocab, &templates, cfg.max_tokens).map_err(|e| e.to_string())?);
    if !va.is_empty() {
        return Err("fixture has a validation split".into());
    }
    let init_head = bundle.params.multimodal_head.affine.weight.clone();
    let reference = reference_train(&bundle, &tr, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed);
    let trained = train(bundle, &tr, &va, &cfg).map_err(|e| e.to_string())?.best;

    let mut param_gap = 0.0f64;
    let lib = &trained.params;
    for (layer, (w, b)) in lib.audio.layers.iter().zip(&reference.layers) {
        for (x, y) in layer.weight.iter().zip(w.iter().flatten()).chain(layer.bias.iter().zip(b)) {
            param_gap = param_gap.max((x - y).abs());
        }
    }
    for (x, y) in lib.fusion_text.table.iter().zip(reference.table.iter().flatten()) {
        param_gap = param_gap.max((x - y).abs());
    }
    let head = &lib.multimodal_head.affine;
    for (x, y) in
        head.weight.iter().zip(reference.head.0.iter().flatten()).chain(head.bias.iter().zip(&reference.head.1))
    {
        param_gap = param_gap.max((x - y).abs());
    }

    let test = prepare_examples(&ood, &vocab, &templates, cfg.max_tokens).map_err(|e| e.to_string())?;
    let mut logit_gap = 0.0f64;
    let mut disagreements = 0;
    for ex in tr.iter().chain(&test) {
        let out = trained.branch_outputs(&ex.input()).map_err(|e| e.to_string())?;
        let (ref_logits, ref_class) = reference.predict(&ex.features, &ex.tokens.ids);
        for (a, b) in out.y_tm.iter().zip(&ref_logits) {
            logit_gap = logit_gap.max((a - b).abs());
        }
        let class = debiased_inference(&out.y_tm, &out.y_tmstar, cfg.selection_alpha).map_err(|e| e.to_string())?.class;
        disagreements += (class != ref_class) as usize;
    }
    let moved = (&trained.params.multimodal_head.affine.weight - &init_head).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok((param_gap, logit_gap, disagreements, moved))
}
