use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Label, LabeledCycle, Split};
use crate::metadata::{AgeGroup, Attribute, Device, Location, MetadataRecord, Sex};
use crate::rng::{substream, Stream};
use crate::N_CLASSES;

/// Class proportions of the in-distribution training corpus.
pub const DEFAULT_CLASS_RATIOS: [f64; 4] = [0.4981, 0.2933, 0.1210, 0.0876];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_ood: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Attribute whose value tracks abnormality.
    pub confound_attr: Attribute,
    /// `P[attr = a1 | abnormal]` in the training split; `P[attr = a1 | normal]`
    /// is `1 - rho_train`.
    pub rho_train: f64,
    pub rho_ood: f64,
    /// Replace every non-`a1` value in the OOD split with a value absent from
    /// training. Only the device attribute has such a value.
    pub ood_unseen_attr_value: bool,
    pub class_ratios: [f64; 4],
    pub noise_sigma: f64,
    /// Fraction of in-distribution examples tagged as the validation split.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_ood: 1000,
            n_classes: N_CLASSES,
            feature_dim: 32,
            confound_attr: Attribute::Device,
            rho_train: 0.9,
            rho_ood: 0.1,
            ood_unseen_attr_value: true,
            class_ratios: DEFAULT_CLASS_RATIOS,
            noise_sigma: 0.75,
            valid_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.n_train == 0 || self.n_ood == 0 || self.feature_dim == 0 {
            return bad("n_train, n_ood and feature_dim must be positive".into());
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_ood", self.rho_ood)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} must lie in [0, 1], got {rho}"));
            }
        }
        let sum: f64 = self.class_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_ratios.iter().any(|r| r.is_nan() || *r < 0.0) {
            return bad(format!("class_ratios must be non-negative and sum to 1, got sum {sum}"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)".into());
        }
        match self.confound_attr {
            Attribute::Anthropometrics => return bad("anthropometrics cannot be the confounded attribute".into()),
            Attribute::Device => {}
            a if self.ood_unseen_attr_value => {
                return bad(format!("`{a}` has no value outside the training set; disable ood_unseen_attr_value"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Confounded value `a1` and the alternatives drawn otherwise.
fn confound_values(attr: Attribute) -> (MetadataRecord, Vec<MetadataRecord>) {
    let with = |f: &dyn Fn(&mut MetadataRecord)| {
        let mut r = MetadataRecord::unknown();
        f(&mut r);
        r
    };
    match attr {
        Attribute::Age => {
            (with(&|r| r.age_group = AgeGroup::Adult), vec![with(&|r| r.age_group = AgeGroup::Pediatric)])
        }
        Attribute::Sex => (with(&|r| r.sex = Sex::Male), vec![with(&|r| r.sex = Sex::Female)]),
        Attribute::Location => (
            with(&|r| r.location = Location::Trachea),
            Location::KNOWN[1..].iter().map(|&l| with(&|r| r.location = l)).collect(),
        ),
        _ => (
            with(&|r| r.device = Device::Akgc417l),
            Device::SEEN[..3].iter().map(|d| with(&|r| r.device = d.clone())).collect(),
        ),
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    templates: Vec<Vec<f64>>,
    classes: WeightedIndex<f64>,
    noise: Normal<f64>,
}

impl Sampler<'_> {
    fn example<R: Rng>(&self, rng: &mut R, rho: f64, unseen: bool, id: String, split: Split) -> LabeledCycle {
        let label = Label::ALL[self.classes.sample(rng)];
        let signal = self.templates[label.index()].iter().map(|&t| t + self.noise.sample(rng)).collect();

        let mut record = MetadataRecord {
            age_group: *AgeGroup::KNOWN.choose(rng).expect("nonempty"),
            sex: *Sex::KNOWN.choose(rng).expect("nonempty"),
            location: *Location::KNOWN.choose(rng).expect("nonempty"),
            device: Device::SEEN.choose(rng).expect("nonempty").clone(),
            ..MetadataRecord::unknown()
        };
        let p_a1 = if label.is_abnormal() { rho } else { 1.0 - rho };
        let (a1, others) = confound_values(self.cfg.confound_attr);
        let value = if rng.random_bool(p_a1) {
            a1
        } else if unseen {
            MetadataRecord { device: Device::YuntingIi, ..MetadataRecord::unknown() }
        } else {
            others.choose(rng).expect("nonempty").clone()
        };
        match self.cfg.confound_attr {
            Attribute::Age => record.age_group = value.age_group,
            Attribute::Sex => record.sex = value.sex,
            Attribute::Location => record.location = value.location,
            _ => record.device = value.device,
        }
        match record.age_group {
            AgeGroup::Adult => record.bmi = Some(round1(rng.random_range(18.0..35.0))),
            _ => {
                record.weight_kg = Some(round1(rng.random_range(10.0..60.0)));
                record.height_cm = Some(round1(rng.random_range(80.0..170.0)));
            }
        }
        LabeledCycle { signal, label, metadata: record, source_split: split, patient_id: id }
    }
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Generates the in-distribution and shifted splits. Features are a unit-norm
/// class template plus isotropic Gaussian noise; metadata is independent of
/// the label except for `confound_attr`. One cycle per patient.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<LabeledCycle>, Vec<LabeledCycle>), DataError> {
    cfg.validate()?;
    let mut trng = substream(cfg.seed, Stream::SynthTemplates);
    let templates = (0..N_CLASSES)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| trng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let sampler = Sampler {
        cfg,
        templates,
        classes: WeightedIndex::new(cfg.class_ratios).map_err(|e| DataError::InvalidConfig(e.to_string()))?,
        noise: Normal::new(0.0, cfg.noise_sigma).map_err(|e| DataError::InvalidConfig(e.to_string()))?,
    };
    let mut rng = substream(cfg.seed, Stream::SynthSamples);
    let n_valid = (cfg.n_train as f64 * cfg.valid_fraction).round() as usize;
    let train = (0..cfg.n_train)
        .map(|i| {
            let split = if i >= cfg.n_train - n_valid { Split::Valid } else { Split::Train };
            sampler.example(&mut rng, cfg.rho_train, false, format!("tr-{i:06}"), split)
        })
        .collect();
    let ood = (0..cfg.n_ood)
        .map(|i| sampler.example(&mut rng, cfg.rho_ood, cfg.ood_unseen_attr_value, format!("ood-{i:06}"), Split::Valid))
        .collect();
    Ok((train, ood))
}
