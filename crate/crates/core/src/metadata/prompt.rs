use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{AgeGroup, Device, Location, MetadataRecord, Sex};
use super::MetadataError;

const DEFAULT_TEMPLATES: &str = include_str!("../../templates/prompts.txt");

/// Attributes rendered into a metadata prompt, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Age,
    Sex,
    Location,
    Device,
    Anthropometrics,
}

impl Attribute {
    pub const ALL: [Attribute; 5] =
        [Attribute::Age, Attribute::Sex, Attribute::Location, Attribute::Device, Attribute::Anthropometrics];

    pub fn key(self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Sex => "sex",
            Attribute::Location => "location",
            Attribute::Device => "device",
            Attribute::Anthropometrics => "anthropometrics",
        }
    }

    pub fn parse(s: &str) -> Result<Self, MetadataError> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| MetadataError::UnknownValue { field: "attribute", value: s.to_string() })
    }

    fn placeholder_key(self) -> String {
        format!("{}.unknown", self.key())
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Sentence templates keyed by `<attribute>.<value>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateTable {
    entries: BTreeMap<String, String>,
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled template table is valid")
    }
}

impl TemplateTable {
    /// Every key a complete table must define.
    pub fn required_keys() -> Vec<String> {
        let mut keys = Vec::new();
        for a in AgeGroup::KNOWN {
            keys.push(format!("age.{}", a.key()));
        }
        for s in Sex::KNOWN {
            keys.push(format!("sex.{}", s.key()));
        }
        for l in Location::KNOWN {
            keys.push(format!("location.{}", l.key()));
        }
        for d in Device::SEEN.iter().chain([&Device::YuntingIi]) {
            keys.push(format!("device.{}", d.key()));
        }
        keys.push("device.other".into());
        for k in ["bmi", "weight_height", "weight", "height"] {
            keys.push(format!("anthropometrics.{k}"));
        }
        for a in Attribute::ALL {
            keys.push(a.placeholder_key());
        }
        keys
    }

    /// Parses a `key = sentence` document. Blank lines and `#` comments are
    /// skipped; duplicate, unknown, and missing keys are rejected.
    pub fn parse(text: &str) -> Result<Self, MetadataError> {
        let required: BTreeSet<String> = Self::required_keys().into_iter().collect();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MetadataError::Template { line: i + 1, message: "expected `key = sentence`".into() })?;
            let key = key.trim();
            let value = value.trim();
            if !required.contains(key) {
                return Err(MetadataError::Template { line: i + 1, message: format!("unknown template key `{key}`") });
            }
            if value.is_empty() {
                return Err(MetadataError::Template { line: i + 1, message: format!("empty template for `{key}`") });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(MetadataError::Template { line: i + 1, message: format!("duplicate key `{key}`") });
            }
        }
        if let Some(missing) = required.iter().find(|k| !entries.contains_key(*k)) {
            return Err(MetadataError::Template { line: 0, message: format!("missing template key `{missing}`") });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, MetadataError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetadataError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn placeholder(&self, attribute: Attribute) -> &str {
        self.get(&attribute.placeholder_key())
    }

    /// All sentence templates, used to derive the tokenizer lexicon.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(String::as_str)
    }

    fn render(&self, key: &str, fields: &[(&str, String)]) -> String {
        let mut text = self.get(key).to_string();
        for (name, value) in fields {
            text = text.replace(&format!("{{{name}}}"), value);
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub attribute: Attribute,
    pub text: String,
}

/// An ordered list of attribute sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    sentences: Vec<Sentence>,
    full_text: String,
}

impl PromptText {
    /// Builds a prompt, rejecting repeated attributes.
    pub fn new(sentences: Vec<Sentence>) -> Result<Self, MetadataError> {
        let mut seen = BTreeSet::new();
        for s in &sentences {
            if !seen.insert(s.attribute) {
                return Err(MetadataError::DuplicateAttribute(s.attribute));
            }
        }
        Ok(Self::from_unique(sentences))
    }

    fn from_unique(sentences: Vec<Sentence>) -> Self {
        let full_text = sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        Self { sentences, full_text }
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn full_text(&self) -> &str {
        &self.full_text
    }

    pub fn sentence(&self, attribute: Attribute) -> Option<&str> {
        self.sentences.iter().find(|s| s.attribute == attribute).map(|s| s.text.as_str())
    }
}

fn one_decimal(v: f64) -> String {
    format!("{v:.1}")
}

/// Renders a record as prompt sentences in the fixed order age, sex,
/// location, device, anthropometrics. The first four always appear (unknown
/// values use the neutral placeholder); the anthropometric sentence appears
/// only when a measurement is recorded.
pub fn build_prompt(record: &MetadataRecord, templates: &TemplateTable) -> PromptText {
    let mut sentences = Vec::with_capacity(5);
    let age = match record.age_group {
        AgeGroup::Unknown => templates.placeholder(Attribute::Age).to_string(),
        a => templates.get(&format!("age.{}", a.key())).to_string(),
    };
    sentences.push(Sentence { attribute: Attribute::Age, text: age });

    let sex = match record.sex {
        Sex::Unknown => templates.placeholder(Attribute::Sex).to_string(),
        s => templates.get(&format!("sex.{}", s.key())).to_string(),
    };
    sentences.push(Sentence { attribute: Attribute::Sex, text: sex });

    let location = match record.location {
        Location::Unknown => templates.placeholder(Attribute::Location).to_string(),
        l => templates.get(&format!("location.{}", l.key())).to_string(),
    };
    sentences.push(Sentence { attribute: Attribute::Location, text: location });

    let device = match &record.device {
        Device::Unknown => templates.placeholder(Attribute::Device).to_string(),
        Device::Other(name) => templates.render("device.other", &[("name", name.clone())]),
        d => templates.get(&format!("device.{}", d.key())).to_string(),
    };
    sentences.push(Sentence { attribute: Attribute::Device, text: device });

    let anthro = match (record.bmi, record.weight_kg, record.height_cm) {
        (Some(bmi), _, _) => Some(templates.render("anthropometrics.bmi", &[("bmi", one_decimal(bmi))])),
        (None, Some(w), Some(h)) => Some(
            templates
                .render("anthropometrics.weight_height", &[("weight", one_decimal(w)), ("height", one_decimal(h))]),
        ),
        (None, Some(w), None) => Some(templates.render("anthropometrics.weight", &[("weight", one_decimal(w))])),
        (None, None, Some(h)) => Some(templates.render("anthropometrics.height", &[("height", one_decimal(h))])),
        (None, None, None) => None,
    };
    if let Some(text) = anthro {
        sentences.push(Sentence { attribute: Attribute::Anthropometrics, text });
    }
    PromptText::from_unique(sentences)
}

/// Replaces each sensitive attribute's sentence with its neutral placeholder,
/// independently with probability `p`. One Bernoulli draw is consumed per
/// sensitive sentence, in prompt order, whether or not it is already neutral.
pub fn counterfactual_augment<R: Rng + ?Sized>(
    prompt: &PromptText,
    p: f64,
    sensitive: &BTreeSet<Attribute>,
    templates: &TemplateTable,
    rng: &mut R,
) -> Result<PromptText, MetadataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MetadataError::InvalidProbability(p));
    }
    let sentences = prompt
        .sentences
        .iter()
        .map(|s| {
            if sensitive.contains(&s.attribute) && rng.random_bool(p) {
                Sentence { attribute: s.attribute, text: templates.placeholder(s.attribute).to_string() }
            } else {
                s.clone()
            }
        })
        .collect();
    Ok(PromptText::from_unique(sentences))
}
