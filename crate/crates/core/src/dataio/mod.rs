//! Corpus ingestion, cycle standardization, and the synthetic confounded
//! dataset generator.

mod cycle;
pub mod icbhi;
pub mod sprsound;
mod store;
mod synth;
mod wav;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::MetadataRecord;

pub use cycle::{extract_cycle, resample, Resampler, CYCLE_DURATION_S, TARGET_SAMPLE_RATE};
pub use store::{
    read_dataset, read_manifest, sha256_hex, write_dataset, DatasetManifest, DATASET_FORMAT, MANIFEST_FILE,
};
pub use synth::{generate_synthetic, SynthConfig, DEFAULT_CLASS_RATIOS};
pub use wav::{read_wav_mono, write_wav_f32};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label `{raw}`; accepted labels: {accepted}")]
    UnknownLabel { raw: String, accepted: String },
    #[error("invalid filename `{stem}`: {message}")]
    Filename { stem: String, message: String },
    #[error("cycle window [{start_s}, {end_s}) s lies outside a {duration_s} s signal")]
    WindowOutOfBounds { start_s: f64, end_s: f64, duration_s: f64 },
    #[error("cycle window is empty")]
    EmptyWindow,
    #[error("sample rates must be positive")]
    InvalidSampleRate,
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("missing input files: {0}")]
    MissingFiles(String),
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// Four-class respiratory sound label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Crackle,
    Wheeze,
    Both,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Normal, Label::Crackle, Label::Wheeze, Label::Both];

    pub fn from_flags(crackle: bool, wheeze: bool) -> Self {
        match (crackle, wheeze) {
            (false, false) => Label::Normal,
            (true, false) => Label::Crackle,
            (false, true) => Label::Wheeze,
            (true, true) => Label::Both,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Label::ALL.get(i).copied()
    }

    pub fn is_abnormal(self) -> bool {
        self != Label::Normal
    }

    pub fn key(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Crackle => "crackle",
            Label::Wheeze => "wheeze",
            Label::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Label::ALL.into_iter().find(|l| l.key() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            _ => None,
        }
    }
}

/// One standardized respiratory cycle: a fixed-length waveform, or a feature
/// vector for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCycle {
    pub signal: Vec<f64>,
    pub label: Label,
    pub metadata: MetadataRecord,
    pub source_split: Split,
    pub patient_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleAnnotation {
    pub start_s: f64,
    pub end_s: f64,
    pub has_crackle: bool,
    pub has_wheeze: bool,
}

impl CycleAnnotation {
    pub fn label(&self) -> Label {
        Label::from_flags(self.has_crackle, self.has_wheeze)
    }
}

/// Per-class counts and percentages of a label collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub counts: [usize; 4],
}

impl ClassSummary {
    pub fn from_labels<I: IntoIterator<Item = Label>>(labels: I) -> Self {
        let mut counts = [0; 4];
        for l in labels {
            counts[l.index()] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn percentages(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        self.counts.map(|c| 100.0 * c as f64 / n)
    }

    /// Plain-text table with one row per class.
    pub fn to_table(&self) -> String {
        let mut out = String::from("label\tcount\tpercent\n");
        for (l, (c, p)) in Label::ALL.iter().zip(self.counts.iter().zip(self.percentages())) {
            out.push_str(&format!("{l}\t{c}\t{p:.2}\n"));
        }
        out.push_str(&format!("total\t{}\t100.00\n", self.total()));
        out
    }
}
