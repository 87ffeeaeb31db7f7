//! On-disk dataset directory: `manifest.json` plus three CSV files per split
//! (`{split}.features.csv`, `{split}.labels.csv`, `{split}.metadata.csv`).
//! The manifest echoes the generating config and pins every file's SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Label, LabeledCycle, Split};
use crate::metadata::{AgeGroup, Device, Location, MetadataRecord, Sex};

pub const DATASET_FORMAT: &str = "cfdebias-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// Provenance, e.g. `synthetic`, `icbhi`, `sprsound`.
    pub source: String,
    pub config: serde_json::Value,
    /// Split names in write order.
    pub splits: Vec<String>,
    /// Example count per split.
    pub sizes: BTreeMap<String, usize>,
    pub signal_dim: usize,
    /// File name → hex SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_key<T: Copy>(all: &[T], key: impl Fn(T) -> &'static str, field: &str, s: &str) -> Result<T, DataError> {
    all.iter().copied().find(|&v| key(v) == s).ok_or_else(|| DataError::Format {
        context: format!("metadata column {field}"),
        message: format!("unknown value `{s}`"),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, field: &str) -> Result<Option<f64>, DataError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| DataError::Format {
        context: format!("metadata column {field}"),
        message: format!("invalid number `{s}`"),
    })
}

fn csv_err(file: &str, e: csv::Error) -> DataError {
    DataError::Format { context: file.to_string(), message: e.to_string() }
}

fn encode_split(cycles: &[LabeledCycle]) -> Result<[Vec<u8>; 3], DataError> {
    let mut features = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut labels = csv::Writer::from_writer(Vec::new());
    let mut meta = csv::Writer::from_writer(Vec::new());
    labels.write_record(["patient_id", "label", "split"]).map_err(|e| csv_err("labels", e))?;
    meta.write_record(["age_group", "sex", "location", "device", "bmi", "weight_kg", "height_cm"])
        .map_err(|e| csv_err("metadata", e))?;
    for c in cycles {
        features.write_record(c.signal.iter().map(|v| v.to_string())).map_err(|e| csv_err("features", e))?;
        labels
            .write_record([c.patient_id.as_str(), c.label.key(), c.source_split.key()])
            .map_err(|e| csv_err("labels", e))?;
        let m = &c.metadata;
        meta.write_record([
            m.age_group.key().to_string(),
            m.sex.key().to_string(),
            m.location.key().to_string(),
            m.device.to_string(),
            opt(m.bmi),
            opt(m.weight_kg),
            opt(m.height_cm),
        ])
        .map_err(|e| csv_err("metadata", e))?;
    }
    let finish = |w: csv::Writer<Vec<u8>>, name: &str| {
        w.into_inner().map_err(|e| DataError::Format { context: name.to_string(), message: e.to_string() })
    };
    Ok([finish(features, "features")?, finish(labels, "labels")?, finish(meta, "metadata")?])
}

/// Writes `splits` under `dir` (created if absent) and returns the manifest.
pub fn write_dataset(
    dir: &Path,
    source: &str,
    config: serde_json::Value,
    splits: &[(&str, &[LabeledCycle])],
) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut signal_dim = None;
    for (name, cycles) in splits {
        for c in cycles.iter() {
            if *signal_dim.get_or_insert(c.signal.len()) != c.signal.len() {
                return Err(DataError::Format {
                    context: format!("split {name}"),
                    message: "signals differ in length".into(),
                });
            }
        }
        let [features, labels, meta] = encode_split(cycles)?;
        for (suffix, bytes) in [("features", features), ("labels", labels), ("metadata", meta)] {
            let file = format!("{name}.{suffix}.csv");
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(|e| DataError::io(&path, e))?;
            files.insert(file, sha256_hex(&bytes));
        }
        sizes.insert(name.to_string(), cycles.len());
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        source: source.into(),
        config,
        splits: splits.iter().map(|(n, _)| n.to_string()).collect(),
        sizes,
        signal_dim: signal_dim.unwrap_or(0),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

fn read_verified(dir: &Path, file: &str, manifest: &DatasetManifest) -> Result<Vec<u8>, DataError> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    match manifest.files.get(file) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(DataError::Checksum { file: file.to_string() }),
    }
}

fn rows(bytes: &[u8], headers: bool, file: &str) -> Result<Vec<csv::StringRecord>, DataError> {
    csv::ReaderBuilder::new()
        .has_headers(headers)
        .from_reader(bytes)
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| csv_err(file, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(DataError::MissingFiles(path.display().to_string()));
    }
    let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| DataError::Format { context: MANIFEST_FILE.into(), message: e.to_string() })?;
    if manifest.format != DATASET_FORMAT {
        return Err(DataError::Format {
            context: MANIFEST_FILE.into(),
            message: format!("unexpected format `{}`", manifest.format),
        });
    }
    Ok(manifest)
}

/// Reads every split, verifying each file against the manifest checksums.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, BTreeMap<String, Vec<LabeledCycle>>), DataError> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for name in &manifest.splits {
        let file = |s: &str| format!("{name}.{s}.csv");
        let features = rows(&read_verified(dir, &file("features"), &manifest)?, false, &file("features"))?;
        let labels = rows(&read_verified(dir, &file("labels"), &manifest)?, true, &file("labels"))?;
        let meta = rows(&read_verified(dir, &file("metadata"), &manifest)?, true, &file("metadata"))?;
        if features.len() != labels.len() || labels.len() != meta.len() {
            return Err(DataError::Format {
                context: format!("split {name}"),
                message: "row counts differ across files".into(),
            });
        }
        let mut cycles = Vec::with_capacity(labels.len());
        for (i, ((f, l), m)) in features.iter().zip(&labels).zip(&meta).enumerate() {
            let bad = |message: String| DataError::Format { context: format!("split {name} row {}", i + 1), message };
            let signal =
                f.iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?;
            if l.len() != 3 || m.len() != 7 {
                return Err(bad("wrong column count".into()));
            }
            let label = Label::parse(&l[1]).ok_or_else(|| bad(format!("unknown label `{}`", &l[1])))?;
            let source_split = Split::parse(&l[2]).ok_or_else(|| bad(format!("unknown split `{}`", &l[2])))?;
            let metadata = MetadataRecord {
                age_group: parse_key(
                    &[AgeGroup::Adult, AgeGroup::Pediatric, AgeGroup::Unknown],
                    AgeGroup::key,
                    "age_group",
                    &m[0],
                )?,
                sex: parse_key(&[Sex::Male, Sex::Female, Sex::Unknown], Sex::key, "sex", &m[1])?,
                location: parse_key(
                    &[Location::KNOWN.as_slice(), &[Location::Unknown]].concat(),
                    Location::key,
                    "location",
                    &m[2],
                )?,
                device: Device::parse(&m[3]).map_err(|e| bad(e.to_string()))?,
                bmi: parse_opt(&m[4], "bmi")?,
                weight_kg: parse_opt(&m[5], "weight_kg")?,
                height_cm: parse_opt(&m[6], "height_cm")?,
            };
            cycles.push(LabeledCycle { signal, label, metadata, source_split, patient_id: l[0].to_string() });
        }
        out.insert(name.clone(), cycles);
    }
    Ok((manifest, out))
}
