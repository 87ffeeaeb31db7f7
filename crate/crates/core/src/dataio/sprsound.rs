//! SPRSound layout: `{patient}_{age}_{sex}_{location}_{record}.wav` with a
//! same-stem JSON annotation holding per-event windows (milliseconds) and raw
//! seven-class labels.

use std::path::Path;

use serde::Deserialize;

use super::wav::read_wav_mono;
use super::{extract_cycle, CycleAnnotation, DataError, Label, LabeledCycle, Resampler, Split};
use crate::metadata::{AgeGroup, Device, Location, MetadataRecord, Sex};

/// Raw event labels accepted by [`map_sprsound_label`], in canonical form.
pub const RAW_LABELS: [&str; 7] =
    ["Normal", "Fine Crackle", "Coarse Crackle", "Wheeze", "Stridor", "Rhonchi", "Wheeze+Crackle"];

fn normalize(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase().replace(" + ", "+")
}

/// Maps a raw event label onto the four-class scheme: crackle variants merge
/// into crackle, stridor and rhonchi into wheeze. Matching ignores case and
/// redundant whitespace.
pub fn map_sprsound_label(raw: &str) -> Result<Label, DataError> {
    Ok(match normalize(raw).as_str() {
        "normal" => Label::Normal,
        "fine crackle" | "coarse crackle" => Label::Crackle,
        "wheeze" | "stridor" | "rhonchi" => Label::Wheeze,
        "wheeze+crackle" => Label::Both,
        _ => return Err(DataError::UnknownLabel { raw: raw.to_string(), accepted: RAW_LABELS.join(", ") }),
    })
}

/// Auscultation point codes `p1`..`p4`.
pub fn location_from_code(code: &str) -> Location {
    match code.to_ascii_lowercase().as_str() {
        "p1" => Location::LeftPosterior,
        "p2" => Location::LeftAnterior,
        "p3" => Location::RightPosterior,
        "p4" => Location::RightAnterior,
        _ => Location::Unknown,
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Millis {
    Number(f64),
    Text(String),
}

impl Millis {
    fn seconds(&self) -> Option<f64> {
        let ms = match self {
            Millis::Number(v) => *v,
            Millis::Text(s) => s.trim().parse().ok()?,
        };
        Some(ms / 1000.0)
    }
}

#[derive(Debug, Deserialize)]
struct EventAnnotation {
    start: Millis,
    end: Millis,
    #[serde(rename = "type")]
    kind: String,
}

#[derive(Debug, Deserialize)]
struct RecordAnnotation {
    #[serde(default)]
    event_annotation: Vec<EventAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SprEvent {
    pub window: CycleAnnotation,
    pub label: Label,
}

/// Parses one record's annotation document into labeled event windows.
pub fn parse_annotation(json: &str, context: &str) -> Result<Vec<SprEvent>, DataError> {
    let doc: RecordAnnotation = serde_json::from_str(json)
        .map_err(|e| DataError::Format { context: context.to_string(), message: e.to_string() })?;
    doc.event_annotation
        .iter()
        .enumerate()
        .map(|(i, ev)| {
            let bad = |message: String| DataError::Format { context: format!("{context} event {i}"), message };
            let start_s = ev.start.seconds().ok_or_else(|| bad("invalid start".into()))?;
            let end_s = ev.end.seconds().ok_or_else(|| bad("invalid end".into()))?;
            if !(start_s >= 0.0 && end_s > start_s) {
                return Err(bad(format!("need 0 ≤ start < end, got {start_s} {end_s}")));
            }
            let label = map_sprsound_label(&ev.kind)?;
            let (has_crackle, has_wheeze) = match label {
                Label::Normal => (false, false),
                Label::Crackle => (true, false),
                Label::Wheeze => (false, true),
                Label::Both => (true, true),
            };
            Ok(SprEvent { window: CycleAnnotation { start_s, end_s, has_crackle, has_wheeze }, label })
        })
        .collect()
}

/// Metadata from a recording stem; every SPRSound recording uses the Yunting
/// model II stethoscope.
pub fn parse_filename(stem: &str) -> Result<(String, MetadataRecord), DataError> {
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 5 {
        return Err(DataError::Filename {
            stem: stem.to_string(),
            message: "expected {patient}_{age}_{sex}_{location}_{record}".into(),
        });
    }
    let age_group = fields[1].parse::<f64>().map(AgeGroup::from_years).unwrap_or(AgeGroup::Unknown);
    let sex = match fields[2] {
        "0" => Sex::Male,
        "1" => Sex::Female,
        _ => Sex::Unknown,
    };
    let record = MetadataRecord {
        age_group,
        sex,
        location: location_from_code(fields[3]),
        device: Device::YuntingIi,
        ..MetadataRecord::unknown()
    };
    Ok((fields[0].to_string(), record))
}

/// Loads every `*.wav`/`*.json` pair in `dir`. All SPRSound cycles are
/// tagged as the validation split, since the corpus is used only for
/// out-of-distribution testing.
pub fn load_corpus(
    dir: &Path,
    duration_s: f64,
    sr_out: f64,
    method: Resampler,
) -> Result<Vec<LabeledCycle>, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            stems.push(path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(DataError::MissingFiles(format!("no annotation documents in {}", dir.display())));
    }
    let missing: Vec<String> = stems
        .iter()
        .map(|s| dir.join(format!("{s}.wav")))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFiles(missing.join(", ")));
    }
    let mut cycles = Vec::new();
    for stem in stems {
        let json_path = dir.join(format!("{stem}.json"));
        let json = std::fs::read_to_string(&json_path).map_err(|e| DataError::io(&json_path, e))?;
        let events = parse_annotation(&json, &stem)?;
        let (patient_id, metadata) = parse_filename(&stem)?;
        let (signal, sr_in) = read_wav_mono(&dir.join(format!("{stem}.wav")))?;
        for ev in events {
            cycles.push(LabeledCycle {
                signal: extract_cycle(&signal, sr_in, &ev.window, duration_s, sr_out, method)?,
                label: ev.label,
                metadata: metadata.clone(),
                source_split: Split::Valid,
                patient_id: patient_id.clone(),
            });
        }
    }
    Ok(cycles)
}
