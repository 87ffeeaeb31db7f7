//! ICBHI corpus layout: `{patient}_{index}_{location}_{acquisition}_{device}`
//! recordings, a same-stem four-column annotation file per recording, and a
//! corpus-level demographics table.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::wav::read_wav_mono;
use super::{extract_cycle, ClassSummary, CycleAnnotation, DataError, LabeledCycle, Resampler, Split};
use crate::metadata::{AgeGroup, Device, Location, MetadataRecord, Sex};

pub const DEMOGRAPHICS_FILE: &str = "demographic_info.txt";
pub const SPLIT_FILE: &str = "split.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingName {
    pub patient_id: String,
    pub index: String,
    pub location: Location,
    pub acquisition: String,
    pub device: Device,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Demographics {
    pub age_years: Option<f64>,
    pub sex: Option<Sex>,
    pub adult_bmi: Option<f64>,
    pub child_weight_kg: Option<f64>,
    pub child_height_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcbhiRecord {
    pub name: RecordingName,
    pub cycles: Vec<CycleAnnotation>,
    pub metadata: MetadataRecord,
    /// Codes that did not match a known location or device.
    pub warnings: Vec<String>,
}

/// Parses a recording stem. Unrecognized location codes become `Unknown` and
/// unrecognized devices `Other(code)`; both are reported as warnings.
pub fn parse_filename(stem: &str) -> Result<(RecordingName, Vec<String>), DataError> {
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 5 || fields.iter().any(|f| f.is_empty()) {
        return Err(DataError::Filename {
            stem: stem.to_string(),
            message: "expected {patient}_{index}_{location}_{acquisition}_{device}".into(),
        });
    }
    let mut warnings = Vec::new();
    let location = Location::from_icbhi_code(fields[2]).unwrap_or_else(|| {
        warnings.push(format!("unrecognized location code `{}`", fields[2]));
        Location::Unknown
    });
    let device = Device::from_icbhi_code(fields[4]);
    if matches!(device, Device::Other(_)) {
        warnings.push(format!("unrecognized device code `{}`", fields[4]));
    }
    Ok((
        RecordingName {
            patient_id: fields[0].to_string(),
            index: fields[1].to_string(),
            location,
            acquisition: fields[3].to_string(),
            device,
        },
        warnings,
    ))
}

fn parse_flag(field: &str, line: usize) -> Result<bool, DataError> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::Parse { line, message: format!("flag must be 0 or 1, got `{other}`") }),
    }
}

/// Parses `start end crackle wheeze` rows; blank lines are ignored.
pub fn parse_annotations(text: &str) -> Result<Vec<CycleAnnotation>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(DataError::Parse { line, message: format!("expected 4 fields, found {}", fields.len()) });
        }
        let num = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse { line, message: format!("invalid time `{s}`") })
        };
        let start_s = num(fields[0])?;
        let end_s = num(fields[1])?;
        if start_s < 0.0 || end_s <= start_s {
            return Err(DataError::Parse { line, message: format!("need 0 ≤ start < end, got {start_s} {end_s}") });
        }
        out.push(CycleAnnotation {
            start_s,
            end_s,
            has_crackle: parse_flag(fields[2], line)?,
            has_wheeze: parse_flag(fields[3], line)?,
        });
    }
    Ok(out)
}

/// Tab-separated rows with shortest round-trip number formatting.
pub fn serialize_annotations(cycles: &[CycleAnnotation]) -> String {
    cycles
        .iter()
        .map(|c| format!("{}\t{}\t{}\t{}\n", c.start_s, c.end_s, u8::from(c.has_crackle), u8::from(c.has_wheeze)))
        .collect()
}

fn optional_number(s: &str) -> Option<f64> {
    if s.eq_ignore_ascii_case("na") {
        None
    } else {
        s.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Parses the demographics table: `patient age sex adult_bmi child_weight
/// child_height`, with `NA` for missing values.
pub fn parse_demographics(text: &str) -> Result<HashMap<String, Demographics>, DataError> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(DataError::Parse {
                line: i + 1,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let sex = match fields[2] {
            "M" => Some(Sex::Male),
            "F" => Some(Sex::Female),
            _ => None,
        };
        out.insert(
            fields[0].to_string(),
            Demographics {
                age_years: optional_number(fields[1]),
                sex,
                adult_bmi: optional_number(fields[3]),
                child_weight_kg: optional_number(fields[4]),
                child_height_cm: optional_number(fields[5]),
            },
        );
    }
    Ok(out)
}

/// Combines a recording's annotation text, filename stem, and (optional)
/// demographics row.
pub fn parse_icbhi_record(
    annotation_text: &str,
    stem: &str,
    demographics: Option<&Demographics>,
) -> Result<IcbhiRecord, DataError> {
    let (name, warnings) = parse_filename(stem)?;
    let cycles = parse_annotations(annotation_text)?;
    let mut metadata =
        MetadataRecord { location: name.location, device: name.device.clone(), ..MetadataRecord::unknown() };
    if let Some(d) = demographics {
        metadata.age_group = d.age_years.map(AgeGroup::from_years).unwrap_or(AgeGroup::Unknown);
        metadata.sex = d.sex.unwrap_or(Sex::Unknown);
        match metadata.age_group {
            AgeGroup::Adult => metadata.bmi = d.adult_bmi,
            AgeGroup::Pediatric => {
                metadata.weight_kg = d.child_weight_kg;
                metadata.height_cm = d.child_height_cm;
            }
            AgeGroup::Unknown => {}
        }
    }
    Ok(IcbhiRecord { name, cycles, metadata, warnings })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

fn annotation_stems(dir: &Path) -> Result<Vec<String>, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let is_txt = path.extension().is_some_and(|e| e == "txt");
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if is_txt && name != DEMOGRAPHICS_FILE && name != SPLIT_FILE {
            stems.push(path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Class distribution of every annotated cycle in `dir`, from the annotation
/// files alone.
pub fn tally_annotations(dir: &Path) -> Result<ClassSummary, DataError> {
    let stems = annotation_stems(dir)?;
    if stems.is_empty() {
        return Err(DataError::MissingFiles(format!("no annotation files in {}", dir.display())));
    }
    let mut labels = Vec::new();
    for stem in stems {
        let text = read_text(&dir.join(format!("{stem}.txt")))?;
        labels.extend(parse_annotations(&text)?.iter().map(CycleAnnotation::label));
    }
    Ok(ClassSummary::from_labels(labels))
}

/// Optional `stem train|test` split table; unlisted recordings are training.
fn read_split(dir: &Path) -> Result<BTreeMap<String, Split>, DataError> {
    let path = dir.join(SPLIT_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut out = BTreeMap::new();
    for (i, raw) in read_text(&path)?.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let split = match fields.get(1).copied() {
            Some("train") => Split::Train,
            Some("test") | Some("valid") => Split::Valid,
            _ => return Err(DataError::Parse { line: i + 1, message: "expected `stem train|test`".into() }),
        };
        out.insert(fields[0].to_string(), split);
    }
    Ok(out)
}

/// Loads every recording in `dir` and extracts standardized cycles.
pub fn load_corpus(
    dir: &Path,
    duration_s: f64,
    sr_out: f64,
    method: Resampler,
) -> Result<(Vec<LabeledCycle>, Vec<String>), DataError> {
    let stems = annotation_stems(dir)?;
    if stems.is_empty() {
        return Err(DataError::MissingFiles(format!("no annotation files in {}", dir.display())));
    }
    let demo_path = dir.join(DEMOGRAPHICS_FILE);
    let missing: Vec<String> = std::iter::once(demo_path.clone())
        .filter(|p| !p.exists())
        .chain(stems.iter().map(|s| dir.join(format!("{s}.wav"))).filter(|p| !p.exists()))
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFiles(missing.join(", ")));
    }
    let demographics = parse_demographics(&read_text(&demo_path)?)?;
    let splits = read_split(dir)?;
    let mut cycles = Vec::new();
    let mut warnings = Vec::new();
    for stem in &stems {
        let text = read_text(&dir.join(format!("{stem}.txt")))?;
        let patient = stem.split('_').next().unwrap_or_default();
        let record = parse_icbhi_record(&text, stem, demographics.get(patient))?;
        warnings.extend(record.warnings.iter().map(|w| format!("{stem}: {w}")));
        let (signal, sr_in) = read_wav_mono(&dir.join(format!("{stem}.wav")))?;
        let split = splits.get(stem).copied().unwrap_or(Split::Train);
        for ann in &record.cycles {
            cycles.push(LabeledCycle {
                signal: extract_cycle(&signal, sr_in, ann, duration_s, sr_out, method)?,
                label: ann.label(),
                metadata: record.metadata.clone(),
                source_split: split,
                patient_id: record.name.patient_id.clone(),
            });
        }
    }
    Ok((cycles, warnings))
}
