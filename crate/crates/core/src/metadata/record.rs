use std::fmt;

use serde::{Deserialize, Serialize};

use super::MetadataError;

/// Age threshold (years) separating pediatric from adult patients.
pub const ADULT_AGE_YEARS: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Adult,
    Pediatric,
    Unknown,
}

impl AgeGroup {
    pub const KNOWN: [AgeGroup; 2] = [AgeGroup::Adult, AgeGroup::Pediatric];

    /// Binarizes a numeric age in years.
    pub fn from_years(age: f64) -> Self {
        if !age.is_finite() || age < 0.0 {
            AgeGroup::Unknown
        } else if age < ADULT_AGE_YEARS {
            AgeGroup::Pediatric
        } else {
            AgeGroup::Adult
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            AgeGroup::Adult => "adult",
            AgeGroup::Pediatric => "pediatric",
            AgeGroup::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub const KNOWN: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn key(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Trachea,
    LeftAnterior,
    RightAnterior,
    LeftPosterior,
    RightPosterior,
    LeftLateral,
    RightLateral,
    Unknown,
}

impl Location {
    pub const KNOWN: [Location; 7] = [
        Location::Trachea,
        Location::LeftAnterior,
        Location::RightAnterior,
        Location::LeftPosterior,
        Location::RightPosterior,
        Location::LeftLateral,
        Location::RightLateral,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Location::Trachea => "trachea",
            Location::LeftAnterior => "left_anterior",
            Location::RightAnterior => "right_anterior",
            Location::LeftPosterior => "left_posterior",
            Location::RightPosterior => "right_posterior",
            Location::LeftLateral => "left_lateral",
            Location::RightLateral => "right_lateral",
            Location::Unknown => "unknown",
        }
    }

    /// ICBHI chest-location code (`Tc`, `Al`, `Ar`, `Pl`, `Pr`, `Ll`, `Lr`).
    pub fn from_icbhi_code(code: &str) -> Option<Self> {
        Some(match code {
            "Tc" => Location::Trachea,
            "Al" => Location::LeftAnterior,
            "Ar" => Location::RightAnterior,
            "Pl" => Location::LeftPosterior,
            "Pr" => Location::RightPosterior,
            "Ll" => Location::LeftLateral,
            "Lr" => Location::RightLateral,
            _ => return None,
        })
    }

    pub fn icbhi_code(self) -> Option<&'static str> {
        Some(match self {
            Location::Trachea => "Tc",
            Location::LeftAnterior => "Al",
            Location::RightAnterior => "Ar",
            Location::LeftPosterior => "Pl",
            Location::RightPosterior => "Pr",
            Location::LeftLateral => "Ll",
            Location::RightLateral => "Lr",
            Location::Unknown => return None,
        })
    }

    /// Class index among the seven known locations.
    pub fn class_index(self) -> Option<usize> {
        Location::KNOWN.iter().position(|&l| l == self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Meditron,
    Littc2se,
    Litt3200,
    Akgc417l,
    YuntingIi,
    Unknown,
    Other(String),
}

impl Device {
    /// Stethoscopes present in the in-distribution corpus.
    pub const SEEN: [Device; 4] = [Device::Meditron, Device::Littc2se, Device::Litt3200, Device::Akgc417l];

    /// Number of device classes seen by discriminators: the four in-distribution
    /// stethoscopes plus one bucket for anything else.
    pub const N_CLASSES: usize = 5;

    pub fn key(&self) -> &str {
        match self {
            Device::Meditron => "meditron",
            Device::Littc2se => "littc2se",
            Device::Litt3200 => "litt3200",
            Device::Akgc417l => "akgc417l",
            Device::YuntingIi => "yunting_ii",
            Device::Unknown => "unknown",
            Device::Other(_) => "other",
        }
    }

    /// ICBHI device code as it appears in recording filenames.
    pub fn from_icbhi_code(code: &str) -> Self {
        match code {
            "Meditron" => Device::Meditron,
            "LittC2SE" => Device::Littc2se,
            "Litt3200" => Device::Litt3200,
            "AKGC417L" => Device::Akgc417l,
            other => Device::Other(other.to_string()),
        }
    }

    pub fn icbhi_code(&self) -> Option<&str> {
        match self {
            Device::Meditron => Some("Meditron"),
            Device::Littc2se => Some("LittC2SE"),
            Device::Litt3200 => Some("Litt3200"),
            Device::Akgc417l => Some("AKGC417L"),
            Device::Other(name) => Some(name),
            Device::YuntingIi | Device::Unknown => None,
        }
    }

    /// Discriminator class: seen devices keep their index, every other
    /// device lands in the trailing unseen bucket. `Unknown` has no class.
    pub fn class_index(&self) -> Option<usize> {
        match self {
            Device::Unknown => None,
            d => Some(Device::SEEN.iter().position(|s| s == d).unwrap_or(Device::SEEN.len())),
        }
    }

    /// Parses the column form written by [`fmt::Display`].
    pub fn parse(s: &str) -> Result<Self, MetadataError> {
        Ok(match s {
            "meditron" => Device::Meditron,
            "littc2se" => Device::Littc2se,
            "litt3200" => Device::Litt3200,
            "akgc417l" => Device::Akgc417l,
            "yunting_ii" => Device::YuntingIi,
            "unknown" => Device::Unknown,
            other => match other.strip_prefix("other:") {
                Some(name) => Device::Other(name.to_string()),
                None => return Err(MetadataError::UnknownValue { field: "device", value: s.to_string() }),
            },
        })
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Device::Other(name) => write!(f, "other:{name}"),
            d => f.write_str(d.key()),
        }
    }
}

/// Structured metadata for one patient recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub age_group: AgeGroup,
    pub sex: Sex,
    pub location: Location,
    pub device: Device,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_kg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_cm: Option<f64>,
}

impl Default for MetadataRecord {
    fn default() -> Self {
        Self::unknown()
    }
}

impl MetadataRecord {
    /// A record with every attribute unknown.
    pub fn unknown() -> Self {
        Self {
            age_group: AgeGroup::Unknown,
            sex: Sex::Unknown,
            location: Location::Unknown,
            device: Device::Unknown,
            bmi: None,
            weight_kg: None,
            height_cm: None,
        }
    }

    /// BMI is adult-only; weight and height are pediatric-only.
    pub fn validate(&self) -> Result<(), MetadataError> {
        for (field, value) in [("bmi", self.bmi), ("weight_kg", self.weight_kg), ("height_cm", self.height_cm)] {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(MetadataError::InvalidRecord(format!("{field} must be a non-negative real, got {v}")));
                }
            }
        }
        if self.bmi.is_some() && self.age_group != AgeGroup::Adult {
            return Err(MetadataError::InvalidRecord("bmi is only recorded for adult patients".into()));
        }
        if (self.weight_kg.is_some() || self.height_cm.is_some()) && self.age_group != AgeGroup::Pediatric {
            return Err(MetadataError::InvalidRecord(
                "weight and height are only recorded for pediatric patients".into(),
            ));
        }
        Ok(())
    }

    pub fn has_anthropometrics(&self) -> bool {
        self.bmi.is_some() || self.weight_kg.is_some() || self.height_cm.is_some()
    }
}
