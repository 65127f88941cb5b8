use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Receiver / modality that produced a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Csi1,
    Csi2,
    Pwr,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Csi1, Modality::Csi2, Modality::Pwr];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Csi1 => "csi1",
            Modality::Csi2 => "csi2",
            Modality::Pwr => "pwr",
        }
    }

    pub fn is_csi(self) -> bool {
        matches!(self, Modality::Csi1 | Modality::Csi2)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csi1" | "csi-1" => Ok(Modality::Csi1),
            "csi2" | "csi-2" => Ok(Modality::Csi2),
            "pwr" => Ok(Modality::Pwr),
            other => Err(Error::arg(format!(
                "unknown modality '{other}' (expected csi1, csi2 or pwr)"
            ))),
        }
    }
}

/// The seven activity classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    Lay,
    Pickup,
    Sit,
    Stand,
    Standff,
    Walk,
    Wave,
}

pub const N_CLASSES: usize = 7;

impl Activity {
    pub const ALL: [Activity; N_CLASSES] = [
        Activity::Lay,
        Activity::Pickup,
        Activity::Sit,
        Activity::Stand,
        Activity::Standff,
        Activity::Walk,
        Activity::Wave,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::arg(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Lay => "lay",
            Activity::Pickup => "pickup",
            Activity::Sit => "sit",
            Activity::Stand => "stand",
            Activity::Standff => "standff",
            Activity::Walk => "walk",
            Activity::Wave => "wave",
        }
    }

    pub fn class_names() -> Vec<String> {
        Self::ALL.iter().map(|a| a.name().to_string()).collect()
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Time–frequency magnitude matrix, `height` frequency bins by `width` frames,
/// stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub modality: Modality,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Spectrogram {
    pub fn new(modality: Modality, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!(
                "spectrogram {height}x{width} with {} values",
                values.len()
            )));
        }
        Ok(Spectrogram {
            modality,
            height,
            width,
            values,
        })
    }

    /// Build from `f64` values, min-max normalizing to `[0, 1]` first.
    pub fn normalized(modality: Modality, height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        let values = min_max_normalize(raw).into_iter().map(|v| v as f32).collect();
        Self::new(modality, height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Re-apply min-max normalization.
    pub fn renormalize(&self) -> Spectrogram {
        let raw: Vec<f64> = self.values.iter().map(|&v| f64::from(v)).collect();
        let values = min_max_normalize(&raw).into_iter().map(|v| v as f32).collect();
        Spectrogram {
            values,
            ..self.clone()
        }
    }
}

/// Min-max scaling to `[0, 1]`. A constant input maps to all zeros.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if raw.is_empty() || range <= 0.0 || !range.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / range).collect()
}

/// One time point observed by several synchronized receivers.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncedSample {
    pub id: u64,
    pub label: Activity,
    pub views: BTreeMap<Modality, Spectrogram>,
    pub subject: Option<u32>,
    pub layout: Option<u32>,
    pub position: Option<u32>,
}

impl SyncedSample {
    pub fn view(&self, m: Modality) -> Result<&Spectrogram> {
        self.views.get(&m).ok_or_else(|| {
            Error::Data(format!("sample {} has no {m} view", self.id))
        })
    }
}

/// Count samples per class, in class-index order.
pub fn class_counts(samples: &[SyncedSample]) -> [usize; N_CLASSES] {
    let mut counts = [0; N_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    counts
}
