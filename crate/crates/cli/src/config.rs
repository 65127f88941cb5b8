//! Experiment configuration: one JSON document covering data split, encoder,
//! loss and both training phases. Every field has a default; unknown keys are
//! rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use viewcon::contrastive::LossConfig;
use viewcon::nn::{Architecture, BundleConfig, EncoderConfig, Fusion};
use viewcon::signal::{Modality, SyncedSample};
use viewcon::train::{BaselineViews, OptimizerKind, TrainConfig};
use viewcon::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Labelled examples per class, or the whole training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shots {
    K(usize),
    All,
}

impl Shots {
    pub fn count(self) -> Option<usize> {
        match self {
            Shots::K(k) => Some(k),
            Shots::All => None,
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::K(k) => write!(f, "{k}"),
            Shots::All => f.write_str("all"),
        }
    }
}

impl FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Shots::K(k)),
            _ => Err(Error::Argument(format!("shots must be a positive integer or 'all', got '{s}'"))),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::K(k) => s.serialize_u64(*k as u64),
            Shots::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) if k >= 1 => Ok(Shots::K(k)),
            Raw::N(_) => Err(serde::de::Error::custom("shots must be >= 1")),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Parse `csi1,csi2` style pairs.
pub fn parse_view_pair(s: &str) -> Result<(Modality, Modality)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Argument(format!("expected two comma-separated views, got '{s}'")));
    }
    let (a, b) = (parts[0].parse()?, parts[1].parse()?);
    if a == b {
        return Err(Error::Argument(format!("view pair '{s}' repeats a view")));
    }
    Ok((a, b))
}

/// Parse `csi1` (any single view) or `joint`.
pub fn parse_baseline_views(s: &str) -> Result<BaselineViews> {
    if s == "joint" {
        Ok(BaselineViews::Joint(Modality::Csi1, Modality::Csi2))
    } else {
        Ok(BaselineViews::Single(s.parse()?))
    }
}

pub fn baseline_views_name(v: BaselineViews) -> String {
    match v {
        BaselineViews::Single(m) => m.name().to_string(),
        BaselineViews::Joint(..) => "joint".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.8,
            stratified: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub architecture: Architecture,
    /// Filters per conv stage; architecture default when absent.
    pub filters: Option<Vec<usize>>,
    pub upsample_csi: usize,
    pub upsample_pwr: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            architecture: Architecture::Shallow,
            filters: None,
            upsample_csi: 2,
            upsample_pwr: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Held-out validation cadence in epochs.
    pub val_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            optimizer: d.optimizer,
            val_every: d.val_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Views paired during pretraining.
    pub views: String,
    /// `csi1` (or another single view) or `joint`.
    pub baseline_views: String,
    pub split: SplitSection,
    pub encoder: EncoderSection,
    pub projection_dim: usize,
    pub classifier_hidden: usize,
    pub fusion: Fusion,
    pub loss: LossConfig,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    /// Seed of single-run commands.
    pub seed: u64,
    /// Seeds and shot counts swept by the `experiment` command.
    pub seeds: Vec<u64>,
    pub shots: Vec<Shots>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: None,
            out: None,
            views: "csi1,csi2".into(),
            baseline_views: "csi1".into(),
            split: SplitSection::default(),
            encoder: EncoderSection::default(),
            projection_dim: viewcon::nn::PROJECTION_DIM,
            classifier_hidden: viewcon::nn::CLASSIFIER_HIDDEN,
            fusion: Fusion::Concat,
            loss: LossConfig::default(),
            pretrain: TrainSection::default(),
            finetune: TrainSection::default(),
            seed: 0,
            seeds: vec![0],
            shots: vec![Shots::K(1), Shots::K(5), Shots::K(10)],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.view_pair()?;
        self.baseline()?;
        self.loss.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        for (name, f) in [("upsample_csi", self.encoder.upsample_csi), ("upsample_pwr", self.encoder.upsample_pwr)] {
            if !(1..=3).contains(&f) {
                return Err(Error::Config(format!("encoder.{name} must be 1, 2 or 3")));
            }
        }
        self.pretrain_config(0).validate()?;
        self.finetune_config(0, None).validate()?;
        if self.pretrain.batch_size < 2 {
            return Err(Error::Config("pretrain.batch_size must be >= 2".into()));
        }
        if self.seeds.is_empty() || self.shots.is_empty() {
            return Err(Error::Config("seeds and shots must not be empty".into()));
        }
        Ok(())
    }

    pub fn view_pair(&self) -> Result<(Modality, Modality)> {
        parse_view_pair(&self.views)
    }

    pub fn baseline(&self) -> Result<BaselineViews> {
        parse_baseline_views(&self.baseline_views)
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
            optimizer: self.pretrain.optimizer,
            temperature: self.loss.temperature,
            seed,
            shots: None,
            val_every: self.pretrain.val_every,
        }
    }

    pub fn finetune_config(&self, seed: u64, shots: Option<usize>) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            learning_rate: self.finetune.learning_rate,
            optimizer: self.finetune.optimizer,
            temperature: self.loss.temperature,
            seed,
            shots,
            val_every: self.finetune.val_every,
        }
    }

    /// Encoder for modality `m`, sized from the dataset.
    pub fn encoder_for(&self, m: Modality, samples: &[SyncedSample]) -> Result<EncoderConfig> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let shape = first.view(m)?.shape();
        let factor = if m.is_csi() {
            self.encoder.upsample_csi
        } else {
            self.encoder.upsample_pwr
        };
        let mut cfg = EncoderConfig::new(self.encoder.architecture, shape, factor);
        cfg.filters = self.encoder.filters.clone();
        cfg.output_shape()?;
        Ok(cfg)
    }

    /// Two-view bundle for contrastive pretraining.
    pub fn contrastive_bundle(&self, samples: &[SyncedSample], seed: u64) -> Result<BundleConfig> {
        let (a, b) = self.view_pair()?;
        let mut cfg = BundleConfig::new(
            vec![a, b],
            vec![self.encoder_for(a, samples)?, self.encoder_for(b, samples)?],
            true,
            seed,
        );
        cfg.projection_dim = self.projection_dim;
        cfg.classifier_hidden = self.classifier_hidden;
        cfg.fusion = self.fusion;
        Ok(cfg)
    }

    /// Write the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.pretrain.epochs, 200);
        assert_eq!(cfg.loss.temperature, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"pretrain": {"epocs": 3}}"#).is_err());
    }

    #[test]
    fn shots_round_trip() {
        let v: Vec<Shots> = serde_json::from_str(r#"[1, 5, "all"]"#).unwrap();
        assert_eq!(v, vec![Shots::K(1), Shots::K(5), Shots::All]);
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[1,5,"all"]"#);
        assert!("0".parse::<Shots>().is_err());
    }

    #[test]
    fn view_parsing() {
        assert_eq!(parse_view_pair("csi1,pwr").unwrap(), (Modality::Csi1, Modality::Pwr));
        assert!(parse_view_pair("csi1").is_err());
        assert!(parse_view_pair("csi1,csi1").is_err());
        assert_eq!(parse_baseline_views("joint").unwrap(), BaselineViews::Joint(Modality::Csi1, Modality::Csi2));
    }
}
