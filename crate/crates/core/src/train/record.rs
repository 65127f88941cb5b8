use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::Result;
use crate::signal::container::write_json;

pub const RECORD_FILE: &str = "run_record.json";
pub const HISTORY_FILE: &str = "loss_history.csv";

/// Per-epoch history of one training run plus everything needed to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `pretrain`, `finetune` or `baseline`.
    pub kind: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Mean training loss of each epoch.
    pub loss: Vec<f64>,
    /// Held-out macro F1 after each epoch, `null` when not evaluated.
    pub val_macro_f1: Vec<Option<f64>>,
    pub wall_clock_seconds: f64,
    /// Ids of the labelled samples used, for supervised runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<u64>>,
    /// Free-form context added by the caller (view pair, dataset, ...).
    #[serde(default)]
    pub extras: serde_json::Value,
}

impl RunRecord {
    pub fn new(kind: &str, cfg: &TrainConfig) -> Self {
        RunRecord {
            kind: kind.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            loss: Vec::with_capacity(cfg.epochs),
            val_macro_f1: Vec::with_capacity(cfg.epochs),
            wall_clock_seconds: 0.0,
            subset_ids: None,
            extras: serde_json::Value::Null,
        }
    }

    pub fn push_epoch(&mut self, loss: f64, val_macro_f1: Option<f64>) {
        self.loss.push(loss);
        self.val_macro_f1.push(val_macro_f1);
    }

    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// `epoch,loss,val_macro_f1` with 1-based epochs; missing F1 is empty.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_macro_f1\n");
        for (i, (l, f)) in self.loss.iter().zip(&self.val_macro_f1).enumerate() {
            let f = f.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(s, "{},{l:.8},{f}", i + 1).unwrap();
        }
        s
    }

    /// Write the JSON record and the history CSV into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_json(&dir.join(RECORD_FILE), self)?;
        let p = dir.join(HISTORY_FILE);
        std::fs::write(&p, self.history_csv()).map_err(|e| crate::Error::io(&p, e))
    }
}
