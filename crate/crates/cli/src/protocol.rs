//! The pretrain → freeze → fine-tune protocol and its supervised baseline,
//! with optional run directories on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viewcon::contrastive::{alignment, assemble_projection_batch, Alignment};
use viewcon::eval::{compare_runs, evaluate, Comparison, RunSummary};
use viewcon::nn::{load_checkpoint, save_checkpoint, Component, ModelBundle};
use viewcon::signal::{split_dataset, SyncedSample};
use viewcon::train::{few_shot_sample, finetune, pretrain, train_supervised_baseline, BaselineViews, RunRecord};
use viewcon::{Error, Result};

use crate::config::{baseline_views_name, ExperimentConfig, Shots};
use crate::files::{write_json_file, write_text};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const ALIGNMENT_FILE: &str = "alignment.json";

pub const METHOD_CONTRASTIVE: &str = "contrastive";

pub fn baseline_method(views: BaselineViews) -> String {
    match views {
        BaselineViews::Single(_) => "baseline".into(),
        BaselineViews::Joint(..) => "baseline_joint".into(),
    }
}

/// Seed of the labelled subset drawn for `shots` under run seed `seed`.
/// Contrastive and baseline runs with the same seed see the same subset.
pub fn subset_seed(seed: u64, shots: Shots) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(shots.count().unwrap_or(0) as u64)
}

pub fn split(cfg: &ExperimentConfig, samples: &[SyncedSample]) -> Result<(Vec<SyncedSample>, Vec<SyncedSample>)> {
    split_dataset(samples, cfg.split.train_fraction, cfg.split.stratified, cfg.split.seed)
}

pub fn labelled_subset(train: &[SyncedSample], seed: u64, shots: Shots) -> Result<Vec<SyncedSample>> {
    match shots {
        Shots::K(k) => few_shot_sample(train, k, subset_seed(seed, shots)),
        Shots::All => Ok(train.to_vec()),
    }
}

/// Metadata stored in checkpoints so later commands can rebuild the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointExtras {
    pub kind: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl CheckpointExtras {
    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint extras: {e}")))
    }
}

pub struct PretrainOutcome {
    pub bundle: ModelBundle,
    pub record: RunRecord,
    /// Held-out positive/negative cosine similarity before and after.
    pub alignment_before: Alignment,
    pub alignment_after: Alignment,
}

fn held_out_alignment(bundle: &ModelBundle, cfg: &ExperimentConfig, test: &[SyncedSample]) -> Result<Alignment> {
    let refs: Vec<&SyncedSample> = test.iter().collect();
    alignment(&assemble_projection_batch(&refs, bundle, cfg.view_pair()?)?)
}

pub fn run_pretrain(
    cfg: &ExperimentConfig,
    train: &[SyncedSample],
    test: &[SyncedSample],
    seed: u64,
    out: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut bundle = ModelBundle::new(cfg.contrastive_bundle(train, seed)?)?;
    let alignment_before = held_out_alignment(&bundle, cfg, test)?;
    let mut record = pretrain(train, &mut bundle, cfg.view_pair()?, &cfg.pretrain_config(seed))?;
    let alignment_after = held_out_alignment(&bundle, cfg, test)?;
    record.extras = serde_json::json!({
        "views": cfg.views,
        "alignment_before": alignment_before,
        "alignment_after": alignment_after,
    });
    if let Some(dir) = out {
        cfg.write_resolved(dir)?;
        let extras = CheckpointExtras {
            kind: "pretrain".into(),
            seed,
            config: cfg.clone(),
        };
        save_checkpoint(&bundle, to_value(&extras)?, &dir.join(CHECKPOINT_DIR))?;
        record.save(dir)?;
        write_json_file(
            &dir.join(ALIGNMENT_FILE),
            &serde_json::json!({
                "evaluated_on": "held-out split",
                "before": alignment_before,
                "after": alignment_after,
                "gap_after": alignment_after.gap(),
            }),
        )?;
    }
    Ok(PretrainOutcome {
        bundle,
        record,
        alignment_before,
        alignment_after,
    })
}

fn to_value(v: &impl Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

pub struct SupervisedOutcome {
    pub summary: RunSummary,
    pub record: RunRecord,
    pub bundle: ModelBundle,
    /// For fine-tuning: frozen encoder bytes equal the pretrained checkpoint.
    pub frozen_bytes_identical: Option<bool>,
    pub dir: Option<PathBuf>,
}

/// Every encoder tensor (parameters and running statistics) as raw bits.
pub fn encoder_bits(bundle: &ModelBundle) -> Vec<u64> {
    let mut b = bundle.clone();
    b.named_tensors_mut()
        .into_iter()
        .filter(|(n, _)| n.starts_with("encoder"))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn write_supervised(dir: &Path, cfg: &ExperimentConfig, o: &SupervisedOutcome, seed: u64) -> Result<()> {
    cfg.write_resolved(dir)?;
    let extras = CheckpointExtras {
        kind: o.summary.method.clone(),
        seed,
        config: cfg.clone(),
    };
    save_checkpoint(&o.bundle, to_value(&extras)?, &dir.join(CHECKPOINT_DIR))?;
    o.record.save(dir)?;
    write_json_file(&dir.join(METRICS_FILE), &o.summary.report)?;
    write_text(&dir.join(CONFUSION_FILE), &o.summary.report.confusion.to_csv())?;
    write_json_file(&dir.join(SUMMARY_FILE), &o.summary)
}

/// Freeze the pretrained encoders, train a fresh classifier on the labelled
/// subset and evaluate on `test`. When `reference` names a checkpoint the
/// frozen encoder bytes are compared against it, otherwise against
/// `pretrained`.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    cfg: &ExperimentConfig,
    pretrained: &ModelBundle,
    reference: Option<&Path>,
    train: &[SyncedSample],
    test: &[SyncedSample],
    seed: u64,
    shots: Shots,
    out: Option<&Path>,
) -> Result<SupervisedOutcome> {
    let mut bundle = pretrained.clone();
    bundle.freeze(Component::Encoders)?;
    bundle.reset_classifier(seed)?;
    let subset = labelled_subset(train, seed, shots)?;
    let mut record = finetune(&subset, &mut bundle, &cfg.finetune_config(seed, shots.count()), Some(test))?;
    record.extras = serde_json::json!({ "shots": shots, "validation": "held-out split" });
    let report = evaluate(&bundle, test)?;
    let expected = match reference {
        Some(p) => encoder_bits(&load_checkpoint(p)?.0),
        None => encoder_bits(pretrained),
    };
    let outcome = SupervisedOutcome {
        summary: RunSummary {
            name: format!("{METHOD_CONTRASTIVE}_k{shots}_s{seed}"),
            method: METHOD_CONTRASTIVE.into(),
            shots: shots.count(),
            report,
        },
        record,
        frozen_bytes_identical: Some(encoder_bits(&bundle) == expected),
        bundle,
        dir: out.map(Path::to_path_buf),
    };
    if let Some(dir) = out {
        write_supervised(dir, cfg, &outcome, seed)?;
    }
    Ok(outcome)
}

/// Supervised encoder + classifier from scratch on the same labelled subset
/// a fine-tuning run with this seed would use.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    views: BaselineViews,
    train: &[SyncedSample],
    test: &[SyncedSample],
    seed: u64,
    shots: Shots,
    out: Option<&Path>,
) -> Result<SupervisedOutcome> {
    let subset = labelled_subset(train, seed, shots)?;
    let encoder = cfg.encoder_for(views.eval_modality(), train)?;
    let (bundle, mut record) =
        train_supervised_baseline(&subset, &encoder, views, &cfg.finetune_config(seed, shots.count()), Some(test))?;
    record.extras = serde_json::json!({
        "shots": shots,
        "views": baseline_views_name(views),
        "validation": "held-out split",
    });
    let report = evaluate(&bundle, test)?;
    let method = baseline_method(views);
    let outcome = SupervisedOutcome {
        summary: RunSummary {
            name: format!("{method}_k{shots}_s{seed}"),
            method,
            shots: shots.count(),
            report,
        },
        record,
        bundle,
        frozen_bytes_identical: None,
        dir: out.map(Path::to_path_buf),
    };
    if let Some(dir) = out {
        write_supervised(dir, cfg, &outcome, seed)?;
    }
    Ok(outcome)
}

pub struct SeedOutcome {
    pub seed: u64,
    pub pretrain: PretrainOutcome,
    pub finetune: Vec<SupervisedOutcome>,
    pub baseline: Vec<SupervisedOutcome>,
}

pub struct ProtocolOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub comparison: Comparison,
}

impl ProtocolOutcome {
    pub fn summaries(&self) -> Vec<RunSummary> {
        let mut v = Vec::new();
        for s in &self.seeds {
            v.extend(s.baseline.iter().map(|o| o.summary.clone()));
            v.extend(s.finetune.iter().map(|o| o.summary.clone()));
        }
        v
    }

    /// Mean macro F1 of `method` at `shots` across seeds.
    pub fn mean_macro_f1(&self, method: &str, shots: Shots) -> Option<f64> {
        self.comparison
            .curves
            .iter()
            .find(|p| p.method == method && p.shots == shots.count())
            .map(|p| p.mean_macro_f1)
    }
}

/// Full sweep over `cfg.seeds` x `cfg.shots`. With `out`, every run gets its
/// own directory (`seed{S}/pretrain`, `seed{S}/{method}_k{K}`) and the
/// comparison report lands in `out/report`.
pub fn run_protocol(cfg: &ExperimentConfig, samples: &[SyncedSample], out: Option<&Path>) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let (train, test) = split(cfg, samples)?;
    let baseline_views = cfg.baseline()?;
    if let Some(dir) = out {
        cfg.write_resolved(dir)?;
    }
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out.map(|d| d.join(format!("seed{seed}")));
        let pre_dir = seed_dir.as_ref().map(|d| d.join("pretrain"));
        let pre = run_pretrain(cfg, &train, &test, seed, pre_dir.as_deref())?;
        let reference = pre_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
        let mut ft = Vec::new();
        let mut bl = Vec::new();
        for &shots in &cfg.shots {
            let run_dir = |m: &str| seed_dir.as_ref().map(|d| d.join(format!("{m}_k{shots}")));
            ft.push(run_finetune(
                cfg,
                &pre.bundle,
                reference.as_deref(),
                &train,
                &test,
                seed,
                shots,
                run_dir(METHOD_CONTRASTIVE).as_deref(),
            )?);
            bl.push(run_baseline(
                cfg,
                baseline_views,
                &train,
                &test,
                seed,
                shots,
                run_dir(&baseline_method(baseline_views)).as_deref(),
            )?);
        }
        seeds.push(SeedOutcome {
            seed,
            pretrain: pre,
            finetune: ft,
            baseline: bl,
        });
    }
    let mut outcome = ProtocolOutcome {
        seeds,
        comparison: Comparison {
            reference: String::new(),
            class_names: Vec::new(),
            rows: Vec::new(),
            curves: Vec::new(),
        },
    };
    outcome.comparison = compare_runs(&outcome.summaries())?;
    if let Some(dir) = out {
        crate::report::write_report_from_dirs(&[dir.to_path_buf()], &dir.join("report"))?;
    }
    Ok(outcome)
}
