//! Optimization loops: contrastive pretraining, frozen-encoder fine-tuning,
//! supervised baselines, few-shot sampling and the optimizers.

mod optim;
mod record;
mod sampling;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{optimizer_step, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use record::RunRecord;
pub use sampling::{few_shot_sample, require_all_classes};

use crate::contrastive::{nt_xent_tape, project_pair, LossConfig, DEFAULT_TEMPERATURE};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{argmax, report_from_predictions};
use crate::nn::{BundleConfig, Component, EncoderConfig, ModelBundle, Parts};
use crate::signal::{Modality, SyncedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub temperature: f64,
    pub seed: u64,
    /// Labelled examples per class; `None` uses every labelled sample.
    pub shots: Option<usize>,
    /// Validation cadence in epochs; the final epoch is always evaluated.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdamLike,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            shots: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.val_every == 0 {
            return Err(Error::arg("val_every must be >= 1"));
        }
        if self.shots == Some(0) {
            return Err(Error::arg("shots must be >= 1"));
        }
        LossConfig::new(self.temperature).map(|_| ())
    }

    fn validate_now(&self, epoch: usize) -> bool {
        (epoch + 1) % self.val_every == 0 || epoch + 1 == self.epochs
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
        }
    }
}

/// Shuffle stream separate from weight initialization.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Gradient step on every trainable parameter registered in `bound`.
fn apply_step(bundle: &mut ModelBundle, bound: &crate::nn::Bound, grads: &crate::diffcore::Gradients, opt: &mut Optimizer) -> Result<()> {
    let mut pairs: Vec<(&mut Tensor, Option<&Tensor>)> = bundle
        .trainable_with_vars(bound)
        .into_iter()
        .map(|(t, v)| (t, grads.get(v)))
        .collect();
    opt.step(&mut pairs)
}

/// Contrastive pretraining of the encoders and projection heads.
///
/// Each epoch shuffles the set and walks it in mini-batches; a trailing batch
/// of fewer than two samples is skipped because NT-Xent needs negatives.
pub fn pretrain(
    train: &[SyncedSample],
    bundle: &mut ModelBundle,
    view_pair: (Modality, Modality),
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::arg("pretraining needs batch_size >= 2"));
    }
    if train.len() < 2 {
        return Err(Error::arg("pretraining needs at least 2 samples"));
    }
    for s in train {
        s.view(view_pair.0)?;
        s.view(view_pair.1)?;
    }
    let (a, b) = crate::contrastive::view_indices(bundle, view_pair)?;
    let started = Instant::now();
    let loss_cfg = cfg.loss_config();
    let mut rng = shuffle_rng(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = RunRecord::new("pretrain", cfg);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let ctx = || format!("epoch {} batch {}", epoch + 1, bi + 1);
            let batch: Vec<&SyncedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape, Parts::PRETRAIN);
            let (z, [sa, sb]) = project_pair(&mut tape, bundle, &bound, &batch, view_pair, true).map_err(|e| e.context(ctx()))?;
            let loss = nt_xent_tape(&mut tape, z, &loss_cfg).map_err(|e| e.context(ctx()))?;
            let grads = tape.backward(loss).map_err(|e| e.context(ctx()))?;
            total += tape.value(loss).item()?;
            batches += 1;
            apply_step(bundle, &bound, &grads, &mut opt)?;
            bundle.commit_stats(a, &sa);
            bundle.commit_stats(b, &sb);
        }
        record.push_epoch(total / batches as f64, None);
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Mean softmax cross-entropy of `logits` `[B, K]` against `labels`.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits, false)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// Eval-mode fused encoder features `[B, D]` for `samples`.
pub fn fused_features(bundle: &ModelBundle, samples: &[SyncedSample]) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&SyncedSample> = chunk.iter().collect();
        let views = bundle.embed_eval(&refs)?;
        let mut tape = Tape::new();
        let hs: Vec<Var> = views.into_iter().map(|t| tape.constant(t)).collect();
        let fused = bundle.fuse(&mut tape, &hs)?;
        let v = tape.value(fused);
        width = v.shape()[1];
        data.extend_from_slice(v.data());
    }
    if samples.is_empty() {
        return Err(Error::arg("no samples to embed"));
    }
    Tensor::new(&[samples.len(), width], data)
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), w], data)
}

fn classifier_macro_f1(bundle: &ModelBundle, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, Parts::CLASSIFIER);
    let h = tape.constant(features.clone());
    let logits = bundle.classify(&mut tape, &bound, h)?;
    let lv = tape.value(logits);
    let k = lv.shape()[1];
    let pred: Vec<usize> = lv.data().chunks(k).map(argmax).collect();
    Ok(report_from_predictions(labels, &pred)?.macro_f1)
}

/// Train the classifier on top of frozen encoders.
///
/// Encoders must already be frozen; their eval-mode features are computed
/// once and reused every epoch. With `val`, the macro F1 on that set is
/// recorded after every epoch.
pub fn finetune(
    labelled: &[SyncedSample],
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    val: Option<&[SyncedSample]>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if !bundle.is_frozen(Component::Encoders) {
        return Err(Error::arg("finetune requires frozen encoders"));
    }
    if labelled.is_empty() {
        return Err(Error::arg("labelled set is empty"));
    }
    require_all_classes(labelled)?;
    let started = Instant::now();
    let features = fused_features(bundle, labelled)?;
    let labels: Vec<usize> = labelled.iter().map(|s| s.label.index()).collect();
    let val_data = match val {
        Some(v) => Some((fused_features(bundle, v)?, v.iter().map(|s| s.label.index()).collect::<Vec<_>>())),
        None => None,
    };
    let mut rng = shuffle_rng(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    let mut record = RunRecord::new("finetune", cfg);
    record.subset_ids = Some(labelled.iter().map(|s| s.id).collect());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape, Parts::CLASSIFIER);
            let x = tape.constant(gather_rows(&features, chunk)?);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = bundle.classify(&mut tape, &bound, x)?;
            let loss = cross_entropy_tape(&mut tape, logits, &y)?;
            let grads = tape.backward(loss).map_err(|e| e.context(format!("epoch {}", epoch + 1)))?;
            total += tape.value(loss).item()?;
            batches += 1;
            apply_step(bundle, &bound, &grads, &mut opt)?;
        }
        let f1 = match &val_data {
            Some((f, l)) if cfg.validate_now(epoch) => Some(classifier_macro_f1(bundle, f, l)?),
            _ => None,
        };
        record.push_epoch(total / batches as f64, f1);
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Which views a supervised baseline consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineViews {
    /// One receiver only.
    Single(Modality),
    /// Both receivers' samples pooled through one encoder; evaluated on the
    /// first.
    Joint(Modality, Modality),
}

impl BaselineViews {
    pub fn eval_modality(self) -> Modality {
        match self {
            BaselineViews::Single(m) | BaselineViews::Joint(m, _) => m,
        }
    }

    fn training_modalities(self) -> Vec<Modality> {
        match self {
            BaselineViews::Single(m) => vec![m],
            BaselineViews::Joint(a, b) => vec![a, b],
        }
    }
}

/// Stack `(sample, modality)` examples into `[B, 1, H, W]`.
fn stack_examples(samples: &[SyncedSample], examples: &[(usize, Modality)], shape: (usize, usize)) -> Result<Tensor> {
    let (h, w) = shape;
    let mut data = Vec::with_capacity(examples.len() * h * w);
    for &(i, m) in examples {
        let v = samples[i].view(m)?;
        if v.shape() != shape {
            return Err(Error::Data(format!(
                "sample {} view {m} is {:?}, encoder expects {shape:?}",
                samples[i].id,
                v.shape()
            )));
        }
        data.extend(v.values().iter().map(|&x| f64::from(x)));
    }
    Tensor::new(&[examples.len(), 1, h, w], data)
}

/// End-to-end supervised training of one encoder plus classifier from random
/// initialization, with no contrastive step.
pub fn train_supervised_baseline(
    labelled: &[SyncedSample],
    encoder: &EncoderConfig,
    views: BaselineViews,
    cfg: &TrainConfig,
    val: Option<&[SyncedSample]>,
) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    if labelled.is_empty() {
        return Err(Error::arg("labelled set is empty"));
    }
    require_all_classes(labelled)?;
    if cfg.batch_size < 2 {
        return Err(Error::arg("baseline training needs batch_size >= 2 for batch norm"));
    }
    let started = Instant::now();
    let mut bundle = ModelBundle::new(BundleConfig::new(vec![views.eval_modality()], vec![encoder.clone()], false, cfg.seed))?;
    let examples: Vec<(usize, Modality)> = views
        .training_modalities()
        .into_iter()
        .flat_map(|m| (0..labelled.len()).map(move |i| (i, m)))
        .collect();
    let mut rng = shuffle_rng(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut record = RunRecord::new("baseline", cfg);
    record.subset_ids = Some(labelled.iter().map(|s| s.id).collect());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Batch statistics are undefined for a single example.
            if chunk.len() < 2 {
                continue;
            }
            let ctx = || format!("epoch {} batch {}", epoch + 1, bi + 1);
            let batch: Vec<(usize, Modality)> = chunk.iter().map(|&k| examples[k]).collect();
            let y: Vec<usize> = batch.iter().map(|&(i, _)| labelled[i].label.index()).collect();
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape, Parts::CLASSIFY);
            let x = tape.constant(stack_examples(labelled, &batch, encoder.input_shape)?);
            let (h, stats) = bundle.encode(&mut tape, &bound, 0, x, true).map_err(|e| e.context(ctx()))?;
            let logits = bundle.classify(&mut tape, &bound, h)?;
            let loss = cross_entropy_tape(&mut tape, logits, &y)?;
            let grads = tape.backward(loss).map_err(|e| e.context(ctx()))?;
            total += tape.value(loss).item()?;
            batches += 1;
            apply_step(&mut bundle, &bound, &grads, &mut opt)?;
            bundle.commit_stats(0, &stats);
        }
        let f1 = match val {
            Some(v) if cfg.validate_now(epoch) => Some(crate::eval::evaluate(&bundle, v)?.macro_f1),
            _ => None,
        };
        record.push_epoch(total / batches as f64, f1);
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((bundle, record))
}
