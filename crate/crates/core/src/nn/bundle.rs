use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::layers::{bind, BatchStats, Linear, Mlp};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{Modality, SyncedSample, N_CLASSES};

pub const PROJECTION_DIM: usize = 128;
pub const CLASSIFIER_HIDDEN: usize = 128;

/// How per-view embeddings are combined before the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Concatenate every view's embedding.
    #[default]
    Concat,
    /// Use the first view only.
    First,
    /// Elementwise mean; views must share an embedding width.
    Mean,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "first" => Ok(Fusion::First),
            "mean" => Ok(Fusion::Mean),
            other => Err(Error::arg(format!("unknown fusion '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    /// Modality consumed by each encoder, in view order.
    pub views: Vec<Modality>,
    pub encoders: Vec<EncoderConfig>,
    /// Build one projection head per view (contrastive models only).
    pub projection_heads: bool,
    pub projection_dim: usize,
    pub classifier_hidden: usize,
    pub n_classes: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl BundleConfig {
    pub fn new(views: Vec<Modality>, encoders: Vec<EncoderConfig>, projection_heads: bool, seed: u64) -> Self {
        BundleConfig {
            views,
            encoders,
            projection_heads,
            projection_dim: PROJECTION_DIM,
            classifier_hidden: CLASSIFIER_HIDDEN,
            n_classes: N_CLASSES,
            fusion: Fusion::Concat,
            seed,
        }
    }

    fn classifier_input(&self, dims: &[usize]) -> Result<usize> {
        match self.fusion {
            Fusion::Concat => Ok(dims.iter().sum()),
            Fusion::First => Ok(dims[0]),
            Fusion::Mean => {
                if dims.iter().any(|&d| d != dims[0]) {
                    Err(Error::Config(format!(
                        "mean fusion needs equal embedding widths, got {dims:?}"
                    )))
                } else {
                    Ok(dims[0])
                }
            }
        }
    }
}

/// Selects one part of a [`ModelBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoders,
    Encoder(usize),
    ProjectionHeads,
    Classifier,
}

impl FromStr for Component {
    type Err = Error;

    /// Accepts `encoders`, `encoder1`, `encoder2`, ..., `heads`,
    /// `projection_heads`, `classifier`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoders" => Ok(Component::Encoders),
            "heads" | "projection_heads" => Ok(Component::ProjectionHeads),
            "classifier" => Ok(Component::Classifier),
            other => other
                .strip_prefix("encoder")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| Component::Encoder(n - 1))
                .ok_or_else(|| Error::arg(format!("unknown component '{other}'"))),
        }
    }
}

/// Which parts to register on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parts {
    pub encoders: bool,
    pub heads: bool,
    pub classifier: bool,
}

impl Parts {
    pub const PRETRAIN: Parts = Parts {
        encoders: true,
        heads: true,
        classifier: false,
    };
    pub const CLASSIFY: Parts = Parts {
        encoders: true,
        heads: false,
        classifier: true,
    };
    pub const CLASSIFIER: Parts = Parts {
        encoders: false,
        heads: false,
        classifier: true,
    };
}

/// Tape handles of a bundle's parameters, in canonical order.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub encoders: Vec<Vec<Var>>,
    pub heads: Vec<Vec<Var>>,
    pub classifier: Vec<Var>,
}

/// Per-view encoders `f_θm`, projection heads `g_θm` and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub encoders: Vec<Encoder>,
    pub heads: Vec<Linear>,
    pub classifier: Mlp,
    encoder_frozen: Vec<bool>,
    heads_frozen: bool,
    classifier_frozen: bool,
}

impl ModelBundle {
    /// Build with seeded initialization. Each encoder owns its parameters.
    pub fn new(config: BundleConfig) -> Result<Self> {
        if config.views.is_empty() || config.views.len() != config.encoders.len() {
            return Err(Error::Config(format!(
                "{} views but {} encoder configs",
                config.views.len(),
                config.encoders.len()
            )));
        }
        if config.projection_heads && config.views.len() != 2 {
            return Err(Error::Config("projection heads need exactly two views".into()));
        }
        if config.n_classes < 2 || config.projection_dim == 0 || config.classifier_hidden == 0 {
            return Err(Error::Config("invalid head or classifier widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoders = config
            .encoders
            .iter()
            .map(|c| Encoder::build(c.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = encoders.iter().map(Encoder::embedding_dim).collect();
        let heads = if config.projection_heads {
            dims.iter()
                .map(|&d| Linear::new(d, config.projection_dim, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let classifier = Mlp::new(
            config.classifier_input(&dims)?,
            config.classifier_hidden,
            config.n_classes,
            &mut rng,
        );
        let n = encoders.len();
        Ok(ModelBundle {
            config,
            encoders,
            heads,
            classifier,
            encoder_frozen: vec![false; n],
            heads_frozen: false,
            classifier_frozen: false,
        })
    }

    pub fn n_views(&self) -> usize {
        self.encoders.len()
    }

    pub fn embedding_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(Encoder::embedding_dim).collect()
    }

    /// Replace the classifier with a freshly initialized one, drawn from a
    /// stream of `seed` that construction never uses.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let dims = self.embedding_dims();
        self.classifier = Mlp::new(
            self.config.classifier_input(&dims)?,
            self.config.classifier_hidden,
            self.config.n_classes,
            &mut rng,
        );
        Ok(())
    }

    fn set_frozen(&mut self, c: Component, value: bool) -> Result<()> {
        match c {
            Component::Encoders => self.encoder_frozen.iter_mut().for_each(|f| *f = value),
            Component::Encoder(i) => {
                let n = self.encoder_frozen.len();
                *self
                    .encoder_frozen
                    .get_mut(i)
                    .ok_or_else(|| Error::arg(format!("encoder {} does not exist (have {n})", i + 1)))? = value;
            }
            Component::ProjectionHeads => {
                if self.heads.is_empty() {
                    return Err(Error::arg("bundle has no projection heads"));
                }
                self.heads_frozen = value;
            }
            Component::Classifier => self.classifier_frozen = value,
        }
        Ok(())
    }

    /// Frozen parameters receive no updates and frozen encoders run batch
    /// norm in eval mode.
    pub fn freeze(&mut self, c: Component) -> Result<()> {
        self.set_frozen(c, true)
    }

    pub fn unfreeze(&mut self, c: Component) -> Result<()> {
        self.set_frozen(c, false)
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        match c {
            Component::Encoders => self.encoder_frozen.iter().all(|&f| f),
            Component::Encoder(i) => self.encoder_frozen.get(i).copied().unwrap_or(false),
            Component::ProjectionHeads => self.heads_frozen,
            Component::Classifier => self.classifier_frozen,
        }
    }

    /// Flags in the order encoders..., heads, classifier.
    pub fn frozen_flags(&self) -> Vec<bool> {
        let mut v = self.encoder_frozen.clone();
        v.push(self.heads_frozen);
        v.push(self.classifier_frozen);
        v
    }

    pub fn set_frozen_flags(&mut self, flags: &[bool]) -> Result<()> {
        let n = self.encoder_frozen.len();
        if flags.len() != n + 2 {
            return Err(Error::Format(format!("expected {} frozen flags, got {}", n + 2, flags.len())));
        }
        self.encoder_frozen.copy_from_slice(&flags[..n]);
        self.heads_frozen = flags[n];
        self.classifier_frozen = flags[n + 1];
        Ok(())
    }

    /// Register the selected parts on `tape`; frozen parts become constants.
    pub fn bind(&self, tape: &mut Tape, parts: Parts) -> Bound {
        let mut b = Bound::default();
        if parts.encoders {
            b.encoders = self
                .encoders
                .iter()
                .zip(&self.encoder_frozen)
                .map(|(e, &frozen)| bind(tape, &e.params(), !frozen))
                .collect();
        }
        if parts.heads {
            b.heads = self
                .heads
                .iter()
                .map(|h| bind(tape, &h.params(), !self.heads_frozen))
                .collect();
        }
        if parts.classifier {
            b.classifier = bind(tape, &self.classifier.params(), !self.classifier_frozen);
        }
        b
    }

    /// Trainable parameters of the bound parts paired with their tape handles.
    pub fn trainable_with_vars<'a>(&'a mut self, bound: &Bound) -> Vec<(&'a mut Tensor, Var)> {
        let mut out = Vec::new();
        for ((enc, vars), &frozen) in self.encoders.iter_mut().zip(&bound.encoders).zip(&self.encoder_frozen) {
            if !frozen {
                out.extend(enc.params_mut().into_iter().zip(vars.iter().copied()));
            }
        }
        if !self.heads_frozen {
            for (h, vars) in self.heads.iter_mut().zip(&bound.heads) {
                out.extend(h.params_mut().into_iter().zip(vars.iter().copied()));
            }
        }
        if !self.classifier_frozen && !bound.classifier.is_empty() {
            out.extend(
                self.classifier
                    .params_mut()
                    .into_iter()
                    .zip(bound.classifier.iter().copied()),
            );
        }
        out
    }

    /// Run encoder `view` on `x` (`[B,1,H,W]`). Batch norm uses batch
    /// statistics only when `training` and the encoder is not frozen.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, view: usize, x: Var, training: bool) -> Result<(Var, Vec<BatchStats>)> {
        let enc = self
            .encoders
            .get(view)
            .ok_or_else(|| Error::arg(format!("view index {view} out of range")))?;
        let train = training && !self.encoder_frozen[view];
        enc.forward(tape, &bound.encoders[view], x, train)
    }

    /// Commit batch-norm statistics gathered by [`ModelBundle::encode`].
    pub fn commit_stats(&mut self, view: usize, stats: &[BatchStats]) {
        if !self.encoder_frozen[view] {
            self.encoders[view].update_running(stats);
        }
    }

    /// Apply projection head `view`.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, view: usize, h: Var) -> Result<Var> {
        let head = self
            .heads
            .get(view)
            .ok_or_else(|| Error::arg(format!("no projection head for view {view}")))?;
        let s = tape.shape(h);
        if s.len() != 2 || s[1] != head.in_dim() {
            return Err(Error::shape(format!(
                "projection head expects width {}, got {s:?}",
                head.in_dim()
            )));
        }
        head.forward(tape, &bound.heads[view], h)
    }

    pub fn fuse(&self, tape: &mut Tape, hs: &[Var]) -> Result<Var> {
        match (self.config.fusion, hs) {
            (_, []) => Err(Error::arg("no embeddings to fuse")),
            (Fusion::First, [h, ..]) | (_, [h]) => Ok(*h),
            (Fusion::Concat, _) => tape.concat(hs, 1),
            (Fusion::Mean, [first, rest @ ..]) => {
                let mut acc = *first;
                for h in rest {
                    acc = tape.add(acc, *h)?;
                }
                tape.scale(acc, 1.0 / hs.len() as f64)
            }
        }
    }

    /// Classifier logits `[B, n_classes]` from a fused embedding.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let s = tape.shape(h);
        if s.len() != 2 || s[1] != self.classifier.in_dim() {
            return Err(Error::shape(format!(
                "classifier expects width {}, got {s:?}",
                self.classifier.in_dim()
            )));
        }
        self.classifier.forward(tape, &bound.classifier, h)
    }

    /// Eval-mode embeddings of each view, `[B, D_view]` per view. Never
    /// touches the projection heads.
    pub fn embed_eval(&self, samples: &[&SyncedSample]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(
            &mut tape,
            Parts {
                encoders: true,
                heads: false,
                classifier: false,
            },
        );
        let mut out = Vec::new();
        for (v, &m) in self.config.views.iter().enumerate() {
            let x = tape.constant(stack_view(samples, m, self.encoders[v].config.input_shape)?);
            let (h, _) = self.encode(&mut tape, &bound, v, x, false)?;
            out.push(tape.value(h).clone());
        }
        Ok(out)
    }

    /// Eval-mode logits for a batch of samples.
    pub fn logits(&self, samples: &[&SyncedSample]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Parts::CLASSIFY);
        let mut hs = Vec::new();
        for (v, &m) in self.config.views.iter().enumerate() {
            let x = tape.constant(stack_view(samples, m, self.encoders[v].config.input_shape)?);
            hs.push(self.encode(&mut tape, &bound, v, x, false)?.0);
        }
        let h = self.fuse(&mut tape, &hs)?;
        let logits = self.classify(&mut tape, &bound, h)?;
        Ok(tape.value(logits).clone())
    }

    /// Order-sensitive FNV-1a digest over the bytes of every encoder tensor
    /// (parameters and running statistics).
    pub fn encoder_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for enc in &self.encoders {
            for s in &enc.stages {
                for t in [
                    &s.conv.weight,
                    &s.conv.bias,
                    &s.bn.gamma,
                    &s.bn.beta,
                    &s.bn.running_mean,
                    &s.bn.running_var,
                ] {
                    for v in t.data() {
                        for b in v.to_le_bytes() {
                            h ^= u64::from(b);
                            h = h.wrapping_mul(0x0100_0000_01b3);
                        }
                    }
                }
            }
        }
        h
    }

    /// Named parameters and buffers in canonical order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.encoders.iter_mut().enumerate() {
            for (n, t) in e.named_tensors_mut() {
                out.push((format!("encoder{}.{n}", i + 1), t));
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{}.weight", i + 1), &mut h.weight));
            out.push((format!("head{}.bias", i + 1), &mut h.bias));
        }
        out.push(("classifier.hidden.weight".into(), &mut self.classifier.hidden.weight));
        out.push(("classifier.hidden.bias".into(), &mut self.classifier.hidden.bias));
        out.push(("classifier.output.weight".into(), &mut self.classifier.output.weight));
        out.push(("classifier.output.bias".into(), &mut self.classifier.output.bias));
        out
    }
}

/// Stack one modality of each sample into `[B, 1, H, W]`.
pub fn stack_view(samples: &[&SyncedSample], m: Modality, shape: (usize, usize)) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let (h, w) = shape;
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let v = s.view(m)?;
        if v.shape() != shape {
            return Err(Error::Data(format!(
                "sample {} view {m} is {:?}, encoder expects {shape:?}",
                s.id,
                v.shape()
            )));
        }
        data.extend(v.values().iter().map(|&x| f64::from(x)));
    }
    Tensor::new(&[samples.len(), 1, h, w], data)
}
