use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, BatchStats, Conv2d};
use crate::diffcore::{window_out, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Shallow,
    AlexnetLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One conv → batch-norm → activation (→ pool) stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    /// `(window, stride)` of the trailing max-pool, if any.
    pub pool: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    /// (frequency bins, time frames) of the input spectrogram.
    pub input_shape: (usize, usize),
    pub upsample_factor: usize,
    /// Filters per conv stage; `None` uses the architecture default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<Vec<usize>>,
}

impl EncoderConfig {
    pub fn new(architecture: Architecture, input_shape: (usize, usize), upsample_factor: usize) -> Self {
        EncoderConfig {
            architecture,
            input_shape,
            upsample_factor,
            filters: None,
        }
    }

    pub fn with_filters(mut self, filters: Vec<usize>) -> Self {
        self.filters = Some(filters);
        self
    }

    pub fn default_filters(architecture: Architecture) -> Vec<usize> {
        match architecture {
            Architecture::Shallow => vec![32, 64, 96],
            Architecture::AlexnetLike => vec![64, 192, 384, 256, 256],
        }
    }

    pub fn stages(&self) -> Result<Vec<StageSpec>> {
        let filters = self
            .filters
            .clone()
            .unwrap_or_else(|| Self::default_filters(self.architecture));
        let expected = Self::default_filters(self.architecture).len();
        if filters.len() != expected || filters.contains(&0) {
            return Err(Error::Config(format!(
                "{:?} encoder needs {expected} positive filter counts, got {filters:?}",
                self.architecture
            )));
        }
        let stages = match self.architecture {
            Architecture::Shallow => {
                let acts = [Activation::Relu, Activation::Relu, Activation::Tanh];
                filters
                    .iter()
                    .zip(acts)
                    .map(|(&f, a)| StageSpec {
                        filters: f,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        activation: a,
                        pool: Some((2, 2)),
                    })
                    .collect()
            }
            Architecture::AlexnetLike => {
                let geometry = [(11, 4, 2), (5, 1, 2), (3, 1, 1), (3, 1, 1), (3, 1, 1)];
                let pooled = [true, true, false, false, true];
                filters
                    .iter()
                    .zip(geometry)
                    .zip(pooled)
                    .map(|((&f, (k, s, p)), pool)| StageSpec {
                        filters: f,
                        kernel: k,
                        stride: s,
                        padding: p,
                        activation: Activation::Relu,
                        pool: pool.then_some((3, 2)),
                    })
                    .collect()
            }
        };
        Ok(stages)
    }

    /// `[C, H, W]` of the final feature map, or a configuration error when the
    /// input cannot pass through every stage.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        if !(1..=3).contains(&self.upsample_factor) {
            return Err(Error::Config(format!(
                "upsample_factor must be 1, 2 or 3, got {}",
                self.upsample_factor
            )));
        }
        let (h0, w0) = self.input_shape;
        if h0 == 0 || w0 == 0 {
            return Err(Error::Config("input_shape must be positive".into()));
        }
        let (mut h, mut w) = (h0 * self.upsample_factor, w0 * self.upsample_factor);
        let mut c = 1;
        for (i, st) in self.stages()?.iter().enumerate() {
            let too_small = || {
                Error::Config(format!(
                    "input {h0}x{w0} (x{}) too small for stage {} of the {:?} encoder",
                    self.upsample_factor,
                    i + 1,
                    self.architecture
                ))
            };
            h = window_out(h, st.kernel, st.stride, st.padding).ok_or_else(too_small)?;
            w = window_out(w, st.kernel, st.stride, st.padding).ok_or_else(too_small)?;
            if let Some((win, s)) = st.pool {
                h = window_out(h, win, s, 0).ok_or_else(too_small)?;
                w = window_out(w, win, s, 0).ok_or_else(too_small)?;
            }
            c = st.filters;
        }
        Ok([c, h, w])
    }

    /// Flattened size of the final feature map.
    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

/// Per-view convolutional encoder `f_θ`: upsample, conv stages, flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

/// Parameters registered per stage: conv weight, conv bias, bn gamma, bn beta.
const PARAMS_PER_STAGE: usize = 4;

impl Encoder {
    pub fn build(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.output_shape()?;
        let mut c_in = 1;
        let mut stages = Vec::new();
        for spec in config.stages()? {
            let conv = Conv2d::new(c_in, spec.filters, spec.kernel, spec.stride, spec.padding, rng);
            let bn = BatchNorm2d::new(spec.filters);
            c_in = spec.filters;
            stages.push(Stage { spec, conv, bn });
        }
        Ok(Encoder { config, stages })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config
            .embedding_dim()
            .expect("validated at construction")
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.stages
            .iter()
            .flat_map(|s| [&s.conv.weight, &s.conv.bias, &s.bn.gamma, &s.bn.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages
            .iter_mut()
            .flat_map(|s| {
                [
                    &mut s.conv.weight,
                    &mut s.conv.bias,
                    &mut s.bn.gamma,
                    &mut s.bn.beta,
                ]
            })
            .collect()
    }

    /// Named parameters and buffers, for checkpoints.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = format!("stage{}", i + 1);
            out.push((format!("{p}.conv.weight"), &mut s.conv.weight));
            out.push((format!("{p}.conv.bias"), &mut s.conv.bias));
            out.push((format!("{p}.bn.gamma"), &mut s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut s.bn.beta));
            out.push((format!("{p}.bn.running_mean"), &mut s.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &mut s.bn.running_var));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Conv weights and biases only.
    pub fn conv_param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv.weight.numel() + s.conv.bias.numel())
            .sum()
    }

    /// `x` is `[B, 1, H, W]`; returns `[B, embedding_dim]`. With `train`,
    /// batch norm uses batch statistics, which are returned so the caller can
    /// commit them with [`Encoder::update_running`].
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, train: bool) -> Result<(Var, Vec<BatchStats>)> {
        if p.len() != self.stages.len() * PARAMS_PER_STAGE {
            return Err(Error::arg("encoder received the wrong number of bound parameters"));
        }
        let s = tape.shape(x);
        let (h, w) = self.config.input_shape;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::shape(format!(
                "encoder expects [B, 1, {h}, {w}], got {s:?}"
            )));
        }
        let mut y = if self.config.upsample_factor > 1 {
            tape.upsample_nearest(x, self.config.upsample_factor)?
        } else {
            x
        };
        let mut stats = Vec::new();
        for (stage, sp) in self.stages.iter().zip(p.chunks(PARAMS_PER_STAGE)) {
            y = stage.conv.forward(tape, &sp[..2], y)?;
            let (bn_out, batch) = stage.bn.forward(tape, &sp[2..], y, train)?;
            stats.extend(batch);
            y = match stage.spec.activation {
                Activation::Relu => tape.relu(bn_out)?,
                Activation::Tanh => tape.tanh(bn_out)?,
            };
            if let Some((win, st)) = stage.spec.pool {
                y = tape.maxpool2d(y, win, st)?;
            }
        }
        Ok((tape.flatten(y)?, stats))
    }

    /// Commit batch statistics from a training-mode forward pass.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (stage, st) in self.stages.iter_mut().zip(stats) {
            stage.bn.update_running(st);
        }
    }
}
