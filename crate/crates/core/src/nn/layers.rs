use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BnStats, Tape, Tensor, Var};
use crate::error::Result;

/// Uniform fan-in scaled initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data length agree")
}

/// Affine map `y = x · W + b`, with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: kaiming_uniform(&[in_dim, out_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[0])?;
        tape.add_row_bias(y, p[1])
    }
}

/// 2-D convolution layer with square kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: kaiming_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, p[0], p[1], self.stride, self.padding)
    }
}

/// Batch normalization with running statistics.
///
/// Running variance is updated with the unbiased batch variance; the
/// normalization itself uses the biased one.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// `train` normalizes with batch statistics and returns them for
    /// [`BatchNorm2d::update_running`]; otherwise the running estimates are
    /// used and nothing is returned.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, train: bool) -> Result<(Var, Option<BatchStats>)> {
        let stats = if train {
            BnStats::Batch
        } else {
            BnStats::Fixed {
                mean: self.running_mean.data().to_vec(),
                var: self.running_var.data().to_vec(),
            }
        };
        let s = tape.shape(x);
        let count = s.first().copied().unwrap_or(1) * s.iter().skip(2).product::<usize>();
        let (y, batch) = tape.batchnorm2d(x, p[0], p[1], &stats, self.eps)?;
        Ok((y, batch.map(|(mean, var)| BatchStats { mean, var, count })))
    }

    /// Exponential moving average update of the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Two-layer perceptron: linear → relu → linear, producing raw logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            hidden: Linear::new(in_dim, hidden, rng),
            output: Linear::new(hidden, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.hidden.params();
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.hidden.params_mut();
        v.extend(self.output.params_mut());
        v
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, &p[..2], x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, &p[2..4], h)
    }
}

/// Register tensors on the tape, as differentiable leaves when `trainable`.
pub fn bind(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|t| {
            if trainable {
                tape.param((*t).clone())
            } else {
                tape.constant((*t).clone())
            }
        })
        .collect()
}
