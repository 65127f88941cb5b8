use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamLike,
}

/// Per-parameter optimizer state. Slots are positional: the i-th tensor of
/// every call to [`Optimizer::step`] must be the same parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [(&mut Tensor, Option<&Tensor>)]) -> Result<()> {
        for (i, (p, g)) in params.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "parameter {i}: gradient shape {:?} vs parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(p, _)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, (p, _))| m.len() != p.numel()) {
            return Err(Error::shape("optimizer state does not match the parameter list"));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut() {
                    if let Some(g) = g {
                        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                            *x -= lr * d;
                        }
                    }
                }
            }
            OptimizerKind::AdamLike => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let gd = g.map(|g| g.data());
                    for (k, x) in p.data_mut().iter_mut().enumerate() {
                        let gk = gd.map_or(0.0, |g| g[k]);
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single update of `params` with `grads`, advancing `state`.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut Optimizer) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    let mut pairs: Vec<(&mut Tensor, Option<&Tensor>)> = params
        .iter_mut()
        .map(|p| &mut **p)
        .zip(grads.iter().map(|g| Some(*g)))
        .collect();
    state.step(&mut pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_case() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        optimizer_step(&mut [&mut p], &[&g], &mut opt).unwrap();
        assert!((p.item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamLike] {
            let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
            let before = p.clone();
            let g = Tensor::zeros(&[3]);
            let mut opt = Optimizer::new(kind, 0.01);
            optimizer_step(&mut [&mut p], &[&g], &mut opt).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; bias correction restores g = 1 and g^2 = 1.
        let lr = 1e-3;
        let mut p = Tensor::zeros(&[4]);
        let g = Tensor::full(&[4], 1.0);
        let mut opt = Optimizer::new(OptimizerKind::AdamLike, lr);
        optimizer_step(&mut [&mut p], &[&g], &mut opt).unwrap();
        for &x in p.data() {
            assert!((x + lr / (1.0 + ADAM_EPS)).abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(matches!(optimizer_step(&mut [&mut p], &[&g], &mut opt), Err(Error::Shape(_))));
    }
}
