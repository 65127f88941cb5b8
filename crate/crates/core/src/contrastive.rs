//! Multi-view batch assembly, cosine similarity and the NT-Xent loss.
//!
//! Projection rows are ordered `[z1_1..z1_N, z2_1..z2_N]`, so row `i` and
//! row `(i + N) mod 2N` come from the same sample and form the positive pair.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{stack_view, Bound, ModelBundle, Parts};
use crate::nn::BatchStats;
use crate::signal::{Modality, SyncedSample};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        let c = LossConfig { temperature };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::arg(format!("temperature must be positive, got {}", self.temperature)))
        }
    }
}

#[inline]
pub fn positive_of(i: usize, n: usize) -> usize {
    (i + n) % (2 * n)
}

/// `2N x d` projections of N synchronized samples under two views.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBatch {
    z: Tensor,
    n: usize,
}

impl ProjectionBatch {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 2 || z.shape()[0] % 2 != 0 {
            return Err(Error::shape(format!(
                "projection batch needs an even number of rows, got shape {:?}",
                z.shape()
            )));
        }
        let n = z.shape()[0] / 2;
        Ok(ProjectionBatch { z, n })
    }

    /// Stack two `N x d` view blocks.
    pub fn from_views(z1: &Tensor, z2: &Tensor) -> Result<Self> {
        if z1.shape() != z2.shape() || z1.rank() != 2 {
            return Err(Error::shape(format!(
                "view blocks differ: {:?} vs {:?}",
                z1.shape(),
                z2.shape()
            )));
        }
        let mut data = z1.data().to_vec();
        data.extend_from_slice(z2.data());
        Self::new(Tensor::new(&[2 * z1.shape()[0], z1.shape()[1]], data)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        2 * self.n
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn positive_of(&self, i: usize) -> usize {
        positive_of(i, self.n)
    }
}

/// `S[i][j] = z_i . z_j / (|z_i| |z_j|)`. A zero row is a numeric error.
pub fn cosine_similarity_matrix(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::shape(format!("expected a matrix, got {:?}", z.shape())));
    }
    let (m, d) = (z.shape()[0], z.shape()[1]);
    let mut unit = Vec::with_capacity(m * d);
    for i in 0..m {
        let row = z.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numeric(format!("projection row {i} has zero or non-finite norm")));
        }
        unit.extend(row.iter().map(|v| v / norm));
    }
    let u = Tensor::new(&[m, d], unit)?;
    let mut s = u.matmul(&u.transpose()?)?;
    // Rounding can push entries a hair outside [-1, 1].
    for (k, v) in s.data_mut().iter_mut().enumerate() {
        *v = if k / m == k % m { 1.0 } else { v.clamp(-1.0, 1.0) };
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtXent {
    pub loss: f64,
    pub per_element: Vec<f64>,
}

/// Row-max stabilized NT-Xent. Row `i`'s normalizer runs over every `k != i`,
/// the positive included.
pub fn nt_xent(batch: &ProjectionBatch, cfg: &LossConfig) -> Result<NtXent> {
    cfg.validate()?;
    let n = batch.n();
    if n < 2 {
        return Err(Error::arg(format!("NT-Xent needs N >= 2, got N = {n}")));
    }
    let s = cosine_similarity_matrix(batch.z())?;
    if !s.all_finite() {
        return Err(Error::numeric("non-finite similarity"));
    }
    let m = 2 * n;
    let tau = cfg.temperature;
    let mut per_element = Vec::with_capacity(m);
    for i in 0..m {
        let row = s.row(i);
        let max = (0..m).filter(|&k| k != i).map(|k| row[k] / tau).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] / tau - max).exp()).sum();
        let lse = max + sum.ln();
        per_element.push(lse - row[positive_of(i, n)] / tau);
    }
    let loss = per_element.iter().sum::<f64>() / m as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("NT-Xent loss is not finite"));
    }
    Ok(NtXent { loss, per_element })
}

/// Differentiable NT-Xent over a `2N x d` tape value; returns the scalar mean.
pub fn nt_xent_tape(tape: &mut Tape, z: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(z);
    if s.len() != 2 || s[0] % 2 != 0 {
        return Err(Error::shape(format!("projection batch needs 2N rows, got {s:?}")));
    }
    let n = s[0] / 2;
    if n < 2 {
        return Err(Error::arg(format!("NT-Xent needs N >= 2, got N = {n}")));
    }
    let zn = tape.normalize_rows(z)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature)?;
    let logp = tape.log_softmax_rows(logits, true)?;
    let cols: Vec<usize> = (0..2 * n).map(|i| positive_of(i, n)).collect();
    let picked = tape.pick_per_row(logp, &cols)?;
    let neg = tape.scale(picked, -1.0)?;
    tape.mean(neg)
}

/// Encoder indices serving each modality of `view_pair`.
pub fn view_indices(bundle: &ModelBundle, view_pair: (Modality, Modality)) -> Result<(usize, usize)> {
    let find = |m: Modality| {
        bundle
            .config
            .views
            .iter()
            .position(|&v| v == m)
            .ok_or_else(|| Error::Config(format!("model has no encoder for view {m}")))
    };
    let (a, b) = (find(view_pair.0)?, find(view_pair.1)?);
    if a == b {
        return Err(Error::arg("view pair must name two different views"));
    }
    Ok((a, b))
}

/// Record encoders and projection heads for both views on `tape` and return
/// the stacked `2N x d` projections plus per-view batch-norm statistics.
pub fn project_pair(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    samples: &[&SyncedSample],
    view_pair: (Modality, Modality),
    training: bool,
) -> Result<(Var, [Vec<BatchStats>; 2])> {
    let (a, b) = view_indices(bundle, view_pair)?;
    let mut zs = Vec::with_capacity(2);
    let mut stats: [Vec<BatchStats>; 2] = Default::default();
    for (slot, (idx, m)) in [(a, view_pair.0), (b, view_pair.1)].into_iter().enumerate() {
        let x = tape.constant(stack_view(samples, m, bundle.encoders[idx].config.input_shape)?);
        let (h, st) = bundle.encode(tape, bound, idx, x, training)?;
        zs.push(bundle.project(tape, bound, idx, h)?);
        stats[slot] = st;
    }
    Ok((tape.concat(&zs, 0)?, stats))
}

/// Eval-mode projections: view 1 of sample `i` at row `i`, view 2 at row
/// `i + N`.
pub fn assemble_projection_batch(
    samples: &[&SyncedSample],
    bundle: &ModelBundle,
    view_pair: (Modality, Modality),
) -> Result<ProjectionBatch> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, Parts::PRETRAIN);
    let (z, _) = project_pair(&mut tape, bundle, &bound, samples, view_pair, false)?;
    ProjectionBatch::new(tape.value(z).clone())
}

/// Mean cosine similarity of positive pairs and of all other off-diagonal
/// pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub positive: f64,
    pub negative: f64,
}

impl Alignment {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn alignment(batch: &ProjectionBatch) -> Result<Alignment> {
    let s = cosine_similarity_matrix(batch.z())?;
    let m = batch.rows();
    let (mut pos, mut neg, mut n_neg) = (0.0, 0.0, 0usize);
    for i in 0..m {
        for k in 0..m {
            if k == i {
                continue;
            }
            if k == batch.positive_of(i) {
                pos += s.at2(i, k);
            } else {
                neg += s.at2(i, k);
                n_neg += 1;
            }
        }
    }
    Ok(Alignment {
        positive: pos / m as f64,
        negative: if n_neg == 0 { 0.0 } else { neg / n_neg as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> ProjectionBatch {
        ProjectionBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn positive_index_map() {
        assert_eq!(positive_of(0, 3), 3);
        assert_eq!(positive_of(4, 3), 1);
        for i in 0..6 {
            assert_ne!(positive_of(i, 3), i);
            assert_eq!(positive_of(positive_of(i, 3), 3), i);
        }
    }

    #[test]
    fn cosine_hand_values() {
        let s = cosine_similarity_matrix(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(s.at2(0, 0), 1.0);
        assert_eq!(s.at2(0, 1), 0.0);
        assert!((s.at2(0, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(s.at2(2, 0), s.at2(0, 2));
    }

    #[test]
    fn zero_row_names_the_row() {
        let err = cosine_similarity_matrix(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("row 1")), "{err}");
    }

    #[test]
    fn identical_projections_give_ln3() {
        for tau in [0.05, 0.1, 0.5, 1.0, 7.0] {
            let b = batch(&vec![vec![0.3, -1.2, 2.0]; 4]);
            let r = nt_xent(&b, &LossConfig::new(tau).unwrap()).unwrap();
            assert!((r.loss - 3f64.ln()).abs() < 1e-9, "tau {tau}: {}", r.loss);
        }
    }

    #[test]
    fn separated_case() {
        // Positives identical, every negative orthogonal.
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = nt_xent(&b, &LossConfig::default()).unwrap();
        let expected = (1.0 + 2.0 * (-2f64).exp()).ln();
        assert!((r.loss - expected).abs() < 1e-9);
        assert!((r.loss - 0.23954).abs() < 1e-5);
        // Every row sees e^2 / (e^2 + 1 + 1).
        for l in r.per_element {
            assert!((l - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_is_rejected() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(nt_xent(&b, &LossConfig::default()), Err(Error::Argument(_))));
        assert!(LossConfig::new(0.0).is_err());
        assert!(ProjectionBatch::new(Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn tape_matches_plain_value() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) as f64 * 0.37).sin()).collect())
            .collect();
        let b = batch(&rows);
        let cfg = LossConfig::new(0.3).unwrap();
        let plain = nt_xent(&b, &cfg).unwrap().loss;
        let mut tape = Tape::new();
        let z = tape.param(b.z().clone());
        let l = nt_xent_tape(&mut tape, z, &cfg).unwrap();
        assert!((tape.value(l).item().unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn alignment_of_perfect_pairs() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = alignment(&b).unwrap();
        assert_eq!(a.positive, 1.0);
        assert_eq!(a.negative, 0.0);
        assert_eq!(a.gap(), 1.0);
    }
}
