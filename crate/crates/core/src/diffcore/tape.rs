use super::conv;
use super::tensor::{dims2, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by a batch-norm node.
#[derive(Clone, Debug)]
pub enum BnStats {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: conv::ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSoftmaxRows {
        x: Var,
        exclude_diagonal: bool,
    },
    PickPerRow {
        x: Var,
        cols: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Values are appended in execution order, so the node list is already a
/// topological order of the computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require grad
    /// or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finite(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{name} produced a non-finite value")));
        }
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.shape(a), data)?;
        self.finite(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.shape(a), data)?;
        self.finite(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect())?;
        self.finite(out, Op::Scale(a, c), &[a], "scale")
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        if self.value(b).numel() != n || self.value(b).rank() != 1 {
            return Err(Error::shape(format!(
                "bias {:?} does not match width {n}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.finite(out, Op::AddRowBias(x, b), &[x, b], "add_row_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.finite(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.finite(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.finite(out, Op::Relu(a), &[a], "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.tanh()).collect())?;
        self.finite(out, Op::Tanh(a), &[a], "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.exp()).collect())?;
        self.finite(out, Op::Exp(a), &[a], "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.ln()).collect())?;
        self.finite(out, Op::Ln(a), &[a], "ln")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.finite(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.finite(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Flatten every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {base:?} on axis {axis}",
                    s
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// 2-D cross-correlation. `x` is `[C,H,W]` or `[B,C,H,W]`, `w` is
    /// `[C_out,C_in,kH,kW]`, `b` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let out = conv::conv_forward(&geom, self.value(x), self.value(w), self.value(b))?;
        self.finite(out, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Max pooling over `window×window` patches. Ties resolve to the first
    /// position in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = conv::maxpool_forward(self.value(x), window, stride)?;
        self.finite(out, Op::MaxPool { x, argmax }, &[x], "maxpool2d")
    }

    /// Batch normalization over a `[B,C,H,W]` input. Returns the output and,
    /// in batch mode, the biased batch mean and variance per channel.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (b, c, h, w) = match *self.shape(x) {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape(format!("batchnorm2d expects [B,C,H,W], got {s:?}"))),
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batchnorm2d: gamma/beta width != channels"));
        }
        let hw = h * w;
        let count = b * hw;
        let xv = self.value(x).data();
        let (mean, var) = match stats {
            BnStats::Batch => {
                if count < 2 {
                    return Err(Error::shape(
                        "batchnorm2d in batch mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        s += xv[off..off + hw].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        ss += xv[off..off + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                (mean, var)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d: running stats width != channels"));
                }
                (mean.clone(), var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "batchnorm2d: zero variance with eps = 0",
            ));
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        let batch_stats = matches!(stats, BnStats::Batch);
        let v = self.finite(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batchnorm2d",
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = conv::upsample_forward(self.value(x), factor)?;
        self.finite(out, Op::Upsample { x, factor }, &[x], "upsample_nearest")
    }

    /// Divide each row of a matrix by its L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric(format!("row {i} has zero or non-finite norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::new(&[m, n], data)?;
        self.finite(out, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    /// Row-wise log-softmax, stabilized by subtracting the row maximum. With
    /// `exclude_diagonal` the entry `(i, i)` is left out of row `i`'s
    /// normalizer and its output is set to zero.
    pub fn log_softmax_rows(&mut self, x: Var, exclude_diagonal: bool) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        if exclude_diagonal && (m != n || n < 2) {
            return Err(Error::shape(
                "log_softmax_rows with excluded diagonal needs a square matrix of size >= 2",
            ));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let keep = |j: usize| !(exclude_diagonal && j == i);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..n)
                    .filter(|&j| keep(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..n).filter(|&j| keep(j)) {
                data[i * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.finite(
            out,
            Op::LogSoftmaxRows {
                x,
                exclude_diagonal,
            },
            &[x],
            "log_softmax_rows",
        )
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        if cols.len() != m {
            return Err(Error::shape(format!("pick_per_row: {} indices for {m} rows", cols.len())));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::shape(format!("pick_per_row: column {c} out of range {n}")));
        }
        let xv = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &c)| xv[i * n + c]).collect();
        let out = Tensor::new(&[m], data)?;
        self.finite(
            out,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            &[x],
            "pick_per_row",
        )
    }

    /// Reverse-mode accumulation from a scalar loss. Gradients add across
    /// multiple uses of the same value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads.resize(self.nodes.len(), None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            // Keep intermediate gradients available for inspection.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let d = zip_map(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = zip_map(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[n], db)?);
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = dims2(av)?;
                let (_, n) = dims2(bv)?;
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, bv.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), gd, k, m, n, &mut db);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Tanh(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(y, gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Exp(a) => {
                let d = zip_map(out, g, |y, gv| y * gv);
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Ln(a) => {
                let d = zip_map(self.value(*a), g, |x, gv| gv / x);
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, gd[0] / t.numel() as f64));
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&s)?);
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&gd[start..start + chunk]);
                        }
                        self.accumulate(grads, *p, Tensor::new(&ps, d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.requires_grad(*x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.value(*x).shape().to_vec();
                let mut d = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += gd[o];
                }
                self.accumulate(grads, *x, Tensor::new(&xs, d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = out.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (b * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    scale / count
                                        * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(s, dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::Upsample { x, factor } => {
                let dx = conv::upsample_backward(self.value(*x).shape(), g, *factor)?;
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let (m, n) = dims2(out)?;
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], dx)?);
            }
            Op::LogSoftmaxRows {
                x,
                exclude_diagonal,
            } => {
                let (m, n) = dims2(out)?;
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let keep = |j: usize| !(*exclude_diagonal && j == i);
                    let gsum: f64 = (0..n).filter(|&j| keep(j)).map(|j| gd[i * n + j]).sum();
                    for j in (0..n).filter(|&j| keep(j)) {
                        let p = y[i * n + j].exp();
                        dx[i * n + j] = gd[i * n + j] - p * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], dx)?);
            }
            Op::PickPerRow { x, cols } => {
                let xs = self.value(*x).shape().to_vec();
                let n = xs[1];
                let mut dx = vec![0.0; xs[0] * n];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] = gd[i];
                }
                self.accumulate(grads, *x, Tensor::new(&xs, dx)?);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}
