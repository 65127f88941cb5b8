//! Spatial kernels: convolution (im2col + GEMM), max pooling, upsampling.

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    /// Input carried a batch axis.
    batched: bool,
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl ConvGeom {
    pub(crate) fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batched, bsz, c_in, h, wd) = match *x {
            [c, h, w] => (false, 1, c, h, w),
            [b, c, h, w] => (true, b, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be 3-D or 4-D, got {x:?}"))),
        };
        let [c_out, wc_in, kh, kw] = *w else {
            return Err(Error::shape(format!("conv2d weights must be 4-D, got {w:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, weights expect {wc_in}"
            )));
        }
        if b != [c_out] {
            return Err(Error::shape(format!("conv2d: bias {b:?} != [{c_out}]")));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1"));
        }
        let (Some(oh), Some(ow)) = (window_out(h, kh, stride, pad), window_out(wd, kw, stride, pad)) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        };
        Ok(ConvGeom {
            batched,
            b: bsz,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.b, self.c_out, self.oh, self.ow]
        } else {
            vec![self.c_out, self.oh, self.ow]
        }
    }

    /// Unfold one image `[C,H,W]` into `[C·kH·kW, OH·OW]`.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let row = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii as usize >= self.h {
                            row.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, v) in row.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if jj < 0 || jj as usize >= self.w {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold `[C·kH·kW, OH·OW]` back onto an image, summing overlaps.
    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[r * cols..(r + 1) * cols];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                dst[jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * cols;
    let mut out = vec![0.0; g.b * out_size];
    let mut col = vec![0.0; rows * cols];
    for bi in 0..g.b {
        g.im2col(&x.data()[bi * in_size..(bi + 1) * in_size], &mut col);
        let o = &mut out[bi * out_size..(bi + 1) * out_size];
        for (co, chunk) in o.chunks_mut(cols).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm_nn(w.data(), &col, g.c_out, rows, cols, o);
    }
    Tensor::new(&g.out_shape(), out)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * cols;
    let gd = grad.data();
    let mut dw = vec![0.0; g.c_out * rows];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if want_dx { vec![0.0; x.numel()] } else { Vec::new() };
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    for bi in 0..g.b {
        let go = &gd[bi * out_size..(bi + 1) * out_size];
        for (co, chunk) in go.chunks(cols).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        g.im2col(&x.data()[bi * in_size..(bi + 1) * in_size], &mut col);
        // dW += G · colᵀ
        gemm_nt(go, &col, g.c_out, cols, rows, &mut dw);
        if want_dx {
            // dcol = Wᵀ · G
            dcol.fill(0.0);
            gemm_tn(w.data(), go, rows, g.c_out, cols, &mut dcol);
            g.col2im(&dcol, &mut dx[bi * in_size..(bi + 1) * in_size]);
        }
    }
    let dx = if want_dx {
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(w.shape(), dw)?, Tensor::new(&[g.c_out], db)?))
}

fn spatial(shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [b, c, h, w] => Ok((b * c, h, w)),
        _ => Err(Error::shape(format!("{name} expects [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

pub(crate) fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w) = spatial(x.shape(), "maxpool2d")?;
    if stride == 0 {
        return Err(Error::arg("maxpool2d stride must be >= 1"));
    }
    let (Some(oh), Some(ow)) = (window_out(h, window, stride, 0), window_out(w, window, stride, 0)) else {
        return Err(Error::shape(format!(
            "maxpool2d: window {window} exceeds input {h}x{w}"
        )));
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..window {
                    let row = base + (oi * stride + ki) * w + oj * stride;
                    for kj in 0..window {
                        let v = xd[row + kj];
                        // Strict comparison keeps the first maximum in scan order.
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(&shape, out)?, argmax))
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::arg("upsample factor must be >= 1"));
    }
    let (planes, h, w) = spatial(x.shape(), "upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            let src = &xd[(p * h + i / factor) * w..][..w];
            let dst = &mut out[(p * oh + i) * ow..][..ow];
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src[j / factor];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

pub(crate) fn upsample_backward(in_shape: &[usize], grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (planes, h, w) = spatial(in_shape, "upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let gd = grad.data();
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            let src = &gd[(p * oh + i) * ow..][..ow];
            let dst = &mut dx[(p * h + i / factor) * w..][..w];
            for (j, v) in src.iter().enumerate() {
                dst[j / factor] += v;
            }
        }
    }
    Tensor::new(in_shape, dx)
}
