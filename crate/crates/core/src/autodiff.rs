//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for nodes that require them.
//! Leaves created with [`Graph::input`] never receive gradients, which is how
//! frozen networks are expressed.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Epsilon added to variances in batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Probability clamp used by the weighted cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Norms below this are treated as zero by the cosine distance.
pub const ZERO_NORM: f64 = 1e-12;

/// One-dimensional linear interpolation table (half-pixel centres, edge clamped).
#[derive(Clone, Debug)]
struct Interp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<f64>,
    w_hi: Vec<f64>,
}

impl Interp {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut t = Interp {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            w_lo: Vec::with_capacity(out_len),
            w_hi: Vec::with_capacity(out_len),
        };
        for d in 0..out_len {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            t.lo.push(lo);
            t.hi.push(hi);
            t.w_lo.push(1.0 - frac);
            t.w_hi.push(frac);
        }
        t
    }
}

fn resample_plane(src: &[f64], w: usize, rows: &Interp, cols: &Interp, dst: &mut [f64]) {
    let out_w = cols.lo.len();
    for y in 0..rows.lo.len() {
        let (r0, r1, a0, a1) = (rows.lo[y], rows.hi[y], rows.w_lo[y], rows.w_hi[y]);
        for xx in 0..out_w {
            let (c0, c1, b0, b1) = (cols.lo[xx], cols.hi[xx], cols.w_lo[xx], cols.w_hi[xx]);
            dst[y * out_w + xx] = a0 * (b0 * src[r0 * w + c0] + b1 * src[r0 * w + c1])
                + a1 * (b0 * src[r1 * w + c0] + b1 * src[r1 * w + c1]);
        }
    }
}

/// Bilinear resampling of one `h x w` plane with half-pixel centres.
pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut dst = vec![0.0; out_h * out_w];
    resample_plane(src, w, &Interp::new(h, out_h), &Interp::new(w, out_w), &mut dst);
    dst
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        rows: Interp,
        cols: Interp,
    },
    Concat(Var, Var),
    Reshape(Var),
    Mse(Var, Var),
    WeightedBce {
        target: Tensor,
        p: Var,
        pos_weight: f64,
    },
    CosineDistance(Var, Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("element-wise add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution. `w` is `(out, in, k, k)`, `b` is `(out)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return Err(Error::shape(
                "conv2d weight",
                format!("(_, {c}, k, k)"),
                self.value(w).shape(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d bias", [o], self.value(b).shape()));
            }
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d input", format!(">= {k}"), (h, wd))),
        };
        let ckk = c * k * k;
        let plane = oh * ow;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * plane];
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut col = if direct { Vec::new() } else { vec![0.0; ckk * plane] };
        for i in 0..n {
            let xs = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            if direct {
                gemm(o, ckk, plane, wv, false, xs, false, dst, false);
            } else {
                im2col(xs, c, h, wd, k, stride, pad, oh, ow, &mut col);
                gemm(o, ckk, plane, wv, false, &col, false, dst, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let out = Tensor::new(&[n, o, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
    /// `w` is `(in, out, 2, 2)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (ci, o, k1, k2) = self.value(w).dims4()?;
        if ci != c || k1 != 2 || k2 != 2 {
            return Err(Error::shape(
                "transposed conv weight",
                format!("({c}, _, 2, 2)"),
                self.value(w).shape(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("transposed conv bias", [o], self.value(b).shape()));
            }
        }
        let plane = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * o * oh * ow];
        let mut tmp = vec![0.0; o * 4 * plane];
        for i in 0..n {
            let xs = &xv[i * c * plane..(i + 1) * c * plane];
            gemm(o * 4, c, plane, wv, true, xs, false, &mut tmp, false);
            let dst = &mut out[i * o * oh * ow..(i + 1) * o * oh * ow];
            for oc in 0..o {
                let bias = bv.as_ref().map_or(0.0, |b| b[oc]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &tmp[(oc * 4 + a * 2 + bb) * plane..][..plane];
                        for y in 0..h {
                            let row = &mut dst[oc * oh * ow + (2 * y + a) * ow..][..ow];
                            for xx in 0..wd {
                                row[2 * xx + bb] = src[y * wd + xx] + bias;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, o, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    /// Batch normalization. With `running = None` the batch statistics are used
    /// (training mode) and returned; otherwise the given `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batch norm affine", [c], self.value(p).shape()));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, inv_std, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch norm running stats", c, rm.len()));
                }
                let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (rm.to_vec(), inv, None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xv[(i * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| {
                        if count > 1 {
                            v * count as f64 / (count - 1) as f64
                        } else {
                            *v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv, Some(stats))
            }
        };
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch], bta[ch]);
                for (o, v) in out[off..off + plane].iter_mut().zip(&xv[off..off + plane]) {
                    *o = (v - m) * s * gg + bb;
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Max pooling with a square `kernel` and `stride`.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(Error::shape("max pool", format!("kernel {kernel} within input"), (h, w)));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Bilinear resampling to `(out_h, out_w)` with half-pixel centres
    /// (the `align_corners = false` convention).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear resize", "positive size", (out_h, out_w)));
        }
        let rows = Interp::new(h, out_h);
        let cols = Interp::new(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            resample_plane(
                &xv[plane * h * w..(plane + 1) * h * w],
                w,
                &rows,
                &cols,
                &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w],
            );
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, rows, cols }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (n2, cb, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape("channel concat", (n, h, w), (n2, h2, w2)));
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", va.shape(), vb.shape()));
        }
        let m = va.len().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / m), Op::Mse(a, b), rg))
    }

    /// Mean of `-(w y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[eps, 1 - eps]`.
    pub fn weighted_bce(&mut self, target: &Tensor, p: Var, pos_weight: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(Error::shape("weighted bce", target.shape(), vp.shape()));
        }
        let m = vp.len().max(1) as f64;
        let s: f64 = target
            .data()
            .iter()
            .zip(vp.data())
            .map(|(&y, &q)| {
                let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(pos_weight * y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(s / m),
            Op::WeightedBce {
                target: target.clone(),
                p,
                pos_weight,
            },
            rg,
        ))
    }

    /// Mean over the batch of `1 - cos(a_i, b_i)` for `(batch, len)` inputs.
    /// A zero-norm row contributes 1 with zero gradient.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.shape().len() != 2 {
            return Err(Error::shape("cosine distance", va.shape(), vb.shape()));
        }
        let (batch, len) = (va.shape()[0], va.shape()[1]);
        let mut total = 0.0;
        for i in 0..batch {
            let (x, y) = (&va.data()[i * len..][..len], &vb.data()[i * len..][..len]);
            total += 1.0 - cosine(x, y).unwrap_or_else(|| {
                log::debug!("zero-norm latent in cosine distance (sample {i})");
                0.0
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(total / batch.max(1) as f64),
            Op::CosineDistance(a, b),
            rg,
        ))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::shape("weighted sum", vx.shape(), weights.shape()));
        }
        let s = vx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&Tensor) -> Tensor,
    ) {
        if self.rg(v) {
            let g = f(self.value(v));
            self.accumulate(grads, v, g);
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => self.accumulate_with(grads, *a, |x| {
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                Tensor::new(x.shape(), d).expect("same shape")
            }),
            Op::Sigmoid(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(out.shape(), d).expect("same shape"));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::ConvTranspose2x2 { x, w, b } => self.convt_backward(*x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.bn_backward(*x, *gamma, *beta, mean, inv_std, *batch_stats, g, grads),
            Op::MaxPool { x, argmax } => self.accumulate_with(grads, *x, |xv| {
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    dd[at] += gv;
                }
                d
            }),
            Op::Resize { x, rows, cols } => self.accumulate_with(grads, *x, |xv| {
                let (_, _, h, w) = xv.dims4().expect("4-d");
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                let mut d = Tensor::zeros(xv.shape());
                let planes = xv.len() / (h * w);
                let dd = d.data_mut();
                for p in 0..planes {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dd[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        let (r0, r1, a0, a1) = (rows.lo[y], rows.hi[y], rows.w_lo[y], rows.w_hi[y]);
                        for xx in 0..ow {
                            let gv = src[y * ow + xx];
                            let (c0, c1, b0, b1) =
                                (cols.lo[xx], cols.hi[xx], cols.w_lo[xx], cols.w_hi[xx]);
                            dst[r0 * w + c0] += a0 * b0 * gv;
                            dst[r0 * w + c1] += a0 * b1 * gv;
                            dst[r1 * w + c0] += a1 * b0 * gv;
                            dst[r1 * w + c1] += a1 * b1 * gv;
                        }
                    }
                }
                d
            }),
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).dims4().expect("4-d").1;
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(&[n, cb, h, w], db).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).expect("same length"));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.data()[0] / va.len().max(1) as f64;
                let d: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let da = Tensor::new(va.shape(), d).expect("shape");
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedBce {
                target,
                p,
                pos_weight,
            } => self.accumulate_with(grads, *p, |vp| {
                let scale = g.data()[0] / vp.len().max(1) as f64;
                let d = target
                    .data()
                    .iter()
                    .zip(vp.data())
                    .map(|(&y, &q)| {
                        if q < PROB_EPS || q > 1.0 - PROB_EPS {
                            0.0
                        } else {
                            -scale * (pos_weight * y / q - (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                Tensor::new(vp.shape(), d).expect("shape")
            }),
            Op::CosineDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, len) = (va.shape()[0], va.shape()[1]);
                let scale = g.data()[0] / batch.max(1) as f64;
                let mut da = vec![0.0; batch * len];
                let mut db = vec![0.0; batch * len];
                for i in 0..batch {
                    let x = &va.data()[i * len..][..len];
                    let y = &vb.data()[i * len..][..len];
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx < ZERO_NORM || ny < ZERO_NORM {
                        continue;
                    }
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let cos = dot / (nx * ny);
                    for j in 0..len {
                        // d(1 - cos)/dx = -(y / (|x||y|) - cos x / |x|^2)
                        da[i * len + j] = -scale * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        db[i * len + j] = -scale * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(vb.shape(), db).expect("shape"));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, weights.map(|v| v * s));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let s = g.data()[0] / v.len().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(v.shape(), s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4().expect("4-d");
        let (o, _, k, _) = wv.dims4().expect("4-d");
        let (_, _, oh, ow) = g.dims4().expect("4-d");
        let plane = oh * ow;
        let ckk = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![0.0; o];
            for i in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(i * o + oc) * plane..][..plane].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(&[o], db).expect("shape"));
        }
        if !need_x && !need_w {
            return;
        }
        let mut dw = vec![0.0; o * ckk];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut col = vec![0.0; ckk * plane];
        for i in 0..n {
            let xs = &xv.data()[i * c * h * wd..(i + 1) * c * h * wd];
            let gs = &g.data()[i * o * plane..(i + 1) * o * plane];
            if need_w {
                if direct {
                    gemm(o, plane, ckk, gs, false, xs, true, &mut dw, true);
                } else {
                    im2col(xs, c, h, wd, k, stride, pad, oh, ow, &mut col);
                    gemm(o, plane, ckk, gs, false, &col, true, &mut dw, true);
                }
            }
            if need_x {
                let dxs = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                if direct {
                    gemm(ckk, o, plane, wv.data(), true, gs, false, dxs, false);
                } else {
                    gemm(ckk, o, plane, wv.data(), true, gs, false, &mut col, false);
                    col2im(&col, c, h, wd, k, stride, pad, oh, ow, dxs);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(wv.shape(), dw).expect("shape"));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx).expect("shape"));
        }
    }

    fn convt_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4().expect("4-d");
        let o = wv.shape()[1];
        let (oh, ow) = (2 * h, 2 * wd);
        let plane = h * wd;
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![0.0; o];
            for i in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(i * o + oc) * oh * ow..][..oh * ow].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(&[o], db).expect("shape"));
        }
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if !need_x && !need_w {
            return;
        }
        let mut gathered = vec![0.0; o * 4 * plane];
        let mut dw = vec![0.0; c * o * 4];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        for i in 0..n {
            let gs = &g.data()[i * o * oh * ow..(i + 1) * o * oh * ow];
            for oc in 0..o {
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gathered[(oc * 4 + a * 2 + bb) * plane..][..plane];
                        for y in 0..h {
                            let row = &gs[oc * oh * ow + (2 * y + a) * ow..][..ow];
                            for xx in 0..wd {
                                dst[y * wd + xx] = row[2 * xx + bb];
                            }
                        }
                    }
                }
            }
            let xs = &xv.data()[i * c * plane..(i + 1) * c * plane];
            if need_w {
                gemm(c, plane, o * 4, xs, false, &gathered, true, &mut dw, true);
            }
            if need_x {
                let dxs = &mut dx[i * c * plane..(i + 1) * c * plane];
                gemm(c, o * 4, plane, wv.data(), false, &gathered, false, dxs, false);
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(wv.shape(), dw).expect("shape"));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx).expect("shape"));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let (n, c, h, w) = xv.dims4().expect("4-d");
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for (xx, gg) in xv.data()[off..off + plane].iter().zip(&g.data()[off..off + plane]) {
                    dgamma[ch] += gg * (xx - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gg;
                }
            }
        }
        if self.rg(x) {
            let mut dx = vec![0.0; xv.len()];
            for ch in 0..c {
                let scale = gv[ch] * inv_std[ch];
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for j in off..off + plane {
                        dx[j] = if batch_stats {
                            let xhat = (xv.data()[j] - mean[ch]) * inv_std[ch];
                            scale * (g.data()[j] - dbeta[ch] / count - xhat * dgamma[ch] / count)
                        } else {
                            scale * g.data()[j]
                        };
                    }
                }
            }
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx).expect("shape"));
        }
        self.accumulate(grads, gamma, Tensor::new(&[c], dgamma).expect("shape"));
        self.accumulate(grads, beta, Tensor::new(&[c], dbeta).expect("shape"));
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity, or `None` when either vector has (near) zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < ZERO_NORM || ny < ZERO_NORM {
        return None;
    }
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    Some((dot / (nx * ny)).clamp(-1.0, 1.0))
}
