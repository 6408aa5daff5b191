//! Differentiable operations. Each op validates shapes, computes eagerly,
//! and registers a closure that routes the output gradient to its parents.

use super::{acc_grad, kernels, math, Tensor};
use crate::error::{Error, Result};

/// Additive logit that zeroes an attention column after softmax. Finite so
/// buffers stay valid, large enough that exp(m - rowmax) underflows to 0.
pub const MASKED_LOGIT: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    // ---- arithmetic ----------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data: Vec<f64> = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            "add",
            move |g, _| {
                acc_grad(&pa, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc_grad(&pb, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data: Vec<f64> = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            "sub",
            move |g, _| {
                acc_grad(&pa, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc_grad(&pb, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            },
        )
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data: Vec<f64> = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            "mul",
            move |g, _| {
                {
                    let b = pb.data();
                    acc_grad(&pa, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * b[i];
                        }
                    });
                }
                let a = pa.data();
                acc_grad(&pb, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * a[i];
                    }
                });
            },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| c * x).collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            "scale",
            move |g, _| {
                acc_grad(&pa, |ga| {
                    for i in 0..g.len() {
                        ga[i] += c * g[i];
                    }
                });
            },
        )
    }

    /// Broadcast-add a length-d bias to every row of an n x d tensor.
    pub fn add_rows(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || self.shape()[1] != bias.shape()[0] {
            return Err(Error::shape(
                "add_rows",
                format!("{:?} + {:?}", self.shape(), bias.shape()),
            ));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data: Vec<f64> = {
            let (a, b) = (self.data(), bias.data());
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                for j in 0..d {
                    out.push(a[i * d + j] + b[j]);
                }
            }
            out
        };
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            data,
            vec![n, d],
            vec![self.clone(), bias.clone()],
            "add_rows",
            move |g, _| {
                acc_grad(&pa, |ga| ga.iter_mut().zip(g).for_each(|(x, s)| *x += s));
                acc_grad(&pb, |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            },
        )
    }

    // ---- elementwise nonlinearities ------------------------------------

    /// Natural log. Nonpositive entries produce a non-finite result, which
    /// is reported as an error rather than propagated.
    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x.ln()).collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            "ln",
            move |g, _| {
                let a = pa.data();
                acc_grad(&pa, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / a[i];
                    }
                });
            },
        )
    }

    /// max(x, floor). The gradient passes only where x > floor; an entry
    /// sitting exactly on the floor counts as clamped.
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x.max(floor)).collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            "clamp_min",
            move |g, _| {
                let a = pa.data();
                acc_grad(&pa, |ga| {
                    for i in 0..g.len() {
                        if a[i] > floor {
                            ga[i] += g[i];
                        }
                    }
                });
            },
        )
    }

    /// tanh-form Gaussian error linear unit.
    pub fn gelu(&self) -> Result<Tensor> {
        let n = self.numel();
        let mut data = vec![0.0; n];
        // the tanh values are kept for the backward pass so transcendentals
        // run once per element
        let mut tanhs = vec![0.0; n];
        {
            let a = self.data();
            for i in 0..n {
                let x = a[i];
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = math::fast_tanh(u);
                tanhs[i] = t;
                data[i] = 0.5 * x * (1.0 + t);
            }
        }
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            "gelu",
            move |g, _| {
                let a = pa.data();
                acc_grad(&pa, |ga| {
                    for i in 0..g.len() {
                        let x = a[i];
                        let t = tanhs[i];
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            },
        )
    }

    // ---- matrix ops ----------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], rhs.shape()[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm(false, false, m, k, n, 1.0, &self.data(), &rhs.data(), 0.0, &mut data);
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            "matmul",
            move |g, _| {
                {
                    // dA += dC * B^T
                    let b = pb.data();
                    acc_grad(&pa, |ga| kernels::gemm(false, true, m, n, k, 1.0, g, &b, 1.0, ga));
                }
                // dB += A^T * dC
                let a = pa.data();
                acc_grad(&pb, |gb| kernels::gemm(true, false, k, m, n, 1.0, &a, g, 1.0, gb));
            },
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape())));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = src[i * d + j];
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::from_op(
            data,
            vec![d, n],
            vec![self.clone()],
            "transpose",
            move |g, _| {
                acc_grad(&pa, |ga| {
                    for j in 0..d {
                        for i in 0..n {
                            ga[i * d + j] += g[j * n + i];
                        }
                    }
                });
            },
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], "sum_all", move |g, _| {
            acc_grad(&pa, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let inv = 1.0 / self.numel() as f64;
        let s: f64 = math::sum(&self.data()) * inv;
        let pa = self.clone();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], "mean_all", move |g, _| {
            acc_grad(&pa, |ga| ga.iter_mut().for_each(|x| *x += g[0] * inv));
        })
    }

    // ---- softmax family -------------------------------------------------

    /// Softmax along `axis` (0 for rank-1; 0 or 1 for rank-2). Maximum
    /// subtraction keeps exp in range; each slice sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let (slices, len, stride, base_stride) = match (self.rank(), axis) {
            (1, 0) => (1, shape[0], 1usize, 0usize),
            (2, 1) => (shape[0], shape[1], 1, shape[1]),
            (2, 0) => (shape[1], shape[0], shape[1], 1),
            _ => {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {} of shape {:?}", axis, shape),
                ))
            }
        };
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for s in 0..slices {
            if stride == 1 {
                let row = &src[s * base_stride..s * base_stride + len];
                let out = &mut data[s * base_stride..s * base_stride + len];
                let m = math::max(row);
                for j in 0..len {
                    out[j] = math::fast_exp(row[j] - m);
                }
                let inv = 1.0 / math::sum(out);
                for x in out.iter_mut() {
                    *x *= inv;
                }
                continue;
            }
            let at = |i: usize| s * base_stride + i * stride;
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(src[at(i)]);
            }
            let mut z = 0.0;
            for i in 0..len {
                let e = math::fast_exp(src[at(i)] - m);
                data[at(i)] = e;
                z += e;
            }
            for i in 0..len {
                data[at(i)] /= z;
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::from_op(data, shape, vec![self.clone()], "softmax", move |g, out| {
            acc_grad(&pa, |ga| {
                for s in 0..slices {
                    let at = |i: usize| s * base_stride + i * stride;
                    let mut dot = 0.0;
                    for i in 0..len {
                        dot += out[at(i)] * g[at(i)];
                    }
                    for i in 0..len {
                        ga[at(i)] += out[at(i)] * (g[at(i)] - dot);
                    }
                }
            });
        })
    }

    /// Row-wise log softmax of an n x v tensor, computed as
    /// x - max - ln(sum exp(x - max)).
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("log_softmax_rows", format!("{:?}", self.shape())));
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![0.0; n * v];
        for i in 0..n {
            let row = &src[i * v..(i + 1) * v];
            let out = &mut data[i * v..(i + 1) * v];
            let m = math::max(row);
            for j in 0..v {
                out[j] = math::fast_exp(row[j] - m);
            }
            let lz = m + math::sum(out).ln();
            for j in 0..v {
                out[j] = row[j] - lz;
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::from_op(
            data,
            vec![n, v],
            vec![self.clone()],
            "log_softmax_rows",
            move |g, out| {
                acc_grad(&pa, |ga| {
                    for i in 0..n {
                        let mut gsum = 0.0;
                        for j in 0..v {
                            gsum += g[i * v + j];
                        }
                        for j in 0..v {
                            let p = math::fast_exp(out[i * v + j]);
                            ga[i * v + j] += g[i * v + j] - p * gsum;
                        }
                    }
                });
            },
        )
    }

    // ---- normalization ---------------------------------------------------

    /// Row-wise layer normalization with learned gain and bias. Accepts an
    /// n x d tensor or a single length-d row. Population variance; eps sits
    /// inside the square root, so zero-variance rows are well defined.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = match self.rank() {
            1 => (1, self.shape()[0]),
            2 => (self.shape()[0], self.shape()[1]),
            _ => return Err(Error::shape("layer_norm", format!("{:?}", self.shape()))),
        };
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} bias {:?} for width {}", gain.shape(), bias.shape(), d),
            ));
        }
        let src = self.data();
        let gw = gain.data();
        let bw = bias.data();
        let mut data = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_sigma = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mu = math::sum(row) / d as f64;
            let var = math::sq_dev_sum(row, mu) / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mu) * inv;
                xhat[i * d + j] = xh;
                data[i * d + j] = xh * gw[j] + bw[j];
            }
        }
        drop(src);
        drop(gw);
        drop(bw);
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            "layer_norm",
            move |g, _| {
                acc_grad(&pg, |gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc_grad(&pb, |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                let gw = pg.data();
                acc_grad(&px, |gx| {
                    let mut dxh = vec![0.0; d];
                    for i in 0..n {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxh[j] = g[i * d + j] * gw[j];
                        }
                        let mean_dxh = math::sum(&dxh) / d as f64;
                        let mean_dxh_xh = math::dot(&dxh, xh) / d as f64;
                        let inv = inv_sigma[i];
                        for j in 0..d {
                            gx[i * d + j] += inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            },
        )
    }

    // ---- row routing -----------------------------------------------------

    /// Select rows by index. Out-of-range indices are an error. Repeated
    /// indices are allowed; their gradients accumulate into the same row.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", self.shape())));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "gather_rows index {} out of range for {} rows",
                bad, n
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        drop(src);
        let pa = self.clone();
        let idx = indices.to_vec();
        Tensor::from_op(
            data,
            vec![indices.len(), d],
            vec![self.clone()],
            "gather_rows",
            move |g, _| {
                acc_grad(&pa, |ga| {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += g[i * d + j];
                        }
                    }
                });
            },
        )
    }

    /// Inverse of a two-way row split: rows of `self` land at `dest_kept`
    /// and rows of `frozen` at `dest_frozen`, which together must cover
    /// 0..k+f exactly once. Values round-trip bit-for-bit.
    pub fn merge_rows(
        &self,
        frozen: &Tensor,
        dest_kept: &[usize],
        dest_frozen: &[usize],
    ) -> Result<Tensor> {
        if self.rank() != 2 || frozen.rank() != 2 || self.shape()[1] != frozen.shape()[1] {
            return Err(Error::shape(
                "merge_rows",
                format!("{:?} with {:?}", self.shape(), frozen.shape()),
            ));
        }
        let d = self.shape()[1];
        let (k, f) = (self.shape()[0], frozen.shape()[0]);
        if dest_kept.len() != k || dest_frozen.len() != f {
            return Err(Error::Input(format!(
                "merge_rows destinations {}+{} for {}+{} rows",
                dest_kept.len(),
                dest_frozen.len(),
                k,
                f
            )));
        }
        let total = k + f;
        let mut seen = vec![false; total];
        for &p in dest_kept.iter().chain(dest_frozen.iter()) {
            if p >= total || seen[p] {
                return Err(Error::Input(format!(
                    "merge_rows destinations must partition 0..{}",
                    total
                )));
            }
            seen[p] = true;
        }
        let mut data = vec![0.0; total * d];
        {
            let a = self.data();
            for (i, &p) in dest_kept.iter().enumerate() {
                data[p * d..(p + 1) * d].copy_from_slice(&a[i * d..(i + 1) * d]);
            }
            let b = frozen.data();
            for (i, &p) in dest_frozen.iter().enumerate() {
                data[p * d..(p + 1) * d].copy_from_slice(&b[i * d..(i + 1) * d]);
            }
        }
        let (pa, pb) = (self.clone(), frozen.clone());
        let (dk, df) = (dest_kept.to_vec(), dest_frozen.to_vec());
        Tensor::from_op(
            data,
            vec![total, d],
            vec![self.clone(), frozen.clone()],
            "merge_rows",
            move |g, _| {
                acc_grad(&pa, |ga| {
                    for (i, &p) in dk.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] += g[p * d + j];
                        }
                    }
                });
                acc_grad(&pb, |gb| {
                    for (i, &p) in df.iter().enumerate() {
                        for j in 0..d {
                            gb[i * d + j] += g[p * d + j];
                        }
                    }
                });
            },
        )
    }

    /// One element per row: out[i] = self[i, picks[i]].
    pub fn pick(&self, picks: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("pick", format!("{:?}", self.shape())));
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        if picks.len() != n {
            return Err(Error::Input(format!("pick wants {} indices, got {}", n, picks.len())));
        }
        if let Some(&bad) = picks.iter().find(|&&j| j >= v) {
            return Err(Error::Input(format!("pick index {} out of range for {} cols", bad, v)));
        }
        let src = self.data();
        let data: Vec<f64> = picks.iter().enumerate().map(|(i, &j)| src[i * v + j]).collect();
        drop(src);
        let pa = self.clone();
        let picks = picks.to_vec();
        Tensor::from_op(data, vec![n], vec![self.clone()], "pick", move |g, _| {
            acc_grad(&pa, |ga| {
                for (i, &j) in picks.iter().enumerate() {
                    ga[i * v + j] += g[i];
                }
            });
        })
    }

    // ---- fused attention -------------------------------------------------

    /// Multi-head attention probabilities: per head h,
    /// softmax(scale * Q_h K_h^T) with `key_pad` columns forced to zero
    /// weight. Output rows are the heads stacked: [heads * sq, sk].
    pub fn attn_probs(
        &self,
        keys: &Tensor,
        heads: usize,
        scale: f64,
        key_pad: &[bool],
    ) -> Result<Tensor> {
        if self.rank() != 2 || keys.rank() != 2 || self.shape()[1] != keys.shape()[1] {
            return Err(Error::shape(
                "attn_probs",
                format!("{:?} against {:?}", self.shape(), keys.shape()),
            ));
        }
        let (sq, d) = (self.shape()[0], self.shape()[1]);
        let sk = keys.shape()[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{} heads for width {}", heads, d)));
        }
        if key_pad.len() != sk {
            return Err(Error::Input(format!(
                "key_pad length {} for {} keys",
                key_pad.len(),
                sk
            )));
        }
        if key_pad.iter().all(|&p| p) {
            return Err(Error::Input("attn_probs with every key masked".into()));
        }
        let dh = d / heads;
        let mut data = vec![0.0; heads * sq * sk];
        {
            let q = self.data();
            let k = keys.data();
            for h in 0..heads {
                let block = &mut data[h * sq * sk..(h + 1) * sq * sk];
                // scores = scale * Q_h K_h^T, heads addressed as column slices
                unsafe {
                    kernels::gemm_raw(
                        sq, dh, sk, scale,
                        q.as_ptr().add(h * dh), d as isize, 1,
                        k.as_ptr().add(h * dh), 1, d as isize,
                        0.0,
                        block.as_mut_ptr(), sk as isize, 1,
                    );
                }
                for row in block.chunks_mut(sk) {
                    for (x, &pad) in row.iter_mut().zip(key_pad) {
                        *x = if pad { MASKED_LOGIT } else { *x };
                    }
                    let m = math::max(row);
                    for x in row.iter_mut() {
                        *x = math::fast_exp(*x - m);
                    }
                    let inv = 1.0 / math::sum(row);
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
            }
        }
        let (pq, pk) = (self.clone(), keys.clone());
        Tensor::from_op(
            data,
            vec![heads * sq, sk],
            vec![self.clone(), keys.clone()],
            "attn_probs",
            move |g, probs| {
                // dS = P o (dP - rowsum(P o dP)); masked columns carry P = 0
                // and therefore dS = 0, so no explicit masking is needed.
                let mut ds = vec![0.0; sq * sk];
                let q = pq.data();
                let k = pk.data();
                for h in 0..heads {
                    let p_blk = &probs[h * sq * sk..(h + 1) * sq * sk];
                    let g_blk = &g[h * sq * sk..(h + 1) * sq * sk];
                    for i in 0..sq {
                        let (pr, gr) = (&p_blk[i * sk..(i + 1) * sk], &g_blk[i * sk..(i + 1) * sk]);
                        let dot = math::dot(pr, gr);
                        for j in 0..sk {
                            ds[i * sk + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    acc_grad(&pq, |gq| unsafe {
                        // dQ_h += scale * dS_h K_h
                        kernels::gemm_raw(
                            sq, sk, dh, scale,
                            ds.as_ptr(), sk as isize, 1,
                            k.as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            gq.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                    });
                    acc_grad(&pk, |gk| unsafe {
                        // dK_h += scale * dS_h^T Q_h
                        kernels::gemm_raw(
                            sk, sq, dh, scale,
                            ds.as_ptr(), 1, sk as isize,
                            q.as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            gk.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                    });
                }
            },
        )
    }

    /// Weighted value mix for stacked attention probabilities: per head h,
    /// C_h = P_h V_h, heads concatenated back to [sq, d].
    pub fn attn_context(&self, values: &Tensor, heads: usize) -> Result<Tensor> {
        if self.rank() != 2 || values.rank() != 2 {
            return Err(Error::shape(
                "attn_context",
                format!("{:?} with {:?}", self.shape(), values.shape()),
            ));
        }
        let (sk, d) = (values.shape()[0], values.shape()[1]);
        if heads == 0 || d % heads != 0 || self.shape()[0] % heads != 0 || self.shape()[1] != sk {
            return Err(Error::shape(
                "attn_context",
                format!("probs {:?} values {:?} heads {}", self.shape(), values.shape(), heads),
            ));
        }
        let sq = self.shape()[0] / heads;
        let dh = d / heads;
        let mut data = vec![0.0; sq * d];
        {
            let p = self.data();
            let v = values.data();
            for h in 0..heads {
                unsafe {
                    kernels::gemm_raw(
                        sq, sk, dh, 1.0,
                        p.as_ptr().add(h * sq * sk), sk as isize, 1,
                        v.as_ptr().add(h * dh), d as isize, 1,
                        0.0,
                        data.as_mut_ptr().add(h * dh), d as isize, 1,
                    );
                }
            }
        }
        let (pp, pv) = (self.clone(), values.clone());
        Tensor::from_op(
            data,
            vec![sq, d],
            vec![self.clone(), values.clone()],
            "attn_context",
            move |g, _| {
                let p = pp.data();
                let v = pv.data();
                for h in 0..heads {
                    acc_grad(&pp, |gp| unsafe {
                        // dP_h += dC_h V_h^T
                        kernels::gemm_raw(
                            sq, dh, sk, 1.0,
                            g.as_ptr().add(h * dh), d as isize, 1,
                            v.as_ptr().add(h * dh), 1, d as isize,
                            1.0,
                            gp.as_mut_ptr().add(h * sq * sk), sk as isize, 1,
                        );
                    });
                    acc_grad(&pv, |gv| unsafe {
                        // dV_h += P_h^T dC_h
                        kernels::gemm_raw(
                            sk, sq, dh, 1.0,
                            p.as_ptr().add(h * sq * sk), 1, sk as isize,
                            g.as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            gv.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                    });
                }
            },
        )
    }
}
