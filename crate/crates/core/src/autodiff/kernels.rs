//! Raw numeric kernels behind the tape operations.
//!
//! Layouts are row-major. Convolutions use `[batch, channels, length]`
//! activations; conv kernels are `[out, in, width]` and locally-connected
//! weights are `[positions, out, in, width]`.

use super::tensor::Tensor;

/// Zero "same" padding offset for an odd kernel width.
pub(crate) fn same_pad(width: usize) -> usize {
    (width - 1) / 2
}

/// Valid range of output positions `t` such that `t + shift` lies in `[0, len)`.
#[inline]
fn shifted_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        len.saturating_sub(shift as usize)
    } else {
        len
    };
    (lo.min(hi), hi)
}

/// `y[b,o,t] = sum_{i,k} K[o,i,k] * x[b,i,t+k-p]` with zero padding.
pub(crate) fn conv1d(x: &Tensor, k: &Tensor) -> Tensor {
    let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, width) = (k.shape()[0], k.shape()[2]);
    let pad = same_pad(width) as isize;
    let xd = x.data();
    let kd = k.data();
    let mut y = vec![0.0; b * cout * len];
    for bi in 0..b {
        for o in 0..cout {
            let yrow = &mut y[(bi * cout + o) * len..(bi * cout + o + 1) * len];
            for i in 0..cin {
                let xrow = &xd[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                for kk in 0..width {
                    let w = kd[(o * cin + i) * width + kk];
                    if w == 0.0 {
                        continue;
                    }
                    let shift = kk as isize - pad;
                    let (lo, hi) = shifted_range(len, shift);
                    let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (yv, &xv) in yrow[lo..hi].iter_mut().zip(xs) {
                        *yv += w * xv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, len], y)
}

/// `dK[o,i,k] = sum_{b,t} g[b,o,t] * x[b,i,t+k-p]`.
pub(crate) fn conv_kernel_grad(x: &Tensor, g: &Tensor, width: usize) -> Tensor {
    let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = g.shape()[1];
    let pad = same_pad(width) as isize;
    let xd = x.data();
    let gd = g.data();
    let mut dk = vec![0.0; cout * cin * width];
    for o in 0..cout {
        for i in 0..cin {
            for kk in 0..width {
                let shift = kk as isize - pad;
                let (lo, hi) = shifted_range(len, shift);
                let mut acc = 0.0;
                for bi in 0..b {
                    let grow = &gd[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                    let xrow = &xd[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                    let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    acc += grow[lo..hi]
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| gv * xv)
                        .sum::<f64>();
                }
                dk[(o * cin + i) * width + kk] = acc;
            }
        }
    }
    Tensor::from_vec(&[cout, cin, width], dk)
}

/// `K'[i,o,k] = K[o,i,W-1-k]`. Adjoint (and inverse) of itself.
pub(crate) fn flip_transpose(k: &Tensor) -> Tensor {
    let (cout, cin, width) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let kd = k.data();
    let mut out = vec![0.0; cout * cin * width];
    for o in 0..cout {
        for i in 0..cin {
            for kk in 0..width {
                out[(i * cout + o) * width + (width - 1 - kk)] = kd[(o * cin + i) * width + kk];
            }
        }
    }
    Tensor::from_vec(&[cin, cout, width], out)
}

pub(crate) fn local_out_len(len: usize, width: usize, stride: usize) -> Option<usize> {
    if width == 0 || stride == 0 || len < width {
        return None;
    }
    Some((len - width) / stride + 1)
}

/// `y[b,o,j] = sum_{i,k} W[j,o,i,k] * x[b,i,j*S+k]`.
pub(crate) fn local(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (lout, cout, width) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; b * cout * lout];
    for bi in 0..b {
        for j in 0..lout {
            let start = j * stride;
            for o in 0..cout {
                let mut acc = 0.0;
                for i in 0..cin {
                    let xs = &xd[(bi * cin + i) * len + start..(bi * cin + i) * len + start + width];
                    let ws = &wd[((j * cout + o) * cin + i) * width..((j * cout + o) * cin + i + 1) * width];
                    acc += xs.iter().zip(ws).map(|(&a, &c)| a * c).sum::<f64>();
                }
                y[(bi * cout + o) * lout + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[b, cout, lout], y)
}

/// `dx[b,i,j*S+k] += sum_o W[j,o,i,k] * g[b,o,j]`.
pub(crate) fn local_input_grad(w: &Tensor, g: &Tensor, len: usize, stride: usize) -> Tensor {
    let (lout, cout, cin, width) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let b = g.shape()[0];
    let wd = w.data();
    let gd = g.data();
    let mut dx = vec![0.0; b * cin * len];
    for bi in 0..b {
        for j in 0..lout {
            let start = j * stride;
            for o in 0..cout {
                let gv = gd[(bi * cout + o) * lout + j];
                if gv == 0.0 {
                    continue;
                }
                for i in 0..cin {
                    let ws = &wd[((j * cout + o) * cin + i) * width..((j * cout + o) * cin + i + 1) * width];
                    let xs = &mut dx[(bi * cin + i) * len + start..(bi * cin + i) * len + start + width];
                    for (d, &wv) in xs.iter_mut().zip(ws) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cin, len], dx)
}

/// `dW[j,o,i,k] = sum_b g[b,o,j] * x[b,i,j*S+k]`.
pub(crate) fn local_weight_grad(x: &Tensor, g: &Tensor, width: usize, stride: usize) -> Tensor {
    let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, lout) = (g.shape()[1], g.shape()[2]);
    let xd = x.data();
    let gd = g.data();
    let mut dw = vec![0.0; lout * cout * cin * width];
    for bi in 0..b {
        for j in 0..lout {
            let start = j * stride;
            for o in 0..cout {
                let gv = gd[(bi * cout + o) * lout + j];
                if gv == 0.0 {
                    continue;
                }
                for i in 0..cin {
                    let xs = &xd[(bi * cin + i) * len + start..(bi * cin + i) * len + start + width];
                    let ds = &mut dw[((j * cout + o) * cin + i) * width..((j * cout + o) * cin + i + 1) * width];
                    for (d, &xv) in ds.iter_mut().zip(xs) {
                        *d += gv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[lout, cout, cin, width], dw)
}

/// Dimensions `(m, k, n)` of `op(a) @ op(b)`, or `None` when inner sizes differ.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return None;
    }
    let (m, ka) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (kb, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    (ka == kb).then_some((m, ka, n))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k, n) = matmul_dims(a.shape(), b.shape(), ta, tb).expect("checked by caller");
    let ad = a.data();
    let bd = b.data();
    let a_at = |r: usize, c: usize| if ta { ad[c * m + r] } else { ad[r * k + c] };
    let mut out = vec![0.0; m * n];
    if tb {
        // rows of b are contiguous along k
        for r in 0..m {
            for c in 0..n {
                let brow = &bd[c * k..(c + 1) * k];
                let mut acc = 0.0;
                for (kk, &bv) in brow.iter().enumerate() {
                    acc += a_at(r, kk) * bv;
                }
                out[r * n + c] = acc;
            }
        }
    } else {
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for kk in 0..k {
                let av = a_at(r, kk);
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Adds `b[c]` along axis 1 of a tensor of rank >= 2.
pub(crate) fn add_channel_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (batch, ch) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    let od = out.data_mut();
    for bi in 0..batch {
        for c in 0..ch {
            let bv = b.data()[c];
            for v in &mut od[(bi * ch + c) * inner..(bi * ch + c + 1) * inner] {
                *v += bv;
            }
        }
    }
    out
}

pub(crate) fn sum_to_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (batch, ch) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; ch];
    for bi in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += x.data()[(bi * ch + c) * inner..(bi * ch + c + 1) * inner]
                .iter()
                .sum::<f64>();
        }
    }
    Tensor::vector(out)
}

pub(crate) fn broadcast_channels(b: &Tensor, shape: &[usize]) -> Tensor {
    let (batch, ch) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(batch * ch * inner);
    for _ in 0..batch {
        for c in 0..ch {
            out.extend(std::iter::repeat_n(b.data()[c], inner));
        }
    }
    Tensor::from_vec(shape, out)
}

pub(crate) fn broadcast_batch(b: &Tensor, batch: usize) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(b.shape());
    let mut out = Vec::with_capacity(batch * b.len());
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    Tensor::from_vec(&shape, out)
}

pub(crate) fn sum_batch(x: &Tensor) -> Tensor {
    let inner: usize = x.shape()[1..].iter().product();
    let mut out = vec![0.0; inner];
    for row in x.data().chunks(inner.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(&x.shape()[1..], out)
}

/// Number of classes per row when the last axis is the class axis.
fn row_len(x: &Tensor) -> usize {
    *x.shape().last().unwrap_or(&1)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = row_len(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// `p_i Σ_j p_j (g_i − g_j)` per row, which equals `p_i (g_i − Σ_j p_j g_j)`
/// without the cancellation when one probability rounds to 1.
pub(crate) fn softmax_grad_rows(p: &Tensor, g: &Tensor) -> Tensor {
    let c = row_len(p);
    let mut out = p.clone();
    for ((o, pr), gr) in out
        .data_mut()
        .chunks_mut(c)
        .zip(p.data().chunks(c))
        .zip(g.data().chunks(c))
    {
        for i in 0..c {
            let mut acc = 0.0;
            for j in 0..c {
                if j != i {
                    acc += pr[j] * (gr[i] - gr[j]);
                }
            }
            o[i] = pr[i] * acc;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = row_len(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub(crate) fn row_sum_broadcast(x: &Tensor) -> Tensor {
    let c = row_len(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.fill(s);
    }
    out
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.shape()[1];
    Tensor::vector(idx.iter().enumerate().map(|(r, &j)| x.data()[r * c + j]).collect())
}

pub(crate) fn scatter_rows(g: &Tensor, idx: &[usize], cols: usize) -> Tensor {
    let mut out = vec![0.0; idx.len() * cols];
    for (r, &j) in idx.iter().enumerate() {
        out[r * cols + j] = g.data()[r];
    }
    Tensor::from_vec(&[idx.len(), cols], out)
}
