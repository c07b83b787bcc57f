//! Raw numeric kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
///
/// `ta`/`tb` mean the operand is stored transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe exactly
    // those buffers; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over the last dimension, max-subtracted. Masked entries
/// (`mask[j] == false`) come out as exactly zero.
pub fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mr = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        softmax_row(xr, mr, or).map_err(|_| Error::InvalidMask { row: r })?;
    }
    Ok(())
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> std::result::Result<(), ()> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if keep(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Row-wise log-softmax (no mask).
pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer norm over rows of width `d`. Returns per-row `(mean, 1/std)`.
pub fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], bias: &[f64], out: &mut [f64]) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(x.len() / d.max(1));
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

/// Geometry of a batched multi-head attention call over `[batch * seq, heads * head_dim]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Scaled dot-product attention per (sequence, head). Returns the output and
/// the attention probabilities laid out as `[batch, heads, seq, seq]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], s: AttnShape) -> (Vec<f64>, Vec<f64>) {
    let (l, dh, w) = (s.seq, s.head_dim, s.width());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; s.probs_len()];
    let mut out = vec![0.0; q.len()];
    let mut scores = vec![0.0; l];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let pbase = (b * s.heads + h) * l * l;
            for i in 0..l {
                let qi = &q[(b * l + i) * w + h * dh..][..dh];
                let upto = if s.causal { i + 1 } else { l };
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate().take(upto) {
                    let kj = &k[(b * l + j) * w + h * dh..][..dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *sc = dot * scale;
                    max = max.max(*sc);
                }
                let prow = &mut probs[pbase + i * l..pbase + (i + 1) * l];
                let mut sum = 0.0;
                for j in 0..upto {
                    prow[j] = (scores[j] - max).exp();
                    sum += prow[j];
                }
                for p in prow.iter_mut().take(upto) {
                    *p /= sum;
                }
                let orow = &mut out[(b * l + i) * w + h * dh..][..dh];
                for j in 0..upto {
                    let pj = prow[j];
                    let vj = &v[(b * l + j) * w + h * dh..][..dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: AttnShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let (l, dh, w) = (s.seq, s.head_dim, s.width());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; l];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let pbase = (b * s.heads + h) * l * l;
            for i in 0..l {
                let upto = if s.causal { i + 1 } else { l };
                let prow = &probs[pbase + i * l..pbase + (i + 1) * l];
                let doi = &dout[(b * l + i) * w + h * dh..][..dh];
                let mut dot_pd = 0.0;
                for j in 0..upto {
                    let vj = &v[(b * l + j) * w + h * dh..][..dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pd += dp[j] * prow[j];
                    let dvj = &mut dv[(b * l + j) * w + h * dh..][..dh];
                    for (d, &g) in dvj.iter_mut().zip(doi) {
                        *d += prow[j] * g;
                    }
                }
                let qi_off = (b * l + i) * w + h * dh;
                for j in 0..upto {
                    let ds = prow[j] * (dp[j] - dot_pd) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (b * l + j) * w + h * dh;
                    for t in 0..dh {
                        dq[qi_off + t] += ds * k[kj_off + t];
                        dk[kj_off + t] += ds * q[qi_off + t];
                    }
                }
            }
        }
    }
}
