// Slice-level kernels shared by the tape's forward and backward passes.
// All matrices are row-major; dimensions are passed explicitly.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &g_ij) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * g_ij;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o += dot(g_row, b_row);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard normal CDF via `erf`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Row-wise layer norm. Returns (output, normalized input, inverse std per row).
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    h: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * h];
    let mut xhat = vec![0.0; rows * h];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..h {
            let n = (row[j] - mean) * inv;
            xhat[r * h + j] = n;
            out[r * h + j] = n * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Gradient of layer norm w.r.t. its input, given upstream `dy`.
pub(crate) fn layer_norm_backward_input(
    dy: &[f64],
    gain: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    rows: usize,
    h: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * h];
    let hf = h as f64;
    for r in 0..rows {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..h {
            let d = dy[r * h + j] * gain[j];
            sum_d += d;
            sum_dx += d * xhat[r * h + j];
        }
        for j in 0..h {
            let d = dy[r * h + j] * gain[j];
            dx[r * h + j] = inv_std[r] / hf * (hf * d - sum_d - xhat[r * h + j] * sum_dx);
        }
    }
    dx
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        softmax_into(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    out
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Geometry of a batched multi-head attention call over `[batch * seq, hidden]` rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Scaled dot-product attention. `valid_len[b]` keys are visible for sample `b`.
/// Returns (output, attention probabilities `[batch, heads, seq, seq]`).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    valid_len: &[usize],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        hidden,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * hidden];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut scores = vec![0.0; seq];
    for b in 0..batch {
        let len = valid_len[b];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * hidden + off..][..dh];
                for j in 0..len {
                    let kj = &k[(b * seq + j) * hidden + off..][..dh];
                    scores[j] = dot(qi, kj) * scale;
                }
                let p_row = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                softmax_into(&scores[..len], &mut p_row[..len]);
                let o = &mut out[(b * seq + i) * hidden + off..][..dh];
                for j in 0..len {
                    let p = p_row[j];
                    let vj = &v[(b * seq + j) * hidden + off..][..dh];
                    for (od, &vd) in o.iter_mut().zip(vj) {
                        *od += p * vd;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of attention w.r.t. (q, k, v).
pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    valid_len: &[usize],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        hidden,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        let len = valid_len[b];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..seq {
                let p_row = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                let do_i = &dout[(b * seq + i) * hidden + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..len {
                    let vj = &v[(b * seq + j) * hidden + off..][..dh];
                    dp[j] = dot(do_i, vj);
                    weighted += p_row[j] * dp[j];
                    let dvj = &mut dv[(b * seq + j) * hidden + off..][..dh];
                    for (d, &g) in dvj.iter_mut().zip(do_i) {
                        *d += p_row[j] * g;
                    }
                }
                for j in 0..len {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let qi_base = (b * seq + i) * hidden + off;
                    let kj_base = (b * seq + j) * hidden + off;
                    for d in 0..dh {
                        dq[qi_base + d] += ds * k[kj_base + d];
                        dk[kj_base + d] += ds * q[qi_base + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
