//! Differentiable similarity between two batches of representations.
//!
//! Linear CKA compares the centered Gram matrices `K = X X^T` and `L = Y Y^T`
//! through HSIC, so it is invariant to orthogonal transforms and isotropic
//! scaling of either input. Cosine similarity is kept as a per-row baseline.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, TensorResult, Var};

pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Cka,
    #[serde(alias = "cosine")]
    CosineMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityMetric {
    pub kind: SimilarityKind,
    /// Guard for vanishing denominators.
    pub eps: f64,
}

impl SimilarityMetric {
    pub fn new(kind: SimilarityKind) -> Self {
        Self {
            kind,
            eps: DEFAULT_EPS,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, y: Var) -> TensorResult<Var> {
        match self.kind {
            SimilarityKind::Cka => cka(tape, x, y, self.eps),
            SimilarityKind::CosineMean => cosine_mean(tape, x, y, self.eps),
        }
    }
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        Self::new(SimilarityKind::Cka)
    }
}

/// `I - (1/n) 1 1^T`
pub fn centering_matrix(n: usize) -> Tensor {
    let mut h = Tensor::filled(&[n, n], -1.0 / n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    h
}

/// `tr(K H L H) / (n-1)^2` for symmetric `n x n` Gram matrices.
pub fn hsic(tape: &mut Tape, k: Var, l: Var) -> TensorResult<Var> {
    let (ks, ls) = (tape.shape(k).to_vec(), tape.shape(l).to_vec());
    if ks.len() != 2 || ks[0] != ks[1] || ks != ls {
        return Err(TensorError::Shape {
            op: "hsic",
            lhs: ks,
            rhs: ls,
        });
    }
    let n = ks[0];
    if n < 2 {
        return Err(TensorError::DegenerateBatch { needed: 2, got: n });
    }
    let h = tape.constant(centering_matrix(n));
    let hk = tape.matmul(h, k)?;
    let hkh = tape.matmul(hk, h)?;
    // tr(HKH L) = sum((HKH) o L^T) and L is symmetric
    let prod = tape.mul(hkh, l)?;
    let s = tape.sum(prod);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(tape.scale(s, 1.0 / denom))
}

fn gram(tape: &mut Tape, x: Var) -> TensorResult<Var> {
    let xt = tape.transpose(x)?;
    tape.matmul(x, xt)
}

/// Linear CKA between `x[n x h]` and `y[n x h']`.
///
/// When `sqrt(HSIC(K,K) HSIC(L,L)) < eps` (a batch with no variation) the
/// result is a constant 0 and a warning is logged.
pub fn cka(tape: &mut Tape, x: Var, y: Var, eps: f64) -> TensorResult<Var> {
    let (xs, ys) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
        return Err(TensorError::Shape {
            op: "cka",
            lhs: xs,
            rhs: ys,
        });
    }
    if xs[0] < 2 {
        return Err(TensorError::DegenerateBatch {
            needed: 2,
            got: xs[0],
        });
    }
    let k = gram(tape, x)?;
    let l = gram(tape, y)?;
    let kl = hsic(tape, k, l)?;
    let kk = hsic(tape, k, k)?;
    let ll = hsic(tape, l, l)?;
    let denom_sq = tape.mul(kk, ll)?;
    let d = tape.item(denom_sq);
    if !(d.max(0.0).sqrt() >= eps) {
        warn!("cka: degenerate denominator {d:e}; returning 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let denom = tape.sqrt(denom_sq);
    tape.div(kl, denom)
}

/// Mean over rows of `cos(x_i, y_i)`.
pub fn cosine_mean(tape: &mut Tape, x: Var, y: Var, eps: f64) -> TensorResult<Var> {
    let c = tape.row_cosine(x, y, eps)?;
    Ok(tape.mean(c))
}
