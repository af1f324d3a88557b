//! Client objective: full-model cross-entropy, global-path cross-entropy and
//! the contrastive similarity difference, weighted as
//! `(1 - gamma) * l_a + gamma * l_b + mu * l_c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSource, BoundAdapterSet, BoundModel, Pooling, TokenBatch};
use crate::similarity::SimilarityMetric;
use crate::tensor::{Tape, TensorResult, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            mu: 0.05,
        }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma) {
            out.push(format!("loss.gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            out.push(format!("loss.mu must be a finite value >= 0, got {}", self.mu));
        }
        out
    }
}

/// Scalar values of the objective's components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_a: f64, l_b: f64, l_c: f64, w: LossWeights) -> Self {
        Self {
            l_a,
            l_b,
            l_c,
            total: (1.0 - w.gamma) * l_a + w.gamma * l_b + w.mu * l_c,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_a, self.l_b, self.l_c, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            l_a: sum(|b| b.l_a),
            l_b: sum(|b| b.l_b),
            l_c: sum(|b| b.l_c),
            total: sum(|b| b.total),
        })
    }
}

/// Which representation anchors the two similarity terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveAnchor {
    /// `Sim(private, local global) - Sim(private, average global)`.
    #[default]
    PrivateAnchor,
    /// `Sim(local global, private) - Sim(local global, average global)`.
    GlobalAnchor,
}

impl ContrastiveAnchor {
    /// Adapter sources for (X, Y, Z) in `Sim(X, Y) - Sim(X, Z)`.
    pub fn sources(self) -> [AdapterSource; 3] {
        match self {
            ContrastiveAnchor::PrivateAnchor => [
                AdapterSource::LocalPrivateOnly,
                AdapterSource::LocalGlobal,
                AdapterSource::AverageGlobal,
            ],
            ContrastiveAnchor::GlobalAnchor => [
                AdapterSource::LocalGlobal,
                AdapterSource::LocalPrivateOnly,
                AdapterSource::AverageGlobal,
            ],
        }
    }
}

pub fn loss_a(tape: &mut Tape, logits_a: Var, labels: &[usize]) -> TensorResult<Var> {
    tape.cross_entropy(logits_a, labels)
}

pub fn loss_b(tape: &mut Tape, logits_b: Var, labels: &[usize]) -> TensorResult<Var> {
    tape.cross_entropy(logits_b, labels)
}

/// `Sim(X, Y) - Sim(X, Z)`.
pub fn loss_c(
    tape: &mut Tape,
    x: Var,
    y: Var,
    z: Var,
    metric: SimilarityMetric,
) -> TensorResult<Var> {
    let xy = metric.apply(tape, x, y)?;
    let xz = metric.apply(tape, x, z)?;
    tape.sub(xy, xz)
}

pub fn total_loss(
    tape: &mut Tape,
    l_a: Var,
    l_b: Var,
    l_c: Var,
    w: LossWeights,
) -> TensorResult<Var> {
    let a = tape.scale(l_a, 1.0 - w.gamma);
    let b = tape.scale(l_b, w.gamma);
    let c = tape.scale(l_c, w.mu);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Everything the objective needs besides parameters and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub metric: SimilarityMetric,
    pub pooling: Pooling,
    pub anchor: ContrastiveAnchor,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            metric: SimilarityMetric::default(),
            pooling: Pooling::MeanPool,
            anchor: ContrastiveAnchor::PrivateAnchor,
        }
    }
}

/// Recorded objective for one batch.
pub struct ObjectiveGraph {
    pub total: Var,
    pub l_a: Var,
    pub l_b: Option<Var>,
    pub l_c: Option<Var>,
    /// (X, Y, Z) representations feeding `l_c`.
    pub contrastive: Option<[Var; 3]>,
}

impl ObjectiveGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
        LossBreakdown {
            l_a: tape.item(self.l_a),
            l_b: get(self.l_b),
            l_c: get(self.l_c),
            total: tape.item(self.total),
        }
    }
}

/// Records the client objective on `tape`.
///
/// Dual-adapter models evaluate all three terms in one graph (the contrastive
/// term needs `snapshot`, the broadcast global adapter). Single-adapter models
/// only have the full-path cross-entropy.
pub fn build_objective(
    tape: &mut Tape,
    model: &BoundModel,
    snapshot: Option<&BoundAdapterSet>,
    batch: &TokenBatch,
    labels: &[usize],
    opts: &ObjectiveOptions,
) -> Result<ObjectiveGraph> {
    let prefix = model.prefix(tape, batch)?;
    let (logits_a, _) = model.forward_full(tape, prefix, batch, opts.pooling)?;
    let l_a = loss_a(tape, logits_a, labels)?;
    if model.theta_p.is_none() {
        return Ok(ObjectiveGraph {
            total: l_a,
            l_a,
            l_b: None,
            l_c: None,
            contrastive: None,
        });
    }
    let snapshot = snapshot.ok_or(Error::MissingSnapshot)?;

    let (logits_b, global_rep) = model.forward_global(tape, prefix, batch, opts.pooling)?;
    let l_b = loss_b(tape, logits_b, labels)?;

    let rep = |source: AdapterSource, tape: &mut Tape| -> Result<Var> {
        match source {
            AdapterSource::LocalGlobal => Ok(global_rep),
            other => model.representation_with(tape, prefix, other, Some(snapshot), batch, opts.pooling),
        }
    };
    let [sx, sy, sz] = opts.anchor.sources();
    let x = rep(sx, tape)?;
    let y = rep(sy, tape)?;
    let z = rep(sz, tape)?;
    let l_c = loss_c(tape, x, y, z, opts.metric)?;
    let total = total_loss(tape, l_a, l_b, l_c, opts.weights)?;
    Ok(ObjectiveGraph {
        total,
        l_a,
        l_b: Some(l_b),
        l_c: Some(l_c),
        contrastive: Some([x, y, z]),
    })
}
