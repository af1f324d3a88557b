//! Forward passes of the adapter-augmented encoder on a [`Tape`].
//!
//! Hidden states are kept as `[batch * seq, hidden]` matrices; each adapter
//! acts on every token row independently. Parameters are bound onto the tape
//! once per step and shared by every forward path built on it.

use super::config::{EncoderConfig, Pooling};
use super::params::{AdapterParams, AdapterSet, Backbone, BlockWeights, Classifier, ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Token ids padded to a common length, plus the true length of each sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    seq: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(sequences: &[S], cfg: &EncoderConfig) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("empty token batch".into()));
        }
        let seq = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sequences.len() * seq);
        let mut lengths = Vec::with_capacity(sequences.len());
        for s in sequences {
            let s = s.as_ref();
            if s.is_empty() || s.len() > cfg.max_seq_len {
                return Err(Error::SequenceLength {
                    len: s.len(),
                    max: cfg.max_seq_len,
                });
            }
            if let Some(&id) = s.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::InvalidToken {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            ids.extend_from_slice(s);
            ids.resize(ids.len() + seq - s.len(), crate::data::PAD);
            lengths.push(s.len());
        }
        Ok(Self { ids, lengths, seq })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

impl BoundAdapter {
    pub fn bind(tape: &mut Tape, a: &AdapterParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| bind_leaf(tape, t, trainable);
        Self {
            w_down: leaf(&a.w_down),
            b_down: leaf(&a.b_down),
            w_up: leaf(&a.w_up),
            b_up: leaf(&a.b_up),
        }
    }

    fn vars(&self) -> [Var; 4] {
        [self.w_down, self.b_down, self.w_up, self.b_up]
    }
}

#[derive(Debug, Clone)]
pub struct BoundAdapterSet {
    pub points: Vec<BoundAdapter>,
}

impl BoundAdapterSet {
    pub fn bind(tape: &mut Tape, set: &AdapterSet, trainable: bool) -> Self {
        Self {
            points: set
                .points
                .iter()
                .map(|p| BoundAdapter::bind(tape, p, trainable))
                .collect(),
        }
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.points.iter().flat_map(BoundAdapter::vars)
    }
}

#[derive(Debug, Clone)]
pub struct BoundClassifier {
    hidden: Option<(Var, Var)>,
    weight: Var,
    bias: Var,
}

impl BoundClassifier {
    pub fn bind(tape: &mut Tape, c: &Classifier, trainable: bool) -> Self {
        let hidden = c
            .hidden
            .as_ref()
            .map(|(w, b)| (bind_leaf(tape, w, trainable), bind_leaf(tape, b, trainable)));
        Self {
            hidden,
            weight: bind_leaf(tape, &c.weight, trainable),
            bias: bind_leaf(tape, &c.bias, trainable),
        }
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some((w, b)) = self.hidden {
            out.extend([w, b]);
        }
        out.extend([self.weight, self.bias]);
        out
    }

    pub fn apply(&self, tape: &mut Tape, rep: Var) -> Result<Var> {
        let mut x = rep;
        if let Some((w, b)) = self.hidden {
            let z = tape.matmul(x, w)?;
            let z = tape.add_row_bias(z, b)?;
            x = tape.gelu(z);
        }
        let z = tape.matmul(x, self.weight)?;
        Ok(tape.add_row_bias(z, self.bias)?)
    }
}

struct BoundBlock {
    vars: [Var; 16],
}

impl BoundBlock {
    fn bind(tape: &mut Tape, block: &BlockWeights) -> Self {
        let t = block.tensors();
        Self {
            vars: std::array::from_fn(|i| tape.constant(t[i].1.clone())),
        }
    }
}

// Index into BoundBlock::vars, following BlockWeights::tensors order.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const FF1_W: usize = 10;
const FF1_B: usize = 11;
const FF2_W: usize = 12;
const FF2_B: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

struct BoundBackbone {
    token_emb: Var,
    pos_emb: Var,
    emb_ln_gain: Var,
    emb_ln_bias: Var,
    blocks: Vec<BoundBlock>,
}

impl BoundBackbone {
    fn bind(tape: &mut Tape, b: &Backbone) -> Self {
        Self {
            token_emb: tape.constant(b.token_emb.clone()),
            pos_emb: tape.constant(b.pos_emb.clone()),
            emb_ln_gain: tape.constant(b.emb_ln_gain.clone()),
            emb_ln_bias: tape.constant(b.emb_ln_bias.clone()),
            blocks: b.blocks.iter().map(|blk| BoundBlock::bind(tape, blk)).collect(),
        }
    }
}

fn bind_leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone().trainable())
    } else {
        tape.constant(t.clone())
    }
}

/// `h + GeLU(h W_down + b_down) W_up + b_up` for every row of `h`.
pub fn adapter_apply(tape: &mut Tape, h: Var, adapter: &BoundAdapter) -> Result<Var> {
    let branch = adapter_branch(tape, h, adapter)?;
    Ok(tape.add(h, branch)?)
}

/// Residual plus the average of the global and private adapter branches.
pub fn dual_adapter_apply(
    tape: &mut Tape,
    h: Var,
    global: &BoundAdapter,
    private: &BoundAdapter,
) -> Result<Var> {
    let g = adapter_branch(tape, h, global)?;
    let p = adapter_branch(tape, h, private)?;
    let sum = tape.add(g, p)?;
    let avg = tape.scale(sum, 0.5);
    Ok(tape.add(h, avg)?)
}

fn adapter_branch(tape: &mut Tape, h: Var, a: &BoundAdapter) -> Result<Var> {
    let down = tape.matmul(h, a.w_down)?;
    let down = tape.add_row_bias(down, a.b_down)?;
    let act = tape.gelu(down);
    let up = tape.matmul(act, a.w_up)?;
    Ok(tape.add_row_bias(up, a.b_up)?)
}

/// Which adapters are active inside the encoder blocks.
#[derive(Clone, Copy)]
pub enum AdapterStack<'a> {
    Backbone,
    Single(&'a BoundAdapterSet),
    Dual(&'a BoundAdapterSet, &'a BoundAdapterSet),
}

/// Source of the adapter used to produce a contrastive representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSource {
    /// Backbone with the client's current global adapter.
    LocalGlobal,
    /// Backbone with the private adapter only.
    LocalPrivateOnly,
    /// Backbone with the server-broadcast average global adapter.
    AverageGlobal,
}

/// Encoder activations that do not depend on any adapter: the embedding
/// output and the first attention sublayer. Shared by all forward paths of a step.
#[derive(Debug, Clone, Copy)]
pub struct Prefix {
    embedded: Var,
    first_attention: Var,
}

/// A [`ModelParams`] bound onto a tape.
pub struct BoundModel {
    config: EncoderConfig,
    backbone: BoundBackbone,
    pub theta_g: BoundAdapterSet,
    pub theta_p: Option<BoundAdapterSet>,
    pub phi_a: BoundClassifier,
    pub phi_b: Option<BoundClassifier>,
}

impl BoundModel {
    /// Binds backbone weights as constants and adapters/heads as trainable leaves
    /// when `trainable` is set.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        Self {
            config: params.config.clone(),
            backbone: BoundBackbone::bind(tape, &params.backbone),
            theta_g: BoundAdapterSet::bind(tape, &params.theta_g, trainable),
            theta_p: params
                .theta_p
                .as_ref()
                .map(|p| BoundAdapterSet::bind(tape, p, trainable)),
            phi_a: BoundClassifier::bind(tape, &params.phi_a, trainable),
            phi_b: params
                .phi_b
                .as_ref()
                .map(|c| BoundClassifier::bind(tape, c, trainable)),
        }
    }

    /// Trainable leaves in the same order as [`ModelParams::named_trainable`].
    pub fn trainable_vars(&self) -> Vec<(ParamGroup, Var)> {
        let mut out: Vec<(ParamGroup, Var)> = Vec::new();
        out.extend(self.theta_g.vars().map(|v| (ParamGroup::ThetaG, v)));
        if let Some(p) = &self.theta_p {
            out.extend(p.vars().map(|v| (ParamGroup::ThetaP, v)));
        }
        out.extend(self.phi_a.vars().into_iter().map(|v| (ParamGroup::PhiA, v)));
        if let Some(b) = &self.phi_b {
            out.extend(b.vars().into_iter().map(|v| (ParamGroup::PhiB, v)));
        }
        out
    }

    pub fn prefix(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Prefix> {
        let bb = &self.backbone;
        let n = batch.len();
        let tok = tape.embedding(bb.token_emb, batch.ids())?;
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..batch.seq_len()).collect();
        let pos = tape.embedding(bb.pos_emb, &positions)?;
        let sum = tape.add(tok, pos)?;
        let embedded = tape.layer_norm(sum, bb.emb_ln_gain, bb.emb_ln_bias, LAYER_NORM_EPS)?;
        let first_attention = self.attention_sublayer(tape, 0, embedded, batch)?;
        Ok(Prefix {
            embedded,
            first_attention,
        })
    }

    fn attention_sublayer(
        &self,
        tape: &mut Tape,
        block: usize,
        x: Var,
        batch: &TokenBatch,
    ) -> Result<Var> {
        let v = &self.backbone.blocks[block].vars;
        let mut proj = |w: usize, b: usize| -> Result<Var> {
            let z = tape.matmul(x, v[w])?;
            Ok(tape.add_row_bias(z, v[b])?)
        };
        let q = proj(WQ, BQ)?;
        let k = proj(WK, BK)?;
        let val = proj(WV, BV)?;
        let a = tape.attention(q, k, val, batch.len(), self.config.num_heads, batch.lengths())?;
        let o = tape.matmul(a, v[WO])?;
        Ok(tape.add_row_bias(o, v[BO])?)
    }

    fn ffn_sublayer(&self, tape: &mut Tape, block: usize, x: Var) -> Result<Var> {
        let v = &self.backbone.blocks[block].vars;
        let z = tape.matmul(x, v[FF1_W])?;
        let z = tape.add_row_bias(z, v[FF1_B])?;
        let z = tape.gelu(z);
        let z = tape.matmul(z, v[FF2_W])?;
        Ok(tape.add_row_bias(z, v[FF2_B])?)
    }

    fn adapt(&self, tape: &mut Tape, h: Var, point: usize, stack: AdapterStack<'_>) -> Result<Var> {
        match stack {
            AdapterStack::Backbone => Ok(h),
            AdapterStack::Single(set) => adapter_apply(tape, h, &set.points[point]),
            AdapterStack::Dual(g, p) => dual_adapter_apply(tape, h, &g.points[point], &p.points[point]),
        }
    }

    /// Last-layer token states `[batch * seq, hidden]` with the given adapters active.
    pub fn encode(
        &self,
        tape: &mut Tape,
        prefix: Prefix,
        stack: AdapterStack<'_>,
        batch: &TokenBatch,
    ) -> Result<Var> {
        let mut x = prefix.embedded;
        for b in 0..self.config.num_blocks {
            let v = &self.backbone.blocks[b].vars;
            let (ln1_g, ln1_b, ln2_g, ln2_b) = (v[LN1_G], v[LN1_B], v[LN2_G], v[LN2_B]);
            let a = if b == 0 {
                prefix.first_attention
            } else {
                self.attention_sublayer(tape, b, x, batch)?
            };
            let a = self.adapt(tape, a, 2 * b, stack)?;
            let r = tape.add(x, a)?;
            x = tape.layer_norm(r, ln1_g, ln1_b, LAYER_NORM_EPS)?;

            let f = self.ffn_sublayer(tape, b, x)?;
            let f = self.adapt(tape, f, 2 * b + 1, stack)?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        }
        Ok(x)
    }

    /// Pooled `[batch, hidden]` representation.
    pub fn represent(
        &self,
        tape: &mut Tape,
        prefix: Prefix,
        stack: AdapterStack<'_>,
        batch: &TokenBatch,
        pooling: Pooling,
    ) -> Result<Var> {
        let hidden = self.encode(tape, prefix, stack, batch)?;
        let cube = tape.reshape(hidden, &[batch.len(), batch.seq_len(), self.config.hidden_size])?;
        Ok(match pooling {
            Pooling::MeanPool => tape.masked_mean_pool(cube, batch.lengths())?,
            Pooling::ClsToken => tape.select_token(cube, 0)?,
        })
    }

    fn full_stack(&self) -> AdapterStack<'_> {
        match &self.theta_p {
            Some(p) => AdapterStack::Dual(&self.theta_g, p),
            None => AdapterStack::Single(&self.theta_g),
        }
    }

    /// Full model (both adapters) through the `phi_a` head. Returns `(logits, representation)`.
    pub fn forward_full(
        &self,
        tape: &mut Tape,
        prefix: Prefix,
        batch: &TokenBatch,
        pooling: Pooling,
    ) -> Result<(Var, Var)> {
        let rep = self.represent(tape, prefix, self.full_stack(), batch, pooling)?;
        let logits = self.phi_a.apply(tape, rep)?;
        Ok((logits, rep))
    }

    /// Backbone with the global adapter only, through the `phi_b` head.
    pub fn forward_global(
        &self,
        tape: &mut Tape,
        prefix: Prefix,
        batch: &TokenBatch,
        pooling: Pooling,
    ) -> Result<(Var, Var)> {
        let rep = self.represent(tape, prefix, AdapterStack::Single(&self.theta_g), batch, pooling)?;
        let head = self.phi_b.as_ref().unwrap_or(&self.phi_a);
        let logits = head.apply(tape, rep)?;
        Ok((logits, rep))
    }

    /// Representation of the backbone enhanced with one adapter source.
    pub fn representation_with(
        &self,
        tape: &mut Tape,
        prefix: Prefix,
        source: AdapterSource,
        snapshot: Option<&BoundAdapterSet>,
        batch: &TokenBatch,
        pooling: Pooling,
    ) -> Result<Var> {
        let stack = match source {
            AdapterSource::LocalGlobal => AdapterStack::Single(&self.theta_g),
            AdapterSource::LocalPrivateOnly => {
                AdapterStack::Single(self.theta_p.as_ref().ok_or(Error::NoPrivateAdapter)?)
            }
            AdapterSource::AverageGlobal => AdapterStack::Single(snapshot.ok_or(Error::MissingSnapshot)?),
        };
        self.represent(tape, prefix, stack, batch, pooling)
    }
}

impl ModelParams {
    /// Full-path logits with no gradient tracking.
    pub fn logits_full(&self, batch: &TokenBatch, pooling: Pooling) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self, false);
        let prefix = bound.prefix(&mut tape, batch)?;
        let (logits, _) = bound.forward_full(&mut tape, prefix, batch, pooling)?;
        Ok(tape.value(logits).clone())
    }

    /// Global-path logits with no gradient tracking.
    pub fn logits_global(&self, batch: &TokenBatch, pooling: Pooling) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self, false);
        let prefix = bound.prefix(&mut tape, batch)?;
        let (logits, _) = bound.forward_global(&mut tape, prefix, batch, pooling)?;
        Ok(tape.value(logits).clone())
    }

    /// Pooled representation for one adapter source with no gradient tracking.
    pub fn representation(
        &self,
        source: AdapterSource,
        snapshot: Option<&AdapterSet>,
        batch: &TokenBatch,
        pooling: Pooling,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self, false);
        let snap = snapshot.map(|s| BoundAdapterSet::bind(&mut tape, s, false));
        let prefix = bound.prefix(&mut tape, batch)?;
        let rep = bound.representation_with(&mut tape, prefix, source, snap.as_ref(), batch, pooling)?;
        Ok(tape.value(rep).clone())
    }

    /// Pooled representation of the frozen backbone alone.
    pub fn backbone_representation(&self, batch: &TokenBatch, pooling: Pooling) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self, false);
        let prefix = bound.prefix(&mut tape, batch)?;
        let rep = bound.represent(&mut tape, prefix, AdapterStack::Backbone, batch, pooling)?;
        Ok(tape.value(rep).clone())
    }
}
