use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, OptimizerConfig};
use crate::data::{DatasetSplits, Sample};
use crate::error::{Error, Result};
use crate::losses::{build_objective, LossBreakdown, ObjectiveOptions};
use crate::model::{AdapterSet, AdapterSource, BoundAdapterSet, BoundModel, ModelParams, TokenBatch};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Test hook: make a client fail in a given round.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFailure {
    Error,
    NonFinite,
}

/// Outcome of one local phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub client_id: usize,
    pub steps: usize,
    pub losses: Vec<LossBreakdown>,
    /// `max |Y - Z|` between the local-global and broadcast representations
    /// on the first batch, before any update.
    pub broadcast_gap: Option<f64>,
}

impl LocalReport {
    pub fn mean_loss(&self) -> LossBreakdown {
        LossBreakdown::mean(&self.losses).unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: ModelParams,
    pub optimizer: Adam,
    pub data: DatasetSplits,
    pub options: ObjectiveOptions,
    pub local_epochs: usize,
    rng: ChaCha8Rng,
    #[doc(hidden)]
    pub inject_failure: Option<(usize, InjectedFailure)>,
}

const EVAL_CHUNK: usize = 128;

impl ClientState {
    pub fn new(
        id: usize,
        params: ModelParams,
        optimizer: OptimizerConfig,
        data: DatasetSplits,
        options: ObjectiveOptions,
        local_epochs: usize,
        shuffle_seed: u64,
    ) -> Self {
        Self {
            id,
            params,
            optimizer: Adam::new(optimizer),
            data,
            options,
            local_epochs,
            rng: crate::seeded_rng(shuffle_seed),
            inject_failure: None,
        }
    }

    pub fn num_train(&self) -> usize {
        self.data.train.len()
    }

    fn batch_of(&self, samples: &[&Sample]) -> Result<(TokenBatch, Vec<usize>)> {
        let seqs: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let labels = samples.iter().map(|s| s.label).collect();
        Ok((TokenBatch::new(&seqs, &self.params.config)?, labels))
    }

    /// Shuffled training minibatches for one epoch. A trailing batch of one
    /// sample is dropped since the similarity terms need at least two rows.
    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.optimizer.config().batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn failure_in(&self, round: usize) -> Option<InjectedFailure> {
        self.inject_failure.filter(|(r, _)| *r == round).map(|(_, f)| f)
    }

    /// Runs the local phase of `round`. With a broadcast, the local global
    /// adapter is overwritten first and a frozen copy serves as the
    /// average-global source for the whole phase.
    pub fn local_update(&mut self, round: usize, broadcast: Option<&AdapterSet>) -> Result<LocalReport> {
        if let Some(b) = broadcast {
            if !b.same_shape(&self.params.theta_g) {
                return Err(Error::Payload("broadcast adapter shape mismatch".into()));
            }
            self.params.theta_g = b.clone();
        }
        match self.failure_in(round) {
            Some(InjectedFailure::Error) => {
                return Err(Error::ClientFailure {
                    client: self.id,
                    round,
                    reason: "injected failure".into(),
                })
            }
            Some(InjectedFailure::NonFinite) => {
                self.params.theta_g.points[0].b_up.data_mut()[0] = f64::NAN;
            }
            None => {}
        }
        let snapshot = broadcast.cloned();
        let mut report = LocalReport {
            client_id: self.id,
            steps: 0,
            losses: Vec::new(),
            broadcast_gap: None,
        };
        for _ in 0..self.local_epochs {
            for idx in self.epoch_batches() {
                let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.train[i]).collect();
                let (batch, labels) = self.batch_of(&samples)?;
                let first = report.steps == 0;
                let b = self.step(&batch, &labels, snapshot.as_ref(), first.then_some(&mut report.broadcast_gap))?;
                report.losses.push(b);
                if !b.is_finite() {
                    return Err(Error::NumericalAbort {
                        client: self.id,
                        round,
                        step: report.steps,
                        history: report.losses,
                    });
                }
                report.steps += 1;
            }
        }
        Ok(report)
    }

    /// One Adam step. The breakdown is returned even when non-finite, in
    /// which case parameters are left untouched.
    fn step(
        &mut self,
        batch: &TokenBatch,
        labels: &[usize],
        snapshot: Option<&AdapterSet>,
        gap: Option<&mut Option<f64>>,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &self.params, true);
        let snap = snapshot.map(|s| BoundAdapterSet::bind(&mut tape, s, false));
        let graph = build_objective(&mut tape, &model, snap.as_ref(), batch, labels, &self.options)?;
        if let (Some(gap), Some(reps)) = (gap, graph.contrastive) {
            let sources = self.options.anchor.sources();
            let find = |s: AdapterSource| reps[sources.iter().position(|&x| x == s).expect("source present")];
            let y = tape.value(find(AdapterSource::LocalGlobal));
            let z = tape.value(find(AdapterSource::AverageGlobal));
            *gap = Some(y.max_abs_diff(z));
        }
        let breakdown = graph.breakdown(&tape);
        if !breakdown.is_finite() {
            return Ok(breakdown);
        }
        tape.backward(graph.total)?;
        let vars = model.trainable_vars();
        self.optimizer.begin_step();
        for ((_, name, t), (_, v)) in self.params.named_trainable_mut().into_iter().zip(vars) {
            let grad = tape.grad(v).expect("trainable leaf has a gradient");
            self.optimizer.update(&name, t.data_mut(), grad);
        }
        Ok(breakdown)
    }

    /// Objective on every training batch without updating anything.
    pub fn probe_loss(&self, snapshot: Option<&AdapterSet>) -> Result<LossBreakdown> {
        let bs = self.optimizer.config().batch_size;
        let all: Vec<&Sample> = self.data.train.iter().collect();
        let mut out = Vec::new();
        for chunk in all.chunks(bs).filter(|c| c.len() >= 2) {
            let (batch, labels) = self.batch_of(chunk)?;
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &self.params, false);
            let snap = snapshot.map(|s| BoundAdapterSet::bind(&mut tape, s, false));
            let g = build_objective(&mut tape, &model, snap.as_ref(), &batch, &labels, &self.options)?;
            out.push(g.breakdown(&tape));
        }
        Ok(LossBreakdown::mean(&out).unwrap_or_default())
    }

    /// Full-path predictions for `samples`.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(samples.len());
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(EVAL_CHUNK) {
            let (batch, _) = self.batch_of(chunk)?;
            let logits = self.params.logits_full(&batch, self.options.pooling)?;
            for i in 0..logits.rows() {
                let row = logits.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                preds.push(best);
            }
        }
        Ok(preds)
    }

    /// Fraction of correct full-path argmax predictions on a split.
    pub fn evaluate(&self, split: Split) -> Result<f64> {
        let samples = match split {
            Split::Validation => &self.data.validation,
            Split::Test => &self.data.test,
        };
        accuracy(&self.predict(samples)?, samples)
    }
}

pub fn accuracy(preds: &[usize], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}
