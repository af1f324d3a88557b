//! Synthetic sequence-classification silos.
//!
//! Each client gets its own rule over token sequences, drawn from a pool of six
//! task kinds with client-specific designated tokens. Sequences are built
//! conditioned on a uniformly drawn label, so the rule oracle in
//! [`TaskRule::label_of`] agrees with every noise-free label by construction.

mod export;
mod tasks;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use export::{read_records, write_records};
pub use tasks::{TaskKind, TaskRule};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// First id available to task content.
pub const FIRST_CONTENT: usize = 3;

const BALANCE_RETRIES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task_kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub label_noise: f64,
    pub samples_per_client: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(task_kind: TaskKind, seed: u64) -> Self {
        Self {
            task_kind,
            vocab_size: 64,
            seq_len: 16,
            num_classes: task_kind.num_classes(),
            label_noise: 0.0,
            samples_per_client: 600,
            seed,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let kind = self.task_kind;
        if self.num_classes != kind.num_classes() {
            out.push(format!(
                "{kind:?} has {} classes, spec says {}",
                kind.num_classes(),
                self.num_classes
            ));
        }
        if self.vocab_size < FIRST_CONTENT + kind.min_content_tokens() {
            out.push(format!(
                "vocab_size {} too small for {kind:?} (needs {})",
                self.vocab_size,
                FIRST_CONTENT + kind.min_content_tokens()
            ));
        }
        if self.seq_len < kind.min_seq_len() {
            out.push(format!(
                "seq_len {} too short for {kind:?} (needs {})",
                self.seq_len,
                kind.min_seq_len()
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            out.push(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        // Every class must be able to appear in each of the three splits.
        if self.samples_per_client < 5 * self.num_classes {
            out.push(format!(
                "samples_per_client must be >= {}, got {}",
                5 * self.num_classes,
                self.samples_per_client
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Sizes of the 6:2:2 train/validation/test partition of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let validation = ((n as f64 * 0.2).round() as usize).min(n - train);
    (train, validation, n - train - validation)
}

fn class_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

fn acceptable(samples: &[Sample], splits: &DatasetSplits, classes: usize) -> bool {
    let counts = class_counts(samples, classes);
    if classes == 2 {
        let frac = counts[1] as f64 / samples.len() as f64;
        if !(0.3..=0.7).contains(&frac) {
            return false;
        }
    }
    [&splits.train, &splits.validation, &splits.test]
        .iter()
        .all(|s| class_counts(s, classes).iter().all(|&c| c > 0))
}

/// Draws the label noise-free, then flips it to a different class with
/// probability `noise`.
fn noisy_label<R: Rng>(clean: usize, classes: usize, noise: f64, rng: &mut R) -> usize {
    if noise > 0.0 && rng.random_bool(noise) {
        let other = rng.random_range(0..classes - 1);
        if other >= clean {
            other + 1
        } else {
            other
        }
    } else {
        clean
    }
}

/// Labelling rule for a synthetic task, drawn from the task's seed.
pub fn task_rule(spec: &SyntheticTaskSpec) -> TaskRule {
    let mut rng = crate::seeded_rng(crate::derive_seed(spec.seed, 0x7275_6c65));
    TaskRule::draw(spec.task_kind, spec.vocab_size, spec.seq_len, &mut rng)
}

pub fn generate_client_dataset(spec: &SyntheticTaskSpec) -> Result<DatasetSplits> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::Data(v.join("; ")));
    }
    let rule = task_rule(spec);
    let mut rng = crate::seeded_rng(crate::derive_seed(spec.seed, 0x6461_7461));
    let classes = spec.num_classes;
    for _ in 0..BALANCE_RETRIES {
        let samples: Vec<Sample> = (0..spec.samples_per_client)
            .map(|_| {
                let clean = rng.random_range(0..classes);
                let tokens = rule.generate(clean, &mut rng);
                debug_assert_eq!(rule.label_of(&tokens), clean);
                Sample {
                    tokens,
                    label: noisy_label(clean, classes, spec.label_noise, &mut rng),
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(samples.len());
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let splits = DatasetSplits {
            train: pick(&order[..n_train]),
            validation: pick(&order[n_train..n_train + n_val]),
            test: pick(&order[n_train + n_val..]),
        };
        if acceptable(&samples, &splits, classes) {
            return Ok(splits);
        }
    }
    Err(Error::Data(format!(
        "could not reach class balance for {:?} after {BALANCE_RETRIES} attempts",
        spec.task_kind
    )))
}

/// Shared shape of a synthetic federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub seq_len: usize,
    pub label_noise: f64,
    /// Task per client; defaults to the first `num_clients` kinds in [`TaskKind::ALL`].
    pub tasks: Option<Vec<TaskKind>>,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            num_clients: 6,
            samples_per_client: 600,
            seq_len: 16,
            label_noise: 0.0,
            tasks: None,
        }
    }
}

impl FederationSpec {
    pub fn task_kinds(&self) -> Vec<TaskKind> {
        match &self.tasks {
            Some(t) => t.clone(),
            None => TaskKind::ALL.iter().copied().take(self.num_clients).collect(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_clients < 2 {
            out.push(format!("federation.num_clients must be >= 2, got {}", self.num_clients));
        }
        if self.num_clients > TaskKind::ALL.len() && self.tasks.is_none() {
            out.push(format!(
                "federation.num_clients must be <= {} (one distinct task each), got {}",
                TaskKind::ALL.len(),
                self.num_clients
            ));
        }
        if let Some(t) = &self.tasks {
            if t.len() != self.num_clients {
                out.push(format!(
                    "federation.tasks lists {} tasks for {} clients",
                    t.len(),
                    self.num_clients
                ));
            }
            let distinct: HashSet<_> = t.iter().collect();
            if distinct.len() != t.len() {
                out.push("federation.tasks must be pairwise distinct".into());
            }
        }
        out
    }

    /// Per-client specs with seeds derived from `master_seed`.
    pub fn client_specs(&self, master_seed: u64, vocab_size: usize) -> Vec<SyntheticTaskSpec> {
        self.task_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| SyntheticTaskSpec {
                task_kind: kind,
                vocab_size,
                seq_len: self.seq_len,
                num_classes: kind.num_classes(),
                label_noise: self.label_noise,
                samples_per_client: self.samples_per_client,
                seed: crate::derive_seed(master_seed, 1000 + i as u64),
            })
            .collect()
    }
}

/// Generates every client's splits. Task kinds must be pairwise distinct.
pub fn build_federation(specs: &[SyntheticTaskSpec]) -> Result<Vec<DatasetSplits>> {
    if specs.len() < 2 {
        return Err(Error::Data(format!("a federation needs >= 2 clients, got {}", specs.len())));
    }
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.task_kind) {
            return Err(Error::Data(format!("duplicate task kind {:?}", s.task_kind)));
        }
    }
    if specs.iter().any(|s| s.samples_per_client != specs[0].samples_per_client) {
        return Err(Error::Data("all clients must hold the same number of samples".into()));
    }
    specs.iter().map(generate_client_dataset).collect()
}
