use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::{run_seeds, CsvRow, SeedRun};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParameterCount};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { mean, std, n }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * s),
            None => write!(f, "{:.2} ± n/a", 100.0 * self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAccounting {
    pub method: Method,
    pub total: usize,
    pub backbone: usize,
    pub trainable: usize,
    pub trainable_adapters: usize,
    pub communicated: usize,
    pub trainable_pct: f64,
    pub communicated_pct: f64,
    pub communicated_over_trainable_adapters: f64,
}

/// Parameter accounting for each method on a client with `num_classes` classes.
pub fn accounting(cfg: &ExperimentConfig, num_classes: usize) -> Result<Vec<MethodAccounting>> {
    let enc = cfg.model.encoder(num_classes, 0);
    Method::ALL
        .into_iter()
        .map(|method| {
            let params = if method.dual() {
                ModelParams::init(&enc)?
            } else {
                ModelParams::init_single(&enc)?
            };
            let ParameterCount {
                total,
                backbone,
                trainable,
                trainable_adapters,
                communicated,
            } = params.count_parameters();
            let communicated = if method.communicates() { communicated } else { 0 };
            Ok(MethodAccounting {
                method,
                total,
                backbone,
                trainable,
                trainable_adapters,
                communicated,
                trainable_pct: 100.0 * trainable as f64 / total as f64,
                communicated_pct: 100.0 * communicated as f64 / total as f64,
                communicated_over_trainable_adapters: communicated as f64 / trainable_adapters as f64,
            })
        })
        .collect()
}

pub fn accounting_table(rows: &[MethodAccounting]) -> String {
    let mut out = String::from(
        "| method | total | backbone | trainable | trainable adapters | communicated | param % | comm % | comm / adapters |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {} |\n",
            r.method.as_str(),
            r.total,
            r.backbone,
            r.trainable,
            r.trainable_adapters,
            r.communicated,
            r.trainable_pct,
            r.communicated_pct,
            r.communicated_over_trainable_adapters
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub final_test_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub method: Method,
    pub similarity: crate::similarity::SimilarityKind,
    pub pooling: crate::model::Pooling,
    pub contrastive_anchor: crate::losses::ContrastiveAnchor,
    pub aggregation: crate::fl::AggregationWeighting,
    pub gamma: f64,
    pub mu: f64,
    pub adam_moments_reset_on_broadcast: bool,
    pub average_global_snapshot: String,
}

impl Metadata {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        let w = cfg.effective_weights();
        Self {
            method: cfg.method,
            similarity: cfg.similarity,
            pooling: cfg.pooling,
            contrastive_anchor: cfg.contrastive_anchor,
            aggregation: cfg.aggregation,
            gamma: w.gamma,
            mu: w.mu,
            adam_moments_reset_on_broadcast: false,
            average_global_snapshot: "frozen for the whole local phase".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub final_round: usize,
    pub per_client: Vec<ClientSummary>,
    /// Client-averaged final test accuracy, aggregated over seeds.
    pub average: MeanStd,
    pub per_seed_average: BTreeMap<u64, f64>,
    pub accounting: Vec<MethodAccounting>,
    pub metadata: Metadata,
}

/// Summary statistics from CSV rows alone.
pub fn summarize(rows: &[CsvRow], accounting: Vec<MethodAccounting>, metadata: Metadata) -> Result<Summary> {
    let final_round = rows.iter().map(|r| r.round).max().ok_or_else(|| Error::Data("no rows".into()))?;
    let finals: Vec<&CsvRow> = rows
        .iter()
        .filter(|r| r.round == final_round && r.split == "test")
        .collect();
    let mut by_client: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &finals {
        by_client.entry(r.client_id).or_default().push(r.accuracy);
        by_seed.entry(r.seed).or_default().push(r.accuracy);
    }
    let per_seed_average: BTreeMap<u64, f64> = by_seed
        .iter()
        .map(|(s, v)| (*s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let averages: Vec<f64> = per_seed_average.values().copied().collect();
    Ok(Summary {
        seeds: by_seed.keys().copied().collect(),
        final_round,
        per_client: by_client
            .into_iter()
            .map(|(client_id, v)| ClientSummary {
                client_id,
                final_test_accuracy: MeanStd::of(&v),
            })
            .collect(),
        average: MeanStd::of(&averages),
        per_seed_average,
        accounting,
        metadata,
    })
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A written report directory.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub csv_paths: Vec<PathBuf>,
    pub summary: Summary,
    pub runs: Vec<SeedRun>,
}

pub fn seed_csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

/// Runs every seed and writes `config.toml`, `seed_<s>.csv`, `summary.json`
/// and (optionally) `checkpoints/seed_<s>/round_<t>.{json,bin}` under `dir`.
///
/// A non-finite loss writes `diagnostics_seed_<s>.json` with the loss history
/// before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, parallel_seeds: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let ckpt = cfg.checkpoints.then(|| dir.join("checkpoints"));
    let results = run_seeds(cfg, parallel_seeds, ckpt.as_deref());
    let mut runs = Vec::new();
    let mut csv_paths = Vec::new();
    for (seed, res) in cfg.seeds.iter().zip(results) {
        match res {
            Ok(run) => {
                let path = seed_csv_path(dir, *seed);
                write_csv(&path, &run.rows)?;
                csv_paths.push(path);
                runs.push(run);
            }
            Err(e) => {
                if let Error::NumericalAbort { client, round, step, history } = &e {
                    let diag = serde_json::json!({
                        "seed": seed, "client": client, "round": round, "step": step,
                        "history": history,
                    });
                    let path = dir.join(format!("diagnostics_seed_{seed}.json"));
                    fs::write(&path, serde_json::to_string_pretty(&diag)?)?;
                    log::error!("numerical abort; diagnostics in {}", path.display());
                }
                return Err(e);
            }
        }
    }
    let rows: Vec<CsvRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let classes = cfg.federation.task_kinds().first().map_or(2, |k| k.num_classes());
    let summary = summarize(&rows, accounting(cfg, classes)?, Metadata::of(cfg))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentReport {
        dir: dir.to_path_buf(),
        csv_paths,
        summary,
        runs,
    })
}
