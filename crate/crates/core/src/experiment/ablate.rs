use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::report::{run_experiment, MeanStd};
use crate::error::Result;
use crate::losses::{ContrastiveAnchor, LossWeights};
use crate::model::Pooling;
use crate::similarity::SimilarityKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// `mu = 0`
    #[serde(rename = "no_cl")]
    NoContrastive,
    /// `gamma = 0`
    #[serde(rename = "no_bl")]
    NoBackboneLoss,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoContrastive, Variant::NoBackboneLoss];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoContrastive => "no_cl",
            Variant::NoBackboneLoss => "no_bl",
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Variant::Full => base,
            Variant::NoContrastive => LossWeights { mu: 0.0, ..base },
            Variant::NoBackboneLoss => LossWeights { gamma: 0.0, ..base },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub similarity: SimilarityKind,
    pub pooling: Pooling,
    pub anchor: ContrastiveAnchor,
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!(
            "{}__{}__{}__{}",
            self.variant.as_str(),
            kebab(&self.similarity),
            kebab(&self.pooling),
            kebab(&self.anchor)
        )
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            method: Method::Fedmcp,
            loss: self.variant.weights(base.loss),
            similarity: self.similarity,
            pooling: self.pooling,
            contrastive_anchor: self.anchor,
            ..base.clone()
        }
    }
}

/// {full, mu=0, gamma=0} x {CKA, cosine} x {mean, CLS} under the base
/// anchor, plus the other anchor for every cell whose contrastive term has
/// nonzero weight. With the anchor unused at `mu = 0` those cells are not
/// duplicated.
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<AblationCell> {
    let other = match base.contrastive_anchor {
        ContrastiveAnchor::PrivateAnchor => ContrastiveAnchor::GlobalAnchor,
        ContrastiveAnchor::GlobalAnchor => ContrastiveAnchor::PrivateAnchor,
    };
    let mut cells = Vec::new();
    for anchor in [base.contrastive_anchor, other] {
        for variant in Variant::ALL {
            if anchor == other && variant.weights(base.loss).mu == 0.0 {
                continue;
            }
            for similarity in [SimilarityKind::Cka, SimilarityKind::CosineMean] {
                for pooling in [Pooling::MeanPool, Pooling::ClsToken] {
                    cells.push(AblationCell {
                        variant,
                        similarity,
                        pooling,
                        anchor,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub cell: String,
    pub variant: Variant,
    pub similarity: SimilarityKind,
    pub pooling: Pooling,
    pub contrastive_anchor: ContrastiveAnchor,
    pub seed: u64,
    pub final_test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<(AblationCell, MeanStd)>,
    pub rows: Vec<MatrixRow>,
    pub table: String,
}

pub fn comparison_table(cells: &[(AblationCell, MeanStd)]) -> String {
    let mut out = String::from(
        "| variant | similarity | pooling | anchor | final test acc (%) |\n|---|---|---|---|---|\n",
    );
    for (c, m) in cells {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.variant.as_str(),
            kebab(&c.similarity),
            kebab(&c.pooling),
            kebab(&c.anchor),
            m
        ));
    }
    out
}

/// Runs every cell for every seed. Each cell gets its own report directory
/// under `dir/cells/`; `matrix.csv` has one row per cell and seed.
pub fn run_ablation(base: &ExperimentConfig, dir: &Path, parallel_seeds: bool) -> Result<AblationReport> {
    base.validate()?;
    fs::create_dir_all(dir)?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for cell in ablation_cells(base) {
        let cfg = cell.apply(base);
        let report = run_experiment(&cfg, &dir.join("cells").join(cell.name()), parallel_seeds)?;
        for (seed, acc) in &report.summary.per_seed_average {
            rows.push(MatrixRow {
                cell: cell.name(),
                variant: cell.variant,
                similarity: cell.similarity,
                pooling: cell.pooling,
                contrastive_anchor: cell.anchor,
                seed: *seed,
                final_test_accuracy: *acc,
            });
        }
        log::info!("{}: {}", cell.name(), report.summary.average);
        cells.push((cell, report.summary.average));
    }
    let mut w = csv::Writer::from_path(dir.join("matrix.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let table = comparison_table(&cells);
    fs::write(dir.join("table.md"), &table)?;
    Ok(AblationReport { cells, rows, table })
}
