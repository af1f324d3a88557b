use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::FederationSpec;
use crate::error::{Error, Result};
use crate::fl::{AggregationWeighting, OptimizerConfig};
use crate::losses::{ContrastiveAnchor, LossWeights, ObjectiveOptions};
use crate::model::{EncoderConfig, Pooling};
use crate::similarity::{SimilarityKind, SimilarityMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Global plus private adapter, contrastive regularization.
    #[default]
    #[serde(alias = "fed_mcp")]
    Fedmcp,
    /// One shared adapter trained with plain cross-entropy and averaged.
    FedavgPeft,
    /// One adapter per client, never communicated.
    LocalOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fedmcp, Method::FedavgPeft, Method::LocalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedmcp => "fedmcp",
            Method::FedavgPeft => "fedavg_peft",
            Method::LocalOnly => "local_only",
        }
    }

    pub fn dual(self) -> bool {
        self == Method::Fedmcp
    }

    pub fn communicates(self) -> bool {
        self != Method::LocalOnly
    }
}

/// Encoder shape shared by every client; class counts and seeds are filled
/// in per client and per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub bottleneck: usize,
    pub classifier_hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            vocab_size: e.vocab_size,
            hidden_size: e.hidden_size,
            num_blocks: e.num_blocks,
            num_heads: e.num_heads,
            ffn_size: e.ffn_size,
            max_seq_len: e.max_seq_len,
            bottleneck: e.bottleneck,
            classifier_hidden: e.classifier_hidden,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self, num_classes: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            hidden_size: self.hidden_size,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            max_seq_len: self.max_seq_len,
            bottleneck: self.bottleneck,
            num_classes,
            seed,
            classifier_hidden: self.classifier_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: usize,
    pub local_epochs: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Run each round's client updates on separate threads.
    pub parallel_clients: bool,
    pub similarity: SimilarityKind,
    pub pooling: Pooling,
    pub contrastive_anchor: ContrastiveAnchor,
    pub aggregation: AggregationWeighting,
    /// Write the server adapter after every round.
    pub checkpoints: bool,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub federation: FederationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedmcp,
            rounds: 25,
            local_epochs: 1,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("reports/run"),
            parallel_clients: false,
            similarity: SimilarityKind::Cka,
            pooling: Pooling::MeanPool,
            contrastive_anchor: ContrastiveAnchor::PrivateAnchor,
            aggregation: AggregationWeighting::Uniform,
            checkpoints: true,
            model: ModelSection::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            federation: FederationSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violated constraint across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            out.push("seeds must be distinct".into());
        }
        // Class count does not affect any other constraint.
        out.extend(
            self.model
                .encoder(2, 0)
                .violations()
                .into_iter()
                .map(|v| format!("model: {v}")),
        );
        out.extend(self.loss.violations());
        out.extend(self.optimizer.violations());
        out.extend(self.federation.violations());
        if self.federation.seq_len > self.model.max_seq_len {
            out.push(format!(
                "federation.seq_len {} exceeds model.max_seq_len {}",
                self.federation.seq_len, self.model.max_seq_len
            ));
        }
        if self.federation.num_clients >= 2 && self.federation.violations().is_empty() {
            for spec in self.federation.client_specs(0, self.model.vocab_size) {
                out.extend(spec.violations().into_iter().map(|v| format!("federation: {v}")));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Loss weights after applying the method: single-adapter methods train on
    /// the full-path cross-entropy alone.
    pub fn effective_weights(&self) -> LossWeights {
        if self.method.dual() {
            self.loss
        } else {
            LossWeights { gamma: 0.0, mu: 0.0 }
        }
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            weights: self.effective_weights(),
            metric: SimilarityMetric::new(self.similarity),
            pooling: self.pooling,
            anchor: self.contrastive_anchor,
        }
    }
}
