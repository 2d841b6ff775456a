//! Run configuration: a TOML document with defaults for every field, so a
//! parsed config is always fully materialized and can be embedded verbatim
//! in the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use set2seq_core::model::ModelSpec;
use set2seq_core::ranking::TiePolicy;
use set2seq_core::seq_encoder::{OovPolicy, SeqModelSpec};
use set2seq_core::set_encoders::{SetEncoderSpec, SetEncoderVariant, SetPooling};
use set2seq_core::train::TrainSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vanilla,
    StaticSet,
    TemporalDeepsets,
    FlattenedTransformer,
    Set2seq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub set_variant: SetEncoderVariant,
    pub pooling: SetPooling,
    pub d_hidden: usize,
    /// H: set-encoder output width and Transformer hidden size.
    pub hidden: usize,
    pub set_heads: usize,
    pub n_inducing: usize,
    pub set_blocks: usize,
    pub use_positional: bool,
    pub use_temporal: bool,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to 2 * hidden when omitted.
    pub ff_dim: Option<usize>,
    pub pe_base: f64,
    pub oov_policy: OovPolicy,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Set2seq,
            set_variant: SetEncoderVariant::Deepsets,
            pooling: SetPooling::Mean,
            d_hidden: 32,
            hidden: 64,
            set_heads: 4,
            n_inducing: 16,
            set_blocks: 2,
            use_positional: true,
            use_temporal: true,
            layers: 2,
            heads: 4,
            ff_dim: None,
            pe_base: 10_000.0,
            oov_policy: OovPolicy::NearestYear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Stratified,
    TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub manifest: PathBuf,
    /// Ranking used both for targets and for stratification.
    pub ranking: String,
    pub split: SplitKind,
    pub split_seed: u64,
    pub strata: usize,
    pub min_instances: Option<usize>,
    pub val_start_year: i32,
    pub test_start_year: i32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: PathBuf::from("corpus.jsonl"),
            ranking: "target".into(),
            split: SplitKind::Stratified,
            split_seed: 7,
            strata: 10,
            min_instances: None,
            val_start_year: set2seq_core::data::TIME_SERIES_VAL_START,
            test_start_year: set2seq_core::data::TIME_SERIES_TEST_START,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Virtual batch size K for gradient accumulation.
    pub virtual_batch: usize,
    /// Optimizer steps of linear learning-rate warmup.
    pub warmup_steps: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            virtual_batch: 8,
            warmup_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            max_epochs: 30,
            patience: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub tie_policy: TiePolicy,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            tie_policy: TiePolicy::SkipTies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).context("parsing run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.patience == 0 {
            bail!("train.patience must be at least 1");
        }
        if self.train.max_epochs == 0 {
            bail!("train.max_epochs must be at least 1");
        }
        if self.optimizer.virtual_batch == 0 {
            bail!("optimizer.virtual_batch must be at least 1");
        }
        if self.data.val_start_year >= self.data.test_start_year {
            bail!(
                "time-series boundaries must be increasing, got {} and {}",
                self.data.val_start_year,
                self.data.test_start_year
            );
        }
        Ok(())
    }

    /// Architecture spec for a corpus of the given feature width.
    pub fn model_spec(&self, feature_dim: usize) -> ModelSpec {
        let m = &self.model;
        let encoder = SetEncoderSpec {
            variant: m.set_variant,
            pooling: m.pooling,
            d_in: feature_dim,
            d_hidden: m.d_hidden,
            d_out: m.hidden,
            n_heads: m.set_heads,
            n_inducing: m.n_inducing,
            n_blocks: m.set_blocks,
        };
        let seq = SeqModelSpec {
            set_encoder: encoder,
            use_positional: m.use_positional,
            use_temporal: m.use_temporal,
            n_layers: m.layers,
            hidden: m.hidden,
            n_heads: m.heads,
            ff_dim: m.ff_dim.unwrap_or(2 * m.hidden),
            pe_base: m.pe_base,
        };
        match m.kind {
            ModelKind::Vanilla => ModelSpec::Vanilla {
                d_in: feature_dim,
                pooling: m.pooling,
            },
            ModelKind::StaticSet => ModelSpec::StaticSet { encoder },
            ModelKind::TemporalDeepsets => ModelSpec::TemporalDeepsets { encoder },
            ModelKind::FlattenedTransformer => ModelSpec::FlattenedTransformer { seq },
            ModelKind::Set2seq => ModelSpec::Set2seq { seq },
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.optimizer.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            virtual_batch: self.optimizer.virtual_batch,
            warmup_steps: self.optimizer.warmup_steps,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            shuffle_seed: self.train.seed,
            tie_policy: self.output.tie_policy,
        }
    }

    /// Hash of the materialized config (canonical JSON), the run's
    /// provenance key.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_materializes_every_default() {
        let config = RunConfig::from_toml_str("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.model.hidden, 64);
        assert_eq!(config.model.ff_dim, None);
        let spec = config.model_spec(8);
        match spec {
            ModelSpec::Set2seq { seq } => {
                assert_eq!(seq.ff_dim, 128);
                assert_eq!(seq.set_encoder.d_in, 8);
            }
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn partial_documents_override_only_named_fields() {
        let config = RunConfig::from_toml_str(
            r#"
            [model]
            kind = "temporal_deepsets"
            hidden = 16

            [train]
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(config.model.kind, ModelKind::TemporalDeepsets);
        assert_eq!(config.model.hidden, 16);
        assert_eq!(config.train.seed, 9);
        assert_eq!(config.train.patience, 5);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\npatience = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nmax_epochs = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\nval_start_year = 1970\ntest_start_year = 1950\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
