use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, SyntheticConfig, DEFAULT_SPLIT};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::parallel::Execution;

/// Validation metric that picks the kept epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    /// AUROC for two classes, accuracy otherwise.
    #[default]
    Auto,
    Auroc,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    #[serde(default = "TrainingConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainingConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub selection: SelectionMetric,
    #[serde(default)]
    pub execution: Execution,
}

impl TrainingConfig {
    fn default_batch() -> usize {
        128
    }

    fn default_epochs() -> usize {
        20
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            batch_size: Self::default_batch(),
            epochs: Self::default_epochs(),
            adam: AdamConfig::default(),
            selection: SelectionMetric::Auto,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Whole dataset, split by `split` (used by `sweep`).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Generated on the fly when no dataset file is given.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub split: Option<[f64; 3]>,
    /// Overrides the class count inferred from labels.
    #[serde(default)]
    pub n_classes: Option<usize>,
}

impl DataConfig {
    pub fn split(&self) -> [f64; 3] {
        self.split.unwrap_or(DEFAULT_SPLIT)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            training: TrainingConfig::with_seed(seed),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.adam.lr >= 0.0 && t.adam.lr.is_finite()) {
            return Err(Error::Config(
                "learning rate must be a nonnegative number".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.adam.beta1)
            || !(0.0..1.0).contains(&t.adam.beta2)
            || t.adam.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::Config(
                "Adam needs betas in [0, 1) and a positive epsilon".into(),
            ));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, meta: &DatasetMeta) -> ModelConfig {
        ModelConfig {
            n_variates: meta.n_variates,
            n_classes: meta.n_classes,
            static_dim: meta.static_dim,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
