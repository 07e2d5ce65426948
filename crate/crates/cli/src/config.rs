use std::path::{Path, PathBuf};

use cohar_core::conditioning::GeneratorMode;
use cohar_core::data::{generate_synthetic, load_csv, Dataset, SynthConfig};
use cohar_core::model::{ChainConfig, UNetShape};
use cohar_core::train::TrainOptions;
use cohar_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the recordings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated on the fly.
    Synth(SynthConfig),
    /// A `data.csv` with its `meta.json` sidecar.
    Csv(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(c) => generate_synthetic(c),
            DataSource::Csv(p) => load_csv(p),
        }
    }
}

/// Everything that defines a training or comparison run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; model init, shuffling, Gumbel noise and the split use
    /// named streams derived from it.
    pub seed: u64,
    pub data: DataSource,
    /// Conditioning order by label name; empty means dataset order.
    pub label_order: Vec<String>,
    pub unet: UNetShape,
    pub generator: GeneratorMode,
    pub embedding_dims: Option<Vec<usize>>,
    pub teacher_forcing: bool,
    pub stochastic_inference: bool,
    pub train: TrainOptions,
    /// Fraction of sequences used for training; the rest is held out.
    pub split_frac: f64,
    pub normalize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            label_order: Vec::new(),
            unet: UNetShape::default(),
            generator: GeneratorMode::default(),
            embedding_dims: None,
            teacher_forcing: false,
            stochastic_inference: false,
            train: TrainOptions::default(),
            split_frac: 0.8,
            normalize: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_frac > 0.0 && self.split_frac < 1.0) {
            return Err(Error::Config(format!("split_frac must be in (0, 1), got {}", self.split_frac)));
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.generator.validate()?;
        self.train.validate()
    }

    /// Chain configuration for a dataset, honoring `label_order`.
    pub fn chain_config(&self, ds: &Dataset, order: &[String]) -> Result<ChainConfig> {
        let mut c = ChainConfig::new(ds.channels(), ds.labels.clone());
        if !order.is_empty() {
            c.order_by_names(order)?;
        }
        c.unet = self.unet;
        c.generator = self.generator;
        c.embedding_dims = self.embedding_dims.clone();
        c.teacher_forcing = self.teacher_forcing;
        c.stochastic_inference = self.stochastic_inference;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_json_round_trips() {
        let mut c = ExperimentConfig::default();
        c.label_order = vec!["gesture".into(), "walk".into()];
        c.data = DataSource::Csv("x/data.csv".into());
        let back: ExperimentConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.window, 64);
        assert!(matches!(c.data, DataSource::Synth(_)));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn invalid_split_rejected() {
        let c = ExperimentConfig {
            split_frac: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
