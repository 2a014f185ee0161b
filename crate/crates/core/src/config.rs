//! Run configuration: defaults, JSON config files and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::qdqe::QdqeConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub model: ModelKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub dropout: f64,
    /// Embedding width; taken from the word-vector file when unset.
    pub d_em: Option<usize>,
    pub d_scqc: usize,
    pub d_sf: usize,
    pub c: usize,
    pub c_val: usize,
    pub tau: f64,
    pub qdqe_epochs: usize,
    pub qdqe_finetune: bool,
    pub min_ratings: usize,
    pub init_bias_to_mean: bool,
    pub glove: Option<PathBuf>,
    pub spache_list: Option<PathBuf>,
    pub dale_chall_list: Option<PathBuf>,
    pub qdqe_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub lenient: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            model: ModelKind::DeepQr,
            seed: 2021,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            step_size: 3,
            gamma: 0.7,
            dropout: 0.5,
            d_em: None,
            d_scqc: 7,
            d_sf: 16,
            c: 80,
            c_val: 20,
            tau: 0.07,
            qdqe_epochs: 10,
            qdqe_finetune: false,
            min_ratings: 10,
            init_bias_to_mean: true,
            glove: None,
            spache_list: None,
            dale_chall_list: None,
            qdqe_checkpoint: None,
            output_dir: PathBuf::from("runs"),
            lenient: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("step_size", self.step_size),
            ("d_scqc", self.d_scqc),
            ("d_sf", self.d_sf),
            ("qdqe_epochs", self.qdqe_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.gamma > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("learning_rate, gamma and tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            step_size: self.step_size,
            gamma: self.gamma,
            seed: self.seed,
            init_bias_to_mean: self.init_bias_to_mean,
        }
    }

    pub fn model_config(&self, kind: ModelKind, d_em: usize) -> ModelConfig {
        ModelConfig {
            d_scqc: self.d_scqc,
            d_sf: self.d_sf,
            dropout: self.dropout,
            qdqe_finetune: self.qdqe_finetune,
            ..ModelConfig::new(kind, d_em)
        }
    }

    pub fn qdqe_config(&self, d_em: usize) -> QdqeConfig {
        QdqeConfig {
            dropout: self.dropout,
            tau: self.tau,
            c_train: self.c,
            c_val: self.c_val,
            epochs: self.qdqe_epochs,
            learning_rate: self.learning_rate,
            step_size: self.step_size,
            gamma: self.gamma,
            ..QdqeConfig::new(d_em)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.seed, c.epochs, c.batch_size, c.step_size), (2021, 50, 16, 3));
        assert_eq!((c.learning_rate, c.gamma, c.dropout, c.tau), (1e-3, 0.7, 0.5, 0.07));
        assert_eq!((c.c, c.min_ratings), (80, 10));
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 3, "model": "edf-solo"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model, ModelKind::EdfSolo);
        assert_eq!(c.batch_size, 16);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values() {
        let c = RunConfig { dropout: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
