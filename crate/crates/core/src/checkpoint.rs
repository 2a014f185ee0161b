//! JSON checkpoints for rating models and contrastive encoders.
//!
//! Layout (format version 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "artifact": "rating-model" | "qdqe-encoder",
//!   "seed": 2021,
//!   "config": { ...effective run configuration... },
//!   "model": { ...ModelConfig... },          // rating models only
//!   "qdqe": { ...QdqeConfig... },            // encoders only
//!   "feature_stats": { "mean": [..18], "std": [..18] },
//!   "params": [ { "name": "head.w", "shape": [18], "data": [...] }, ... ]
//! }
//! ```
//!
//! Floats are written with enough digits to round-trip exactly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::models::{copy_by_name, ModelConfig, ModelKind, RatingModel};
use crate::qdqe::{QdqeConfig, QdqeEncoder};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Artifact {
    RatingModel,
    QdqeEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub artifact: Artifact,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qdqe: Option<QdqeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_stats: Option<FeatureStats>,
    pub params: Vec<NamedTensor>,
}

fn named(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

fn load_params(dst: &mut ParamStore, params: &[NamedTensor]) -> Result<()> {
    if params.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            dst.len()
        )));
    }
    let mut src = ParamStore::new();
    for p in params {
        src.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?);
    }
    copy_by_name(dst, &src)
}

impl Checkpoint {
    pub fn from_model(model: &RatingModel, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            artifact: Artifact::RatingModel,
            seed,
            config,
            model: Some(model.config().clone()),
            qdqe: None,
            feature_stats: Some(model.stats().clone()),
            params: named(model.store()),
        }
    }

    pub fn from_encoder(encoder: &QdqeEncoder, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            artifact: Artifact::QdqeEncoder,
            seed,
            config,
            model: None,
            qdqe: Some(encoder.config().clone()),
            feature_stats: None,
            params: named(encoder.store()),
        }
    }

    fn check(&self, want: Artifact) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.artifact != want {
            return Err(Error::Checkpoint(format!("expected a {want:?} checkpoint, found {:?}", self.artifact)));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<RatingModel> {
        self.check(Artifact::RatingModel)?;
        let config = self
            .model
            .clone()
            .ok_or_else(|| Error::Checkpoint("rating-model checkpoint lacks a model section".into()))?;
        let placeholder = match (config.kind, &config.qdqe) {
            (ModelKind::DeepQr, Some(q)) => Some(QdqeEncoder::new(q.clone(), &mut ChaCha8Rng::seed_from_u64(0))?),
            (ModelKind::DeepQr, None) => {
                return Err(Error::Checkpoint("deepqr checkpoint lacks the encoder configuration".into()))
            }
            _ => None,
        };
        let mut model = RatingModel::new(config, placeholder.as_ref(), self.seed)?;
        load_params(model.store_mut(), &self.params)?;
        if let Some(stats) = &self.feature_stats {
            model.set_stats(stats.clone())?;
        }
        Ok(model)
    }

    pub fn to_encoder(&self) -> Result<QdqeEncoder> {
        self.check(Artifact::QdqeEncoder)?;
        let config = self
            .qdqe
            .clone()
            .ok_or_else(|| Error::Checkpoint("encoder checkpoint lacks a qdqe section".into()))?;
        let mut enc = QdqeEncoder::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(enc.store_mut(), &self.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
