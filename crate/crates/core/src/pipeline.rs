//! End-to-end helpers shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::dataset::{filter_and_label, QualityDataset};
use crate::embeddings::GloveTable;
use crate::error::Result;
use crate::features::FeatureExtractor;
use crate::models::{ModelConfig, RatingModel};
use crate::qdqe::{train_qdqe, QdqeConfig, QdqeEncoder, QdqeReport};
use crate::training::{
    build_examples, label_stats, qdqe_items, score, split_indices, train_model, Example, TrainConfig, TrainReport,
};

/// A filtered dataset split 8:1:1 with features and embeddings computed.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Mean and population standard deviation of all labels.
    pub label_mean: f64,
    pub label_std: f64,
}

pub fn prepare_splits(
    dataset: &QualityDataset,
    min_ratings: usize,
    extractor: &FeatureExtractor,
    glove: Option<&GloveTable>,
    d_em: usize,
    seed: u64,
) -> Result<PreparedSplits> {
    let ds = filter_and_label(dataset, min_ratings)?;
    let (label_mean, label_std) = label_stats(&ds.labels()?)?;
    let all = build_examples(&ds.records, extractor, glove, d_em)?;
    let split = split_indices(all.len(), seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    Ok(PreparedSplits {
        train: pick(&split.train),
        val: pick(&split.val),
        test: pick(&split.test),
        label_mean,
        label_std,
    })
}

/// Contrastive pre-training on the training and validation splits.
pub fn pretrain_qdqe(splits: &PreparedSplits, config: &QdqeConfig, seed: u64) -> Result<(QdqeEncoder, QdqeReport)> {
    train_qdqe(&qdqe_items(&splits.train), &qdqe_items(&splits.val), config, seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub test_predictions: Vec<f64>,
}

/// Initialise, train and score one model.
pub fn run_model(
    splits: &PreparedSplits,
    config: ModelConfig,
    qdqe: Option<&QdqeEncoder>,
    train_cfg: &TrainConfig,
) -> Result<(RatingModel, RunOutcome)> {
    let mut model = RatingModel::new(config, qdqe, train_cfg.seed)?;
    let mut report = train_model(&mut model, &splits.train, &splits.val, train_cfg)?;
    let test_predictions = score(&model, &splits.test, splits.label_mean, splits.label_std, &mut report)?;
    Ok((model, RunOutcome { report, test_predictions }))
}
