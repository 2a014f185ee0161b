//! Splits, the rating training loop, model selection and metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{McqRecord, QualityDataset};
use crate::embeddings::{embed_question, ComponentEmbeddings, GloveTable};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureStats, EDF_LEN};
use crate::models::{ModelInput, RatingModel};
use crate::qdqe::QdqeItem;
use crate::tensor::{Adam, StepSchedule, Tape, Tensor};

/// Index partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `floor(0.8 n)`, `floor(0.1 n)` and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(n);
    Split {
        test: idx.split_off(a + b),
        val: idx.split_off(a),
        train: idx,
    }
}

pub fn split_dataset(ds: &QualityDataset, seed: u64) -> Result<(QualityDataset, QualityDataset, QualityDataset)> {
    let split = split_indices(ds.len(), seed);
    let part = |name: &str, idx: &[usize]| {
        QualityDataset::new(
            format!("{}:{name}", ds.course),
            idx.iter().map(|&i| ds.records[i].clone()).collect(),
            format!("{} split={name} seed={seed}", ds.provenance),
        )
    };
    Ok((part("train", &split.train)?, part("val", &split.val)?, part("test", &split.test)?))
}

/// One labelled question with precomputed inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    pub label: f64,
}

/// Extract features and embeddings for every record. Without a table the
/// embeddings are zero (only EDF-Solo can use such examples).
pub fn build_examples(
    records: &[McqRecord],
    extractor: &FeatureExtractor,
    glove: Option<&GloveTable>,
    d_em: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let edf = extractor.extract(r)?.to_array();
            let re = match glove {
                Some(g) => embed_question(r, g),
                None => ComponentEmbeddings::new(Tensor::zeros(&[7, d_em]))?,
            };
            let label = r.label().unwrap_or(f64::NAN);
            Ok(Example {
                id: r.id.clone(),
                input: ModelInput { edf, re },
                label,
            })
        })
        .collect()
}

pub fn qdqe_items(examples: &[Example]) -> Vec<QdqeItem> {
    examples
        .iter()
        .map(|e| QdqeItem {
            id: e.id.clone(),
            rating: e.label,
            re: e.input.re.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Start the head bias at the mean training label.
    pub init_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            step_size: 3,
            gamma: 0.7,
            seed: 2021,
            init_bias_to_mean: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeAccuracy {
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub best_val_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extremes: Option<ExtremeAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_std: Option<f64>,
    /// Effective run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl TrainReport {
    /// Plain-text table of the epoch curve and final metrics.
    pub fn to_table(&self) -> String {
        let mut out = format!("model {}  seed {}  train {}  val {}\n", self.model, self.seed, self.train_size, self.val_size);
        out.push_str("epoch  lr          train_loss  val_mse\n");
        for e in &self.epochs {
            let mark = if e.epoch == self.selected_epoch { " *" } else { "" };
            out.push_str(&format!(
                "{:>5}  {:<10.3e}  {:<10.6}  {:.6}{mark}\n",
                e.epoch, e.learning_rate, e.train_loss, e.val_mse
            ));
        }
        if let Some(t) = self.test {
            out.push_str(&format!("test MSE {:.6}  ACC {:.4}\n", t.mse, t.acc));
        }
        if let Some(x) = self.extremes {
            out.push_str(&format!("low-quality acc {:.4}  high-quality acc {:.4}\n", x.low, x.high));
        }
        out
    }
}

fn edf_rows(examples: &[Example]) -> Vec<[f64; EDF_LEN]> {
    examples.iter().map(|e| e.input.edf).collect()
}

fn check_labels(split: &str, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset(format!("{split} split is empty")));
    }
    if let Some(e) = examples.iter().find(|e| !e.label.is_finite()) {
        return Err(Error::Validation(format!("{split} question `{}` has no rating", e.id)));
    }
    Ok(())
}

/// Train with MSE loss and Adam on a step-decay schedule, then restore the
/// parameters of the epoch with the lowest validation MSE (earliest on ties).
pub fn train_model(model: &mut RatingModel, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    check_labels("training", train)?;
    check_labels("validation", val)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    model.set_stats(FeatureStats::fit(&edf_rows(train))?)?;
    if cfg.init_bias_to_mean {
        let mut head = model.head_weights();
        head.bias = train.iter().map(|e| e.label).sum::<f64>() / train.len() as f64;
        model.set_head(&head)?;
    }
    let train_in = train.iter().map(|e| model.prepare(&e.input)).collect::<Result<Vec<_>>>()?;
    let val_in = val.iter().map(|e| model.prepare(&e.input)).collect::<Result<Vec<_>>>()?;
    let val_labels: Vec<f64> = val.iter().map(|e| e.label).collect();

    let schedule = StepSchedule::new(cfg.learning_rate, cfg.step_size, cfg.gamma)?;
    let mut adam = Adam::new(model.store(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        model: model.kind().to_string(),
        seed: cfg.seed,
        train_size: train.len(),
        val_size: val.len(),
        epochs: Vec::with_capacity(cfg.epochs),
        selected_epoch: 0,
        best_val_mse: f64::INFINITY,
        test_size: None,
        test: None,
        extremes: None,
        label_mean: None,
        label_std: None,
        config: serde_json::Value::Null,
    };
    let mut best = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule.rate(epoch);
        adam.learning_rate = lr;
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let p = tape.bind(model.store());
            let mut errs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let out = model.forward(&mut tape, &p, &train_in[i], true, &mut rng)?;
                let target = tape.constant(Tensor::scalar(train[i].label));
                let e = tape.sub(out.prediction, target)?;
                errs.push(tape.square(e));
            }
            let total = tape.add_n(&errs)?;
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch, loss: value });
            }
            sse += tape.value(total).item();
            tape.backward(loss, model.store_mut())?;
            adam.step(model.store_mut())?;
        }
        let preds = val_in
            .iter()
            .map(|x| model.predict_prepared(x))
            .collect::<Result<Vec<_>>>()?;
        let val_mse = evaluate(&preds, &val_labels)?.mse;
        let train_loss = sse / train.len() as f64;
        log::info!("{} epoch {epoch}: lr {lr:.3e} train {train_loss:.6} val {val_mse:.6}", model.kind());
        report.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_mse < report.best_val_mse {
            report.best_val_mse = val_mse;
            report.selected_epoch = epoch;
            best = Some(model.store().snapshot());
        }
    }
    match best {
        Some(snap) => model.store_mut().restore(&snap),
        None => {
            return Err(Error::Diverged {
                epoch: cfg.epochs - 1,
                batch: 0,
                loss: f64::NAN,
            })
        }
    }
    Ok(report)
}

/// Index of the minimum, earliest on ties; NaN never wins.
pub fn select_epoch(val_mse: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_mse.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) && !v.is_nan() {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn predict_examples(model: &RatingModel, examples: &[Example]) -> Result<Vec<f64>> {
    examples.iter().map(|e| model.predict(&e.input)).collect()
}

/// Tolerance under which a prediction counts as correct.
pub const ACC_TOLERANCE: f64 = 0.25;

pub fn evaluate(predictions: &[f64], labels: &[f64]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let n = labels.len() as f64;
    let mut sse = 0.0;
    let mut hits = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        let e = p - l;
        sse += e * e;
        if e.abs() <= ACC_TOLERANCE {
            hits += 1;
        }
    }
    Ok(Metrics {
        mse: sse / n,
        acc: hits as f64 / n,
    })
}

/// Mean and population standard deviation.
pub fn label_stats(labels: &[f64]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("no labels".into()));
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Agreement between predicted and true extreme classes: a value is high
/// when above `mu + sigma` and low when below `mu - sigma`.
pub fn classify_extremes(predictions: &[f64], labels: &[f64], mu: f64, sigma: f64) -> Result<ExtremeAccuracy> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("standard deviation must be positive, got {sigma}")));
    }
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (hi, lo) = (mu + sigma, mu - sigma);
    let n = labels.len() as f64;
    let high = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p > hi) == (**l > hi))
        .count() as f64
        / n;
    let low = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p < lo) == (**l < lo))
        .count() as f64
        / n;
    Ok(ExtremeAccuracy { low, high })
}

pub const HISTOGRAM_BINS: usize = 20;
pub const HISTOGRAM_WIDTH: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin `k` covers `[0.25 k, 0.25 (k + 1))`; the last bin also holds 5.
    pub counts: Vec<usize>,
    /// Values outside `[0, 5]` that were clamped into an end bin.
    pub clamped: usize,
}

pub fn rating_histogram(values: &[f64]) -> Histogram {
    let mut counts = vec![0; HISTOGRAM_BINS];
    let mut clamped = 0;
    for &v in values {
        if !(0.0..=5.0).contains(&v) {
            clamped += 1;
        }
        let k = (v.clamp(0.0, 5.0) / HISTOGRAM_WIDTH).floor() as usize;
        counts[k.min(HISTOGRAM_BINS - 1)] += 1;
    }
    Histogram { counts, clamped }
}

/// Score a trained model on held-out examples, adding test metrics and the
/// extreme-class accuracies (against full-dataset label statistics).
pub fn score(
    model: &RatingModel,
    test: &[Example],
    label_mean: f64,
    label_std: f64,
    report: &mut TrainReport,
) -> Result<Vec<f64>> {
    check_labels("test", test)?;
    let preds = predict_examples(model, test)?;
    let labels: Vec<f64> = test.iter().map(|e| e.label).collect();
    report.test_size = Some(test.len());
    report.test = Some(evaluate(&preds, &labels)?);
    report.label_mean = Some(label_mean);
    report.label_std = Some(label_std);
    report.extremes = if label_std > 0.0 {
        Some(classify_extremes(&preds, &labels, label_mean, label_std)?)
    } else {
        None
    };
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(100), (80, 10, 10));
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(1000), (800, 100, 100));
        assert_eq!(split_sizes(15), (12, 1, 2));
        let a = split_indices(100, 2021);
        assert_eq!(a, split_indices(100, 2021));
        assert_ne!(a, split_indices(100, 2022));
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn evaluate_examples() {
        let m = evaluate(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!((m.mse, m.acc), (0.5, 0.5));
        assert_eq!(evaluate(&[2.71], &[2.5]).unwrap().acc, 1.0);
        assert_eq!(evaluate(&[2.75], &[2.5]).unwrap().acc, 1.0);
        assert_eq!(evaluate(&[2.76], &[2.5]).unwrap().acc, 0.0);
        let m = evaluate(&[1.5, 3.0], &[1.5, 3.0]).unwrap();
        assert_eq!((m.mse, m.acc), (0.0, 1.0));
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn extremes_examples() {
        let labels = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (mu, sd) = label_stats(&labels).unwrap();
        let perfect = classify_extremes(&labels, &labels, mu, sd).unwrap();
        assert_eq!((perfect.low, perfect.high), (1.0, 1.0));
        let flat = classify_extremes(&[mu; 5], &labels, mu, sd).unwrap();
        // one label above mu + sd (5 > 4.414)
        assert_eq!(flat.high, 4.0 / 5.0);
        assert!(classify_extremes(&labels, &labels, mu, 0.0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = rating_histogram(&[2.6; 9]);
        assert_eq!(h.counts[10], 9);
        assert_eq!(h.counts.iter().sum::<usize>(), 9);
        let h = rating_histogram(&[5.3, 5.0, -0.1, 0.0]);
        assert_eq!(h.counts[19], 2);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.clamped, 2);
    }

    #[test]
    fn epoch_selection() {
        assert_eq!(select_epoch(&[3.0, 2.0, 1.0]), Some(2));
        assert_eq!(select_epoch(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(select_epoch(&[f64::NAN, 1.0]), Some(1));
        assert_eq!(select_epoch(&[]), None);
    }

    fn toy_examples(n: usize, label: impl Fn(usize) -> f64) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let mut edf = [0.0; EDF_LEN];
                edf[1] = i as f64;
                edf[2] = (i % 3) as f64;
                Example {
                    id: format!("q{i}"),
                    input: ModelInput {
                        edf,
                        re: ComponentEmbeddings::new(Tensor::zeros(&[7, 4])).unwrap(),
                    },
                    label: label(i),
                }
            })
            .collect()
    }

    #[test]
    fn constant_labels_are_learned() {
        let ex = toy_examples(40, |_| 3.2);
        let mut m = RatingModel::new(ModelConfig::new(ModelKind::EdfSolo, 4), None, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            init_bias_to_mean: false,
            learning_rate: 0.05,
            ..Default::default()
        };
        let r = train_model(&mut m, &ex[..32], &ex[32..], &cfg).unwrap();
        assert_eq!(r.epochs.len(), 5);
        let rec: Vec<f64> = r.epochs.iter().map(|e| e.val_mse).collect();
        assert_eq!(Some(r.selected_epoch), select_epoch(&rec));
        assert_eq!(r.best_val_mse, rec[r.selected_epoch]);
        let preds = predict_examples(&m, &ex[32..]).unwrap();
        let mse = evaluate(&preds, &[3.2; 8]).unwrap().mse;
        assert_eq!(mse, r.best_val_mse);
    }

    #[test]
    fn nan_labels_and_empty_splits_are_rejected() {
        let mut m = RatingModel::new(ModelConfig::new(ModelKind::EdfSolo, 4), None, 1).unwrap();
        let ex = toy_examples(4, |_| 1.0);
        assert!(matches!(
            train_model(&mut m, &ex, &[], &TrainConfig::default()),
            Err(Error::EmptyDataset(_))
        ));
        let bad = toy_examples(4, |_| f64::NAN);
        assert!(train_model(&mut m, &bad, &ex, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let ex = toy_examples(20, |i| i as f64 * 1e200);
        let mut m = RatingModel::new(ModelConfig::new(ModelKind::EdfSolo, 4), None, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        match train_model(&mut m, &ex[..16], &ex[16..], &cfg) {
            Err(Error::Diverged { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
