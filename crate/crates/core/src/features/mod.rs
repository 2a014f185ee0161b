//! The 18 explicitly defined features of a question: option count, seven
//! component word counts, grammar-error rate and nine readability indices.

pub mod grammar;
pub mod readability;
pub mod tokenize;

use serde::{Deserialize, Serialize};

pub use grammar::{grammar_error_rate, GrammarChecker, HeuristicChecker};
pub use readability::{readability_indices, EasyWords, Readability, TextCounts, WordLists};

use crate::dataset::McqRecord;
use crate::error::{Error, Result};

pub const EDF_LEN: usize = 18;

/// Column names in the fixed feature order.
pub const FEATURE_NAMES: [&str; EDF_LEN] = [
    "n_op",
    "words_stem",
    "words_answer",
    "words_d1",
    "words_d2",
    "words_d3",
    "words_d4",
    "words_explanation",
    "grammar_error_rate",
    "flesch_reading_ease",
    "flesch_kincaid",
    "gunning_fog",
    "coleman_liau",
    "linsear_write",
    "automated_readability",
    "spache",
    "dale_chall",
    "smog",
];

/// Explicitly defined features of one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdfVector {
    pub n_op: usize,
    /// Stem, answer, D1..D4, explanation.
    pub word_counts: [usize; 7],
    /// Grammar errors per 100 words.
    pub grammar_error_rate: f64,
    pub readability: Readability,
}

impl EdfVector {
    pub fn to_array(&self) -> [f64; EDF_LEN] {
        let mut out = [0.0; EDF_LEN];
        out[0] = self.n_op as f64;
        for (o, c) in out[1..8].iter_mut().zip(self.word_counts) {
            *o = c as f64;
        }
        out[8] = self.grammar_error_rate;
        out[9..].copy_from_slice(&self.readability.to_array());
        out
    }
}

/// Full question text: every non-empty component, each closed by a sentence
/// terminator.
pub fn question_text(mcq: &McqRecord) -> String {
    let mut parts = Vec::new();
    for c in mcq.components() {
        let c = c.trim();
        if c.is_empty() {
            continue;
        }
        if c.ends_with(['.', '!', '?']) {
            parts.push(c.to_string());
        } else {
            parts.push(format!("{c}."));
        }
    }
    parts.join(" ")
}

/// Computes [`EdfVector`]s with a fixed grammar checker and word lists.
pub struct FeatureExtractor {
    checker: Box<dyn GrammarChecker + Send + Sync>,
    lists: WordLists,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(Box::new(HeuristicChecker), WordLists::default())
    }
}

impl FeatureExtractor {
    pub fn new(checker: Box<dyn GrammarChecker + Send + Sync>, lists: WordLists) -> Self {
        Self { checker, lists }
    }

    pub fn extract(&self, mcq: &McqRecord) -> Result<EdfVector> {
        extract_edf(mcq, self.checker.as_ref(), &self.lists)
    }
}

pub fn extract_edf(mcq: &McqRecord, checker: &dyn GrammarChecker, lists: &WordLists) -> Result<EdfVector> {
    let mut word_counts = [0; 7];
    for (count, text) in word_counts.iter_mut().zip(mcq.components()) {
        *count = tokenize::words(text).len();
    }
    let text = question_text(mcq);
    Ok(EdfVector {
        n_op: 1 + mcq.present_distractors(),
        word_counts,
        grammar_error_rate: grammar_error_rate(&text, checker)?,
        readability: readability_indices(&text, lists),
    })
}

/// Per-feature mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population statistics; deviations below `1e-12` are replaced by 1.
    pub fn fit(rows: &[[f64; EDF_LEN]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("cannot fit feature statistics on no rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; EDF_LEN];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; EDF_LEN];
        for row in rows {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, raw: &[f64; EDF_LEN]) -> [f64; EDF_LEN] {
        let mut out = [0.0; EDF_LEN];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (raw[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

pub fn normalize_edf(v: &EdfVector, stats: &FeatureStats) -> [f64; EDF_LEN] {
    stats.normalize(&v.to_array())
}
