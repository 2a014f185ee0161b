//! Synthetic question sets whose ratings follow a known rule of the text.
//!
//! Texts are drawn from the closed vocabulary in `data/synthetic_vocab.txt`
//! and the matching word vectors come from [`toy_glove`], so every planted
//! signal is recoverable from either the explicit features or the
//! embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{McqRecord, QualityDataset};
use crate::embeddings::{embed_component, GloveTable};
use crate::error::{Error, Result};
use crate::tensor::cosine;

const VOCAB: &str = include_str!("../../data/synthetic_vocab.txt");

/// Seed of the toy word vectors; independent of the dataset seed.
const GLOVE_SEED: u64 = 0x5eed_0f_7e57;

pub const DEFAULT_DIM: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "signal", rename_all = "kebab-case")]
pub enum Signal {
    /// `rating = intercept + slope · (stem word count)`.
    LengthLinear { intercept: f64, slope: f64 },
    /// Rating rises with the cosine between the answer and distractor 1.
    Correlation,
    /// High- and low-rated questions use disjoint vocabularies.
    VocabularySplit,
}

impl Signal {
    pub fn name(&self) -> &'static str {
        match self {
            Signal::LengthLinear { .. } => "length-linear",
            Signal::Correlation => "correlation",
            Signal::VocabularySplit => "vocabulary-split",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length-linear" => Ok(Signal::LengthLinear {
                intercept: 3.0,
                slope: 0.01,
            }),
            "correlation" => Ok(Signal::Correlation),
            "vocabulary-split" => Ok(Signal::VocabularySplit),
            other => Err(Error::InvalidArgument(format!(
                "unknown signal `{other}` (expected length-linear, correlation or vocabulary-split)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub signal: Signal,
    pub n: usize,
    /// Standard deviation of Gaussian label noise.
    pub noise: f64,
    /// Word-vector width of the matching [`toy_glove`].
    pub dim: usize,
}

impl SyntheticSpec {
    pub fn new(signal: Signal, n: usize) -> Self {
        Self {
            signal,
            n,
            noise: 0.0,
            dim: DEFAULT_DIM,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }
}

/// The shipped vocabulary, grouped by pool name.
pub struct Vocabulary {
    pools: BTreeMap<String, Vec<&'static str>>,
}

impl Vocabulary {
    pub fn bundled() -> Self {
        let mut pools: BTreeMap<String, Vec<&'static str>> = BTreeMap::new();
        for line in VOCAB.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((pool, word)) = line.split_once(' ') {
                pools.entry(pool.to_string()).or_default().push(word.trim());
            }
        }
        Self { pools }
    }

    pub fn pool(&self, name: &str) -> &[&'static str] {
        self.pools.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn topics(&self) -> Vec<&[&'static str]> {
        self.pools
            .iter()
            .filter(|(k, _)| k.starts_with("topic:"))
            .map(|(_, v)| v.as_slice())
            .collect()
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, &'static str)> {
        self.pools
            .iter()
            .flat_map(|(k, v)| v.iter().map(move |w| (k.as_str(), *w)))
    }
}

/// Deterministic word vectors for the bundled vocabulary. Topic words
/// cluster around a shared centroid; all other words are isotropic.
pub fn toy_glove(dim: usize) -> Result<GloveTable> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding width must be positive".into()));
    }
    let vocab = Vocabulary::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(GLOVE_SEED);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid sigma");
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| normal.sample(rng)).collect() };

    let mut pairs = Vec::new();
    for (pool, words) in &vocab.pools {
        let centroid = pool.starts_with("topic:").then(|| draw(&mut rng));
        for w in words {
            let noise = draw(&mut rng);
            let v = match &centroid {
                Some(c) => c.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect(),
                None => noise,
            };
            pairs.push((w.to_string(), v));
        }
    }
    GloveTable::from_pairs(pairs)
}

fn sentence(rng: &mut ChaCha8Rng, pool: &[&str], len: usize, end: char) -> String {
    let mut words: Vec<String> = (0..len)
        .map(|_| pool.choose(rng).expect("non-empty pool").to_string())
        .collect();
    if let Some(first) = words.first_mut() {
        let mut c = first.chars();
        if let Some(h) = c.next() {
            *first = h.to_uppercase().chain(c).collect();
        }
    }
    format!("{}{end}", words.join(" "))
}

/// A stem of exactly `words` words split into sentences of 6–12 words, the
/// last one a question.
fn stem(rng: &mut ChaCha8Rng, pool: &[&str], words: usize) -> String {
    let mut left = words;
    let mut parts = Vec::new();
    while left > 0 {
        let take = if left <= 12 { left } else { rng.random_range(6..=12).min(left) };
        left -= take;
        let end = if left == 0 { '?' } else { '.' };
        parts.push(sentence(rng, pool, take, end));
    }
    parts.join(" ")
}

fn phrase(rng: &mut ChaCha8Rng, pool: &[&str], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    sentence(rng, pool, len, '.').trim_end_matches('.').to_string()
}

/// Generate `spec.n` questions; the same `(spec, seed)` always yields the
/// same dataset.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<QualityDataset> {
    if spec.n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {}", spec.noise)));
    }
    let vocab = Vocabulary::bundled();
    let glove = toy_glove(spec.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let filler = vocab.pool("filler");
    let topics = vocab.topics();

    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let n_distractors = rng.random_range(2..=4);
        let (record, clean) = match spec.signal {
            Signal::LengthLinear { intercept, slope } => {
                let words = rng.random_range(20..=180);
                let topic = topics.choose(&mut rng).expect("topics");
                let record = McqRecord {
                    id: String::new(),
                    stem: stem(&mut rng, filler, words),
                    answer: phrase(&mut rng, topic, 1, 2),
                    distractors: (0..n_distractors).map(|_| phrase(&mut rng, topic, 1, 2)).collect(),
                    explanation: phrase(&mut rng, filler, 5, 15) + ".",
                    ratings: None,
                    average_rating: None,
                    rating_count: None,
                };
                (record, intercept + slope * words as f64)
            }
            Signal::Correlation => {
                let answer_topic = rng.random_range(0..topics.len());
                let d1_topic = if rng.random_bool(0.5) {
                    answer_topic
                } else {
                    rng.random_range(0..topics.len())
                };
                let answer = topics[answer_topic].choose(&mut rng).expect("topic").to_string();
                let d1 = topics[d1_topic].choose(&mut rng).expect("topic").to_string();
                let cos = cosine(&embed_component(&answer, &glove), &embed_component(&d1, &glove));
                let mut distractors = vec![capitalize(&d1)];
                for _ in 1..n_distractors {
                    let t = topics.choose(&mut rng).expect("topics");
                    distractors.push(capitalize(t.choose(&mut rng).expect("topic")));
                }
                let len = rng.random_range(8..=30);
                let record = McqRecord {
                    id: String::new(),
                    stem: stem(&mut rng, filler, len),
                    answer: capitalize(&answer),
                    distractors,
                    explanation: phrase(&mut rng, filler, 5, 15) + ".",
                    ratings: None,
                    average_rating: None,
                    rating_count: None,
                };
                (record, 2.5 + 2.0 * cos)
            }
            Signal::VocabularySplit => {
                let high = rng.random_bool(0.5);
                let pool = vocab.pool(if high { "high" } else { "low" });
                let len = rng.random_range(8..=30);
                let record = McqRecord {
                    id: String::new(),
                    stem: stem(&mut rng, pool, len),
                    answer: phrase(&mut rng, pool, 1, 2),
                    distractors: (0..n_distractors).map(|_| phrase(&mut rng, pool, 1, 2)).collect(),
                    explanation: phrase(&mut rng, pool, 5, 15) + ".",
                    ratings: None,
                    average_rating: None,
                    rating_count: None,
                };
                (record, if high { 4.0 } else { 1.5 })
            }
        };
        let noisy = if spec.noise > 0.0 { clean + noise.sample(&mut rng) } else { clean };
        records.push(McqRecord {
            id: format!("syn-{i:05}"),
            average_rating: Some(noisy.clamp(0.0, 5.0)),
            rating_count: Some(rng.random_range(10..=60)),
            ..record
        });
    }
    QualityDataset::new(
        format!("synthetic-{}", spec.signal),
        records,
        format!(
            "synthetic signal={} n={} noise={} dim={} seed={seed}",
            spec.signal, spec.n, spec.noise, spec.dim
        ),
    )
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(h) => h.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::tokenize;
    use std::collections::HashSet;

    #[test]
    fn length_linear_rule() {
        let spec = SyntheticSpec::new(Signal::from_str("length-linear").unwrap(), 50);
        let ds = generate_synthetic(&spec, 3).unwrap();
        for r in &ds.records {
            let words = tokenize::words(&r.stem).len() as f64;
            let expected = (3.0 + 0.01 * words).clamp(0.0, 5.0);
            assert!((r.label().unwrap() - expected).abs() < 1e-12);
        }
        // stem of 100 words rates 4.0 before noise
        assert!((3.0f64 + 0.01 * 100.0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::new(Signal::Correlation, 40).with_noise(0.1);
        assert_eq!(
            generate_synthetic(&spec, 9).unwrap(),
            generate_synthetic(&spec, 9).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec, 9).unwrap().records,
            generate_synthetic(&spec, 10).unwrap().records
        );
    }

    #[test]
    fn vocabulary_split_pools_are_disjoint() {
        let spec = SyntheticSpec::new(Signal::VocabularySplit, 200).with_noise(0.2);
        let ds = generate_synthetic(&spec, 5).unwrap();
        let mut high = HashSet::new();
        let mut low = HashSet::new();
        let high_pool: HashSet<&str> = Vocabulary::bundled().pool("high").iter().copied().collect();
        for r in &ds.records {
            let words: Vec<String> = r
                .components()
                .iter()
                .flat_map(|c| tokenize::words(c))
                .map(str::to_lowercase)
                .collect();
            let is_high = high_pool.contains(words[0].as_str());
            let target = if is_high { &mut high } else { &mut low };
            target.extend(words);
        }
        assert!(!high.is_empty() && !low.is_empty());
        assert!(high.is_disjoint(&low));
    }

    #[test]
    fn labels_in_range_and_filterable() {
        for signal in ["length-linear", "correlation", "vocabulary-split"] {
            let spec = SyntheticSpec::new(signal.parse().unwrap(), 100).with_noise(1.0);
            let ds = generate_synthetic(&spec, 1).unwrap();
            for r in &ds.records {
                let l = r.label().unwrap();
                assert!((0.0..=5.0).contains(&l));
                assert!(r.rating_count() >= 10);
            }
        }
    }

    #[test]
    fn unknown_signal() {
        assert!(Signal::from_str("sentiment").is_err());
    }

    #[test]
    fn toy_vectors_cover_vocabulary() {
        let g = toy_glove(50).unwrap();
        assert_eq!(g.dim(), 52);
        for (_, w) in Vocabulary::bundled().words() {
            assert!(g.get(w).is_some(), "{w}");
        }
    }
}
