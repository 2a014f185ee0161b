//! Quality-driven question embeddings: a one-layer transformer trained with
//! a contrastive loss so that questions of similar rating embed nearby.

use std::cmp::Ordering;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::ComponentEmbeddings;
use crate::error::{Error, Result};
use crate::tensor::{softplus, Adam, Bindings, ParamStore, StepSchedule, Tape, Var};
use crate::transformer::{Encoder, LayerConfig};

/// One contrastive example, as indices into the item list it was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub anchor: usize,
    pub pos: usize,
    pub neg: usize,
    /// Anchor and positive come from the highest-rated set.
    pub from_high: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleSet {
    pub c: usize,
    /// Indices of the `c` lowest-rated items, in ascending rating order.
    pub low: Vec<usize>,
    /// Indices of the `c` highest-rated items, in ascending rating order.
    pub high: Vec<usize>,
    pub triples: Vec<Triple>,
}

impl TripleSet {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Number of triples produced for extreme-set size `c`.
pub fn triple_count(c: usize) -> usize {
    2 * c * c.saturating_sub(1)
}

/// Indices of `ratings` sorted by rating, ties broken by ascending id.
pub fn rank_by_rating(ids: &[&str], ratings: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ratings.len()).collect();
    order.sort_by(|&a, &b| {
        ratings[a]
            .partial_cmp(&ratings[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(ids[b]))
    });
    order
}

/// Pairs every ordered `(anchor, pos)` within the low and within the high
/// extreme set with one random member of the opposite set. Low-set pairs
/// come first.
pub fn build_triples<R: Rng + ?Sized>(ids: &[&str], ratings: &[f64], c: usize, rng: &mut R) -> Result<TripleSet> {
    let n = ratings.len();
    if ids.len() != n {
        return Err(Error::InvalidArgument(format!("{} ids for {n} ratings", ids.len())));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 questions to build triples, got {n}")));
    }
    if c == 0 || 2 * c >= n {
        return Err(Error::InvalidArgument(format!(
            "extreme-set size c={c} must satisfy 0 < c < n/2 for n={n}; use c <= {}",
            (n - 1) / 2
        )));
    }
    let order = rank_by_rating(ids, ratings);
    let low = order[..c].to_vec();
    let high = order[n - c..].to_vec();
    let mut triples = Vec::with_capacity(triple_count(c));
    for (set, other, from_high) in [(&low, &high, false), (&high, &low, true)] {
        for &anchor in set.iter() {
            for &pos in set.iter() {
                if anchor == pos {
                    continue;
                }
                let neg = other[rng.random_range(0..c)];
                triples.push(Triple {
                    anchor,
                    pos,
                    neg,
                    from_high,
                });
            }
        }
    }
    Ok(TripleSet { c, low, high, triples })
}

/// `-ln(e^{s+/τ} / (e^{s+/τ} + e^{s-/τ}))` for given similarities.
pub fn info_nce_value(sim_pos: f64, sim_neg: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(softplus((sim_neg - sim_pos) / tau))
}

/// InfoNCE with cosine similarity on tape vectors.
pub fn info_nce(tape: &mut Tape, a: Var, pos: Var, neg: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let sp = tape.cosine(a, pos)?;
    let sn = tape.cosine(a, neg)?;
    let diff = tape.sub(sn, sp)?;
    let scaled = tape.scale(diff, 1.0 / tau);
    Ok(tape.softplus(scaled))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QdqeConfig {
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub tau: f64,
    pub c_train: usize,
    pub c_val: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl QdqeConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            heads: 4,
            dropout: 0.5,
            tau: 0.07,
            c_train: 80,
            c_val: 20,
            epochs: 10,
            learning_rate: 1e-3,
            step_size: 3,
            gamma: 0.7,
        }
    }

    fn layer(&self) -> LayerConfig {
        LayerConfig {
            width: self.d,
            heads: self.heads,
            d_ff: 4 * self.d,
            output_projection: true,
            dropout: self.dropout,
        }
    }
}

pub const PREFIX: &str = "qdqe";

/// The contrastively trained encoder with its own parameters.
#[derive(Clone, Debug)]
pub struct QdqeEncoder {
    config: QdqeConfig,
    store: ParamStore,
    encoder: Encoder,
}

impl QdqeEncoder {
    pub fn new<R: Rng + ?Sized>(config: QdqeConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Self::register(&mut store, &config, rng)?;
        Ok(Self { config, store, encoder })
    }

    /// Create the encoder's parameters inside another store under [`PREFIX`].
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &QdqeConfig,
        rng: &mut R,
    ) -> Result<Encoder> {
        Encoder::new(store, PREFIX, config.layer(), 1, rng)
    }

    pub fn config(&self) -> &QdqeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Encoded `7 × d` matrix.
    pub fn encode_matrix<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        re: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.encoder.forward(tape, p, re, training, rng)
    }

    /// Column means of the encoded matrix.
    pub fn encode_question<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        re: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let m = self.encode_matrix(tape, p, re, training, rng)?;
        tape.mean_rows(m)
    }

    /// Evaluation-mode question vector.
    pub fn encode(&self, re: &ComponentEmbeddings) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.store);
        let x = tape.constant(re.tensor().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.encode_question(&mut tape, &p, x, false, &mut rng)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Evaluation-mode encoded matrix, used in place of raw component
    /// embeddings.
    pub fn component_embeddings(&self, re: &ComponentEmbeddings) -> Result<ComponentEmbeddings> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.store);
        let x = tape.constant(re.tensor().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = self.encode_matrix(&mut tape, &p, x, false, &mut rng)?;
        ComponentEmbeddings::new(tape.value(m).clone())
    }
}

/// Free-function form of [`QdqeEncoder::component_embeddings`].
pub fn qdqe_component_embeddings(re: &ComponentEmbeddings, encoder: &QdqeEncoder) -> Result<ComponentEmbeddings> {
    encoder.component_embeddings(re)
}

/// A question as seen by the contrastive trainer.
#[derive(Clone, Debug)]
pub struct QdqeItem {
    pub id: String,
    pub rating: f64,
    pub re: ComponentEmbeddings,
}

pub fn triples_for<R: Rng + ?Sized>(items: &[QdqeItem], c: usize, rng: &mut R) -> Result<TripleSet> {
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let ratings: Vec<f64> = items.iter().map(|i| i.rating).collect();
    build_triples(&ids, &ratings, c, rng)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QdqeReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub selected_epoch: usize,
    pub train_triples: usize,
    pub val_triples: usize,
    pub epoch_seconds: Vec<f64>,
}

/// Mean evaluation-mode InfoNCE over `set`.
pub fn mean_loss(encoder: &QdqeEncoder, items: &[QdqeItem], set: &TripleSet) -> Result<f64> {
    let vecs = encode_all(encoder, items)?;
    let mut total = 0.0;
    for t in &set.triples {
        let sp = crate::tensor::cosine(&vecs[t.anchor], &vecs[t.pos]);
        let sn = crate::tensor::cosine(&vecs[t.anchor], &vecs[t.neg]);
        total += info_nce_value(sp, sn, encoder.config.tau)?;
    }
    Ok(total / set.len().max(1) as f64)
}

fn encode_all(encoder: &QdqeEncoder, items: &[QdqeItem]) -> Result<Vec<Vec<f64>>> {
    items.iter().map(|i| encoder.encode(&i.re)).collect()
}

/// Fraction of triples with `sim(a, pos) > sim(a, neg)`, and the mean gap
/// `sim(a, pos) - sim(a, neg)`.
pub fn triple_accuracy(encoder: &QdqeEncoder, items: &[QdqeItem], set: &TripleSet) -> Result<(f64, f64)> {
    let vecs = encode_all(encoder, items)?;
    let (mut hits, mut gap) = (0usize, 0.0);
    for t in &set.triples {
        let sp = crate::tensor::cosine(&vecs[t.anchor], &vecs[t.pos]);
        let sn = crate::tensor::cosine(&vecs[t.anchor], &vecs[t.neg]);
        if sp > sn {
            hits += 1;
        }
        gap += sp - sn;
    }
    let n = set.len().max(1) as f64;
    Ok((hits as f64 / n, gap / n))
}

/// Contrastive training with batch size 1; the epoch with the lowest
/// validation loss is kept.
pub fn train_qdqe(
    train: &[QdqeItem],
    val: &[QdqeItem],
    config: &QdqeConfig,
    seed: u64,
) -> Result<(QdqeEncoder, QdqeReport)> {
    if config.epochs == 0 {
        return Err(Error::Config("qdqe epochs must be positive".into()));
    }
    check_tau(config.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let too_small = |split: &str, n: usize, c: usize, e: Error| {
        Error::Config(format!(
            "{split} split of {n} questions is too small for c={c}; choose c <= {} ({e})",
            n.saturating_sub(1) / 2
        ))
    };
    let train_set = triples_for(train, config.c_train, &mut rng)
        .map_err(|e| too_small("training", train.len(), config.c_train, e))?;
    let val_set =
        triples_for(val, config.c_val, &mut rng).map_err(|e| too_small("validation", val.len(), config.c_val, e))?;

    let mut enc = QdqeEncoder::new(config.clone(), &mut rng)?;
    let schedule = StepSchedule::new(config.learning_rate, config.step_size, config.gamma)?;
    let mut adam = Adam::new(&enc.store, config.learning_rate);
    let mut report = QdqeReport {
        train_triples: train_set.len(),
        val_triples: val_set.len(),
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<crate::tensor::Tensor>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        adam.learning_rate = schedule.rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &k) in order.iter().enumerate() {
            let t = train_set.triples[k];
            let mut tape = Tape::new();
            let p = tape.bind(&enc.store);
            let mut vec_of = |idx: usize, tape: &mut Tape| -> Result<Var> {
                let x = tape.constant(train[idx].re.tensor().clone());
                enc.encode_question(tape, &p, x, true, &mut rng)
            };
            let a = vec_of(t.anchor, &mut tape)?;
            let pos = vec_of(t.pos, &mut tape)?;
            let neg = vec_of(t.neg, &mut tape)?;
            let loss = info_nce(&mut tape, a, pos, neg, config.tau)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: step,
                    loss: value,
                });
            }
            total += value;
            tape.backward(loss, &mut enc.store)?;
            adam.step(&mut enc.store)?;
        }
        report.train_loss.push(total / order.len() as f64);
        let val_loss = mean_loss(&enc, val, &val_set)?;
        report.val_loss.push(val_loss);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        log::info!(
            "qdqe epoch {epoch}: train {:.5} val {val_loss:.5}",
            report.train_loss[epoch]
        );
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, enc.store.snapshot()));
            report.selected_epoch = epoch;
        }
    }
    if let Some((_, snap)) = best {
        enc.store.restore(&snap);
    }
    Ok((enc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, Tensor};
    use crate::transformer::reference;

    #[test]
    fn triple_counts() {
        let n = 200;
        let ids: Vec<String> = (0..n).map(|i| format!("q{i:03}")).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let ratings: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 20.0).collect();
        for c in [2, 5, 10, 80] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let set = build_triples(&ids, &ratings, c, &mut rng).unwrap();
            assert_eq!(set.len(), triple_count(c));
        }
        assert_eq!(triple_count(2), 4);
        assert_eq!(triple_count(80), 12_640);
    }

    #[test]
    fn preconditions() {
        let ids = ["a", "b", "c", "d", "e", "f"];
        let r = [1.0, 2.0, 3.0, 4.0, 5.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_triples(&ids, &r, 3, &mut rng).is_err());
        assert!(build_triples(&ids, &r, 0, &mut rng).is_err());
        assert!(build_triples(&ids[..3], &r[..3], 1, &mut rng).is_err());
        assert!(build_triples(&ids, &r, 2, &mut rng).is_ok());
    }

    #[test]
    fn ties_broken_by_id() {
        let ids = ["d", "b", "a", "c", "e"];
        let r = [1.0, 1.0, 1.0, 3.0, 0.5];
        assert_eq!(rank_by_rating(&ids, &r), vec![4, 2, 1, 0, 3]);
    }

    #[test]
    fn info_nce_closed_forms() {
        assert!((info_nce_value(0.3, 0.3, 0.07).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let far = info_nce_value(1.0, -1.0, 0.07).unwrap();
        let want = (-2.0f64 / 0.07).exp().ln_1p();
        assert!((far - want).abs() < 1e-25);
        assert!((far - 3.9e-13).abs() < 1e-14);
        assert!(info_nce_value(0.5, 0.1, 0.07).unwrap() < info_nce_value(0.4, 0.1, 0.07).unwrap());
        assert!(info_nce_value(0.5, 0.1, 0.0).is_err());
    }

    #[test]
    fn info_nce_on_tape_matches_value() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let p = tape.constant(Tensor::vector(vec![1.0, 1.0, 0.0]));
        let n = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let l = info_nce(&mut tape, a, p, n, 0.5).unwrap();
        let want = info_nce_value(0.5, 0.0, 0.5).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-14);
    }

    fn small_config() -> QdqeConfig {
        QdqeConfig {
            c_train: 3,
            c_val: 2,
            epochs: 2,
            ..QdqeConfig::new(4)
        }
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = QdqeEncoder::new(small_config(), &mut rng).unwrap();
        let re = ComponentEmbeddings::new(Tensor::uniform(&[7, 4], 1.0, &mut rng)).unwrap();
        assert_eq!(enc.encode(&re).unwrap().len(), 4);
        let e1 = enc.component_embeddings(&re).unwrap();
        assert_eq!(e1.tensor().shape(), &[7, 4]);
        assert_eq!(e1, enc.component_embeddings(&re).unwrap());
        let col_means: Vec<f64> = (0..4).map(|j| (0..7).map(|i| e1.row(i)[j]).sum::<f64>() / 7.0).collect();
        for (a, b) in col_means.iter().zip(enc.encode(&re).unwrap()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_give_layer_normed_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = QdqeEncoder::new(small_config(), &mut rng).unwrap();
        for p in enc.store_mut().iter_mut() {
            if !p.name.ends_with("gain") {
                p.value.data_mut().fill(0.0);
            }
        }
        let re = ComponentEmbeddings::new(Tensor::uniform(&[7, 4], 1.0, &mut rng)).unwrap();
        let got = enc.component_embeddings(&re).unwrap();
        let x: reference::Mat = (0..7).map(|i| re.row(i).to_vec()).collect();
        let (g, b) = (vec![1.0; 4], vec![0.0; 4]);
        let want = reference::layer_norm(&reference::layer_norm(&x, &g, &b), &g, &b);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((got.row(i)[j] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_question_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = QdqeEncoder::new(small_config(), &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[7, 4], 1.0, &mut rng)).collect();
        let encoder = enc.clone();
        let report = check_gradients(enc.store_mut(), 1e-5, |tape, p| {
            let mut drop = ChaCha8Rng::seed_from_u64(2);
            let mut v = Vec::new();
            for x in &xs {
                let xv = tape.constant(x.clone());
                v.push(encoder.encode_question(tape, p, xv, true, &mut drop)?);
            }
            info_nce(tape, v[0], v[1], v[2], 0.5)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    fn items(n: usize, seed: u64) -> Vec<QdqeItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| QdqeItem {
                id: format!("q{i}"),
                rating: rng.random_range(0.0..5.0),
                re: ComponentEmbeddings::new(Tensor::uniform(&[7, 4], 1.0, &mut rng)).unwrap(),
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_checks_c() {
        let (train, val) = (items(10, 1), items(6, 2));
        let (a, ra) = train_qdqe(&train, &val, &small_config(), 7).unwrap();
        let (b, rb) = train_qdqe(&train, &val, &small_config(), 7).unwrap();
        assert_eq!((&ra.train_loss, &ra.val_loss, ra.selected_epoch), (&rb.train_loss, &rb.val_loss, rb.selected_epoch));
        assert_eq!(a.store().snapshot(), b.store().snapshot());
        assert_eq!(ra.train_triples, 12);

        let cfg = QdqeConfig { c_train: 5, ..small_config() };
        let err = train_qdqe(&train, &val, &cfg, 7).unwrap_err();
        assert!(err.to_string().contains("choose c <= 4"), "{err}");
    }
}
