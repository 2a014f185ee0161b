//! The five rating models and their shared linear prediction head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::ComponentEmbeddings;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, EDF_LEN};
use crate::qdqe::{QdqeConfig, QdqeEncoder};
use crate::scqc::{Scqc, ScqcConfig};
use crate::sf::{SfConfig, SfEncoder};
use crate::tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::Encoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    EdfSolo,
    EdfEnriched,
    Sf,
    Combined,
    #[serde(rename = "deepqr")]
    DeepQr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::EdfSolo,
        ModelKind::EdfEnriched,
        ModelKind::Sf,
        ModelKind::Combined,
        ModelKind::DeepQr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::EdfSolo => "edf-solo",
            ModelKind::EdfEnriched => "edf-enriched",
            ModelKind::Sf => "sf",
            ModelKind::Combined => "combined",
            ModelKind::DeepQr => "deepqr",
        }
    }

    pub fn uses_edf(self) -> bool {
        self != ModelKind::Sf
    }

    pub fn uses_scqc(self) -> bool {
        matches!(self, ModelKind::EdfEnriched | ModelKind::Combined | ModelKind::DeepQr)
    }

    pub fn uses_sf(self) -> bool {
        matches!(self, ModelKind::Sf | ModelKind::Combined | ModelKind::DeepQr)
    }

    pub fn uses_embeddings(self) -> bool {
        self != ModelKind::EdfSolo
    }

    pub fn input_width(self, d_scqc: usize, d_sf: usize) -> usize {
        let mut w = 0;
        if self.uses_edf() {
            w += EDF_LEN;
        }
        if self.uses_scqc() {
            w += d_scqc;
        }
        if self.uses_sf() {
            w += d_sf;
        }
        w
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown model `{s}` (expected edf-solo, edf-enriched, sf, combined or deepqr)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Padded embedding width.
    pub d_em: usize,
    pub d_scqc: usize,
    pub d_sf: usize,
    pub dropout: f64,
    pub scqc_layers: usize,
    pub sf_layers: usize,
    pub sf_heads: usize,
    /// Keep training the contrastive encoder during rating training.
    pub qdqe_finetune: bool,
    /// Architecture of the contrastive encoder; required for DeepQR.
    pub qdqe: Option<QdqeConfig>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, d_em: usize) -> Self {
        Self {
            kind,
            d_em,
            d_scqc: 7,
            d_sf: 16,
            dropout: 0.5,
            scqc_layers: 2,
            sf_layers: 2,
            sf_heads: 4,
            qdqe_finetune: false,
            qdqe: None,
        }
    }

    pub fn input_width(&self) -> usize {
        self.kind.input_width(self.d_scqc, self.d_sf)
    }

    fn scqc(&self) -> ScqcConfig {
        ScqcConfig {
            d_scqc: self.d_scqc,
            layers: self.scqc_layers,
            dropout: self.dropout,
            ..ScqcConfig::new(self.d_em)
        }
    }

    fn sf(&self) -> SfConfig {
        SfConfig {
            d_sf: self.d_sf,
            layers: self.sf_layers,
            heads: self.sf_heads,
            dropout: self.dropout,
            ..SfConfig::new(self.d_em)
        }
    }
}

/// `w · x + b` over the concatenated model features.
#[derive(Clone, Copy, Debug)]
pub struct PredictionHead {
    w: ParamId,
    b: ParamId,
    width: usize,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform("head.w", &[width], width, rng),
            b: store.add("head.b", Tensor::scalar(0.0)),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        if tape.shape(x) != [self.width] {
            return Err(Error::shape("prediction head", tape.shape(x), &[self.width]));
        }
        let d = tape.dot(x, p.var(self.w))?;
        tape.add(d, p.var(self.b))
    }
}

/// Head weights as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::shape("linear head", &[x.len()], &[self.weights.len()]));
        }
        Ok(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }
}

/// Raw per-question inputs: unnormalised EDF and GloVe component embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub edf: [f64; EDF_LEN],
    pub re: ComponentEmbeddings,
}

/// Inputs after normalisation and, for a frozen contrastive encoder, after
/// re-encoding the component embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub edf: Tensor,
    pub re: Tensor,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub prediction: Var,
    pub co: Option<Var>,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct RatingModel {
    config: ModelConfig,
    store: ParamStore,
    stats: FeatureStats,
    scqc: Option<Scqc>,
    sf: Option<SfEncoder>,
    qdqe: Option<Encoder>,
    head: PredictionHead,
}

impl RatingModel {
    /// A freshly initialised model. DeepQR copies the parameters of the
    /// supplied contrastive encoder.
    pub fn new(config: ModelConfig, qdqe: Option<&QdqeEncoder>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", config.dropout)));
        }
        let mut store = ParamStore::new();
        let kind = config.kind;
        let mut config = config;
        let qdqe_encoder = if kind == ModelKind::DeepQr {
            let trained = qdqe.ok_or_else(|| {
                Error::Config("the deepqr model needs a trained QDQE encoder; run qdqe-pretrain first".into())
            })?;
            if trained.config().d != config.d_em {
                return Err(Error::Config(format!(
                    "QDQE encoder width {} does not match embedding width {}",
                    trained.config().d,
                    config.d_em
                )));
            }
            config.qdqe = Some(trained.config().clone());
            let enc = QdqeEncoder::register(&mut store, trained.config(), &mut rng)?;
            copy_by_name(&mut store, trained.store())?;
            if !config.qdqe_finetune {
                for id in enc.param_ids() {
                    store.set_trainable(id, false);
                }
            }
            Some(enc)
        } else {
            None
        };
        let scqc = kind
            .uses_scqc()
            .then(|| Scqc::new(&mut store, "scqc", config.scqc(), &mut rng))
            .transpose()?;
        let sf = kind
            .uses_sf()
            .then(|| SfEncoder::new(&mut store, "sf", config.sf(), &mut rng))
            .transpose()?;
        let head = PredictionHead::new(&mut store, config.input_width(), &mut rng);
        Ok(Self {
            stats: FeatureStats {
                mean: vec![0.0; EDF_LEN],
                std: vec![1.0; EDF_LEN],
            },
            config,
            store,
            scqc,
            sf,
            qdqe: qdqe_encoder,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: FeatureStats) -> Result<()> {
        if stats.mean.len() != EDF_LEN || stats.std.len() != EDF_LEN {
            return Err(Error::Validation("feature statistics must have 18 entries".into()));
        }
        self.stats = stats;
        Ok(())
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    pub fn scqc(&self) -> Option<&Scqc> {
        self.scqc.as_ref()
    }

    pub fn sf(&self) -> Option<&SfEncoder> {
        self.sf.as_ref()
    }

    pub fn head_weights(&self) -> LinearHead {
        LinearHead {
            weights: self.store.value(self.head.w).data().to_vec(),
            bias: self.store.value(self.head.b).item(),
        }
    }

    pub fn set_head(&mut self, head: &LinearHead) -> Result<()> {
        if head.weights.len() != self.head.width {
            return Err(Error::shape("set_head", &[head.weights.len()], &[self.head.width]));
        }
        self.store.value_mut(self.head.w).data_mut().copy_from_slice(&head.weights);
        self.store.value_mut(self.head.b).data_mut()[0] = head.bias;
        Ok(())
    }

    fn frozen_encoder(&self) -> Option<&Encoder> {
        self.qdqe.as_ref().filter(|_| !self.config.qdqe_finetune)
    }

    fn trained_encoder(&self) -> Option<&Encoder> {
        self.qdqe.as_ref().filter(|_| self.config.qdqe_finetune)
    }

    pub fn prepare(&self, input: &ModelInput) -> Result<PreparedInput> {
        if input.re.dim() != self.config.d_em && self.kind().uses_embeddings() {
            return Err(Error::shape("model input", input.re.tensor().shape(), &[7, self.config.d_em]));
        }
        let re = match self.frozen_encoder() {
            Some(enc) => {
                let mut tape = Tape::new();
                let p = tape.bind_frozen(&self.store);
                let x = tape.constant(input.re.tensor().clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let m = enc.forward(&mut tape, &p, x, false, &mut rng)?;
                tape.value(m).clone()
            }
            None => input.re.tensor().clone(),
        };
        Ok(PreparedInput {
            edf: Tensor::vector(self.stats.normalize(&input.edf).to_vec()),
            re,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        input: &PreparedInput,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let mut parts = Vec::with_capacity(3);
        if self.kind().uses_edf() {
            parts.push(tape.constant(input.edf.clone()));
        }
        let mut co = None;
        if self.kind().uses_embeddings() {
            let mut re = tape.constant(input.re.clone());
            if let Some(enc) = self.trained_encoder() {
                re = enc.forward(tape, p, re, training, rng)?;
            }
            if let Some(scqc) = &self.scqc {
                let out = scqc.forward(tape, p, re, training, rng)?;
                co = Some(out.co);
                parts.push(out.feature);
            }
            if let Some(sf) = &self.sf {
                parts.push(sf.forward(tape, p, re, training, rng)?);
            }
        }
        let features = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        let prediction = self.head.forward(tape, p, features)?;
        Ok(ForwardVars {
            prediction,
            co,
            features,
        })
    }

    /// Evaluation-mode prediction for an already prepared input.
    pub fn predict_prepared(&self, input: &PreparedInput) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, input, false, &mut rng)?;
        Ok(tape.value(out.prediction).item())
    }

    pub fn predict(&self, input: &ModelInput) -> Result<f64> {
        self.predict_prepared(&self.prepare(input)?)
    }

    /// Concatenated head input in evaluation mode.
    pub fn features(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let prepared = self.prepare(input)?;
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, &prepared, false, &mut rng)?;
        Ok(tape.value(out.features).data().to_vec())
    }

    /// The 7×7 correlation attention of a question, for models with SCQC.
    pub fn attention(&self, input: &ModelInput) -> Result<Option<Tensor>> {
        if self.scqc.is_none() {
            return Ok(None);
        }
        let prepared = self.prepare(input)?;
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, &prepared, false, &mut rng)?;
        Ok(out.co.map(|co| tape.value(co).clone()))
    }

    /// Component embeddings as fed to SCQC and SF.
    pub fn component_embeddings(&self, input: &ModelInput) -> Result<ComponentEmbeddings> {
        let prepared = self.prepare(input)?;
        match self.trained_encoder() {
            Some(enc) => {
                let mut tape = Tape::new();
                let p = tape.bind_frozen(&self.store);
                let x = tape.constant(prepared.re);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let m = enc.forward(&mut tape, &p, x, false, &mut rng)?;
                ComponentEmbeddings::new(tape.value(m).clone())
            }
            None => ComponentEmbeddings::new(prepared.re),
        }
    }
}

/// Overwrite parameters of `dst` with the same-named parameters of `src`.
pub(crate) fn copy_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for p in src.iter() {
        let id = dst
            .find(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
        if dst.value(id).shape() != p.value.shape() {
            return Err(Error::shape(
                "parameter copy",
                p.value.shape(),
                dst.value(id).shape(),
            ));
        }
        *dst.value_mut(id) = p.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    fn input(d: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edf = [0.0; EDF_LEN];
        for v in &mut edf {
            *v = rng.random_range(-2.0..2.0);
        }
        ModelInput {
            edf,
            re: ComponentEmbeddings::new(Tensor::uniform(&[7, d], 1.0, &mut rng)).unwrap(),
        }
    }

    fn encoder(d: usize) -> QdqeEncoder {
        QdqeEncoder::new(QdqeConfig::new(d), &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
    }

    fn model(kind: ModelKind, d: usize) -> RatingModel {
        let enc = encoder(d);
        RatingModel::new(ModelConfig::new(kind, d), Some(&enc), 1).unwrap()
    }

    #[test]
    fn kinds_round_trip_and_widths() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("deep-qr".parse::<ModelKind>().is_err());
        let w: Vec<usize> = ModelKind::ALL.iter().map(|k| k.input_width(7, 16)).collect();
        assert_eq!(w, vec![18, 25, 16, 41, 41]);
        for k in ModelKind::ALL {
            assert_eq!(model(k, 8).head().width(), k.input_width(7, 16));
        }
    }

    #[test]
    fn deepqr_needs_encoder() {
        let err = RatingModel::new(ModelConfig::new(ModelKind::DeepQr, 8), None, 1).unwrap_err();
        assert!(err.to_string().contains("qdqe-pretrain"));
    }

    #[test]
    fn head_examples() {
        let mut m = model(ModelKind::EdfSolo, 8);
        m.set_head(&LinearHead {
            weights: vec![0.0; 18],
            bias: 2.5,
        })
        .unwrap();
        assert_eq!(m.predict(&input(8, 1)).unwrap(), 2.5);
        let mut w = vec![0.0; 18];
        w[0] = 1.0;
        m.set_head(&LinearHead { weights: w, bias: 0.0 }).unwrap();
        let mut x = input(8, 2);
        x.edf[0] = 0.4;
        assert_eq!(m.predict(&x).unwrap(), 0.4);
        assert!(m.set_head(&LinearHead { weights: vec![0.0; 17], bias: 0.0 }).is_err());
        assert!(m.head_weights().predict(&[0.0; 19]).is_err());
    }

    #[test]
    fn reduction_to_edf_solo() {
        let solo = model(ModelKind::EdfSolo, 8);
        let prefix = solo.head_weights();
        for kind in [ModelKind::EdfEnriched, ModelKind::Combined, ModelKind::DeepQr] {
            let mut m = model(kind, 8);
            let mut w = vec![0.0; m.head().width()];
            w[..18].copy_from_slice(&prefix.weights);
            m.set_head(&LinearHead { weights: w, bias: prefix.bias }).unwrap();
            for s in 0..5 {
                let x = input(8, s);
                assert_eq!(m.predict(&x).unwrap(), solo.predict(&x).unwrap(), "{kind}");
            }
        }
    }

    #[test]
    fn deterministic_in_eval_mode() {
        for k in ModelKind::ALL {
            let m = model(k, 8);
            let x = input(8, 3);
            assert_eq!(m.predict(&x).unwrap().to_bits(), m.predict(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn deepqr_is_combined_on_encoded_embeddings() {
        let enc = encoder(8);
        let deep = RatingModel::new(ModelConfig::new(ModelKind::DeepQr, 8), Some(&enc), 4).unwrap();
        let mut combined = RatingModel::new(ModelConfig::new(ModelKind::Combined, 8), None, 4).unwrap();
        // share every non-encoder parameter
        for p in deep.store().iter().filter(|p| !p.name.starts_with("qdqe")) {
            let id = combined.store().find(&p.name).unwrap();
            *combined.store_mut().value_mut(id) = p.value.clone();
        }
        let x = input(8, 5);
        let encoded = ModelInput {
            edf: x.edf,
            re: enc.component_embeddings(&x.re).unwrap(),
        };
        assert_eq!(deep.predict(&x).unwrap(), combined.predict(&encoded).unwrap());
        assert_eq!(deep.component_embeddings(&x).unwrap(), encoded.re);
    }

    #[test]
    fn attention_export() {
        let m = model(ModelKind::Combined, 8);
        let co = m.attention(&input(8, 1)).unwrap().unwrap();
        assert_eq!(co.shape(), &[7, 7]);
        assert!(model(ModelKind::Sf, 8).attention(&input(8, 1)).unwrap().is_none());
    }

    #[test]
    fn frozen_encoder_is_not_trained() {
        let m = model(ModelKind::DeepQr, 8);
        let frozen = m.store().iter().filter(|p| !p.trainable).count();
        assert!(frozen > 0);
        assert!(m.store().iter().filter(|p| !p.trainable).all(|p| p.name.starts_with("qdqe")));
        let mut cfg = ModelConfig::new(ModelKind::DeepQr, 8);
        cfg.qdqe_finetune = true;
        let tuned = RatingModel::new(cfg, Some(&encoder(8)), 1).unwrap();
        assert!(tuned.store().iter().all(|p| p.trainable));
        let x = input(8, 6);
        assert_eq!(tuned.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn combined_and_finetuned_gradients() {
        for (kind, finetune) in [(ModelKind::Combined, false), (ModelKind::DeepQr, true), (ModelKind::EdfEnriched, false)] {
            let mut cfg = ModelConfig::new(kind, 4);
            cfg.qdqe_finetune = finetune;
            let enc = QdqeEncoder::new(QdqeConfig::new(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let mut m = RatingModel::new(cfg, Some(&enc), 3).unwrap();
            let prepared = m.prepare(&input(4, 7)).unwrap();
            let model = m.clone();
            let report = check_gradients(m.store_mut(), 1e-5, |tape, p| {
                let mut drop = ChaCha8Rng::seed_from_u64(1);
                let out = model.forward(tape, p, &prepared, true, &mut drop)?;
                let target = tape.constant(Tensor::scalar(3.0));
                let e = tape.sub(out.prediction, target)?;
                Ok(tape.square(e))
            })
            .unwrap();
            assert!(report.passes(1e-3), "{kind}: {report:?}");
        }
    }
}
