//! Correlation between question components: a 7×7 attention matrix over
//! the component embeddings, encoded by a small transformer and reduced to
//! a feature vector.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embeddings::ComponentEmbeddings;
use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{Encoder, LayerConfig};

/// Number of question components, which is also the encoder width.
pub const COMPONENTS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScqcConfig {
    pub d_em: usize,
    pub d_scqc: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl ScqcConfig {
    pub fn new(d_em: usize) -> Self {
        Self {
            d_em,
            d_scqc: COMPONENTS,
            layers: 2,
            d_ff: 4 * COMPONENTS,
            dropout: 0.5,
        }
    }

    fn layer(&self) -> LayerConfig {
        LayerConfig {
            width: COMPONENTS,
            heads: 1,
            d_ff: self.d_ff,
            output_projection: false,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scqc {
    config: ScqcConfig,
    w: ParamId,
    encoder: Encoder,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Tape handles produced by [`Scqc::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ScqcVars {
    pub co: Var,
    pub feature: Var,
}

/// Plain values of one SCQC evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScqcOutput {
    pub co_matrix: Tensor,
    pub feature: Vec<f64>,
}

/// `softmax_rows(Re · W · Reᵀ)`.
pub fn correlation_attention(tape: &mut Tape, re: Var, w: Var) -> Result<Var> {
    let (re_shape, w_shape) = (tape.shape(re).to_vec(), tape.shape(w).to_vec());
    if re_shape.len() != 2 || w_shape.len() != 2 || w_shape[0] != re_shape[1] || w_shape[1] != re_shape[1] {
        return Err(Error::shape("correlation_attention", &re_shape, &w_shape));
    }
    let rw = tape.matmul(re, w)?;
    let ret = tape.transpose(re)?;
    let scores = tape.matmul(rw, ret)?;
    tape.softmax_rows(scores)
}

impl Scqc {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: ScqcConfig, rng: &mut R) -> Result<Self> {
        if config.d_em == 0 || config.d_scqc == 0 || config.layers == 0 {
            return Err(Error::Config(format!("invalid SCQC configuration {config:?}")));
        }
        let d = config.d_em;
        let w = store.add_uniform(format!("{prefix}.w"), &[d, d], d, rng);
        let encoder = Encoder::new(store, &format!("{prefix}.encoder"), config.layer(), config.layers, rng)?;
        let proj_w = store.add_uniform(format!("{prefix}.proj.w"), &[COMPONENTS, config.d_scqc], COMPONENTS, rng);
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[config.d_scqc]));
        Ok(Self {
            config,
            w,
            encoder,
            proj_w,
            proj_b,
        })
    }

    pub fn config(&self) -> &ScqcConfig {
        &self.config
    }

    pub fn w(&self) -> ParamId {
        self.w
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    /// `re` is a `7 × d_em` matrix on the tape.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        re: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ScqcVars> {
        let co = correlation_attention(tape, re, p.var(self.w))?;
        let encoded = self.encoder.forward(tape, p, co, training, rng)?;
        let per_component = tape.mean_cols(encoded)?;
        let feature = tape.linear_vec(per_component, p.var(self.proj_w), p.var(self.proj_b))?;
        Ok(ScqcVars { co, feature })
    }

    /// Evaluation-mode forward pass outside of training.
    pub fn evaluate(&self, store: &ParamStore, re: &ComponentEmbeddings) -> Result<ScqcOutput> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(store);
        let x = tape.constant(re.tensor().clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, x, false, &mut rng)?;
        Ok(ScqcOutput {
            co_matrix: tape.value(out.co).clone(),
            feature: tape.value(out.feature).data().to_vec(),
        })
    }
}
