//! Semantic features: a multi-head transformer over the seven component
//! embeddings, averaged over positions and projected.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embeddings::ComponentEmbeddings;
use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{Encoder, LayerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfConfig {
    /// Model width; equal to the (padded) embedding width.
    pub d_tr: usize,
    pub d_sf: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl SfConfig {
    pub fn new(d_tr: usize) -> Self {
        Self {
            d_tr,
            d_sf: 16,
            layers: 2,
            heads: 4,
            dropout: 0.5,
        }
    }

    pub(crate) fn layer(&self) -> LayerConfig {
        LayerConfig {
            width: self.d_tr,
            heads: self.heads,
            d_ff: 4 * self.d_tr,
            output_projection: true,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SfEncoder {
    config: SfConfig,
    encoder: Encoder,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl SfEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: SfConfig, rng: &mut R) -> Result<Self> {
        if config.d_sf == 0 {
            return Err(Error::Config("d_sf must be positive".into()));
        }
        let encoder = Encoder::new(store, &format!("{prefix}.encoder"), config.layer(), config.layers, rng)?;
        let d = config.d_tr;
        let proj_w = store.add_uniform(format!("{prefix}.proj.w"), &[d, config.d_sf], d, rng);
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[config.d_sf]));
        Ok(Self {
            config,
            encoder,
            proj_w,
            proj_b,
        })
    }

    pub fn config(&self) -> &SfConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        re: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let encoded = self.encoder.forward(tape, p, re, training, rng)?;
        let pooled = tape.mean_rows(encoded)?;
        tape.linear_vec(pooled, p.var(self.proj_w), p.var(self.proj_b))
    }

    pub fn evaluate(&self, store: &ParamStore, re: &ComponentEmbeddings) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(store);
        let x = tape.constant(re.tensor().clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, x, false, &mut rng)?;
        Ok(tape.value(out).data().to_vec())
    }
}
