//! Post-norm transformer encoder layer shared by the SCQC, SF and QDQE
//! encoders.
//!
//! `y1 = LN(x + drop(MultiHead(x)))`, `out = LN(y1 + drop(FF(y1)))` with
//! `FF(y) = relu(y W1 + b1) W2 + b2`. Attention scores are scaled by
//! `1/sqrt(width)` regardless of the head count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub width: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Project the concatenated heads through a `width × width` matrix.
    pub output_projection: bool,
    pub dropout: f64,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    config: LayerConfig,
    heads: Vec<Head>,
    wo: Option<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Output of one layer plus the per-head attention weights.
pub struct LayerOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl EncoderLayer {
    /// Register the layer's parameters under `prefix` in `store`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: LayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, dh, ff) = (config.width, config.head_width(), config.d_ff);
        let heads = (0..config.heads)
            .map(|j| Head {
                wq: store.add_uniform(format!("{prefix}.head{j}.wq"), &[d, dh], d, rng),
                wk: store.add_uniform(format!("{prefix}.head{j}.wk"), &[d, dh], d, rng),
                wv: store.add_uniform(format!("{prefix}.head{j}.wv"), &[d, dh], d, rng),
            })
            .collect();
        let wo = config
            .output_projection
            .then(|| store.add_uniform(format!("{prefix}.wo"), &[d, d], d, rng));
        let w1 = store.add_uniform(format!("{prefix}.ff.w1"), &[d, ff], d, rng);
        let b1 = store.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[ff]));
        let w2 = store.add_uniform(format!("{prefix}.ff.w2"), &[ff, d], ff, rng);
        let b2 = store.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
        let ln1 = (
            store.add(format!("{prefix}.ln1.gain"), Tensor::filled(&[d], 1.0)),
            store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d])),
        );
        let ln2 = (
            store.add(format!("{prefix}.ln2.gain"), Tensor::filled(&[d], 1.0)),
            store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d])),
        );
        Ok(Self {
            config,
            heads,
            wo,
            w1,
            b1,
            w2,
            b2,
            ln1,
            ln2,
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    /// Every parameter id owned by the layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for h in &self.heads {
            ids.extend([h.wq, h.wk, h.wv]);
        }
        ids.extend(self.wo);
        ids.extend([self.w1, self.b1, self.w2, self.b2, self.ln1.0, self.ln1.1, self.ln2.0, self.ln2.1]);
        ids
    }

    /// Multi-head self-attention without the residual path.
    pub fn attention(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<LayerOutput> {
        let width = tape.shape(x).get(1).copied().unwrap_or(0);
        if tape.shape(x).len() != 2 || width != self.config.width {
            return Err(Error::shape("encoder layer", tape.shape(x), &[0, self.config.width]));
        }
        let scale = 1.0 / (self.config.width as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = tape.matmul(x, p.var(h.wq))?;
            let k = tape.matmul(x, p.var(h.wk))?;
            let v = tape.matmul(x, p.var(h.wv))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(a, v)?);
            weights.push(a);
        }
        let mut out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        if let Some(wo) = self.wo {
            out = tape.matmul(out, p.var(wo))?;
        }
        Ok(LayerOutput {
            out,
            attention: weights,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<LayerOutput> {
        let att = self.attention(tape, p, x)?;
        let a = tape.dropout(att.out, self.config.dropout, training, rng)?;
        let r1 = tape.add(x, a)?;
        let y1 = tape.layer_norm(r1, p.var(self.ln1.0), p.var(self.ln1.1))?;

        let h = tape.matmul(y1, p.var(self.w1))?;
        let h = tape.add_row(h, p.var(self.b1))?;
        let h = tape.relu(h);
        let f = tape.matmul(h, p.var(self.w2))?;
        let f = tape.add_row(f, p.var(self.b2))?;
        let f = tape.dropout(f, self.config.dropout, training, rng)?;
        let r2 = tape.add(y1, f)?;
        let out = tape.layer_norm(r2, p.var(self.ln2.0), p.var(self.ln2.1))?;
        Ok(LayerOutput {
            out,
            attention: att.attention,
        })
    }
}

/// A stack of identical encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: LayerConfig,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.layer{i}"), config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(EncoderLayer::param_ids).collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        mut x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, p, x, training, rng)?.out;
        }
        Ok(x)
    }
}

#[cfg(test)]
pub(crate) mod reference {
    //! Straight-line re-implementation used as an oracle in tests.

    pub type Mat = Vec<Vec<f64>>;

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn transpose(a: &Mat) -> Mat {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn softmax_rows(a: &Mat) -> Mat {
        a.iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                r.iter()
                    .enumerate()
                    .map(|(j, x)| g[j] * (x - mu) / s + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
        a.iter()
            .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub struct LayerWeights {
        pub wq: Vec<Mat>,
        pub wk: Vec<Mat>,
        pub wv: Vec<Mat>,
        pub wo: Option<Mat>,
        pub w1: Mat,
        pub b1: Vec<f64>,
        pub w2: Mat,
        pub b2: Vec<f64>,
        pub ln1: (Vec<f64>, Vec<f64>),
        pub ln2: (Vec<f64>, Vec<f64>),
    }

    pub fn multi_head(x: &Mat, w: &LayerWeights) -> Mat {
        let d = x[0].len() as f64;
        let mut heads: Vec<Mat> = Vec::new();
        for j in 0..w.wq.len() {
            let q = matmul(x, &w.wq[j]);
            let k = matmul(x, &w.wk[j]);
            let v = matmul(x, &w.wv[j]);
            let s: Mat = matmul(&q, &transpose(&k))
                .into_iter()
                .map(|r| r.into_iter().map(|v| v / d.sqrt()).collect())
                .collect();
            heads.push(matmul(&softmax_rows(&s), &v));
        }
        let cat: Mat = (0..x.len())
            .map(|i| heads.iter().flat_map(|h| h[i].clone()).collect())
            .collect();
        match &w.wo {
            Some(wo) => matmul(&cat, wo),
            None => cat,
        }
    }

    pub fn layer(x: &Mat, w: &LayerWeights) -> Mat {
        let y1 = layer_norm(&add(x, &multi_head(x, w)), &w.ln1.0, &w.ln1.1);
        let h: Mat = add_row(&matmul(&y1, &w.w1), &w.b1)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = add_row(&matmul(&h, &w.w2), &w.b2);
        layer_norm(&add(&y1, &f), &w.ln2.0, &w.ln2.1)
    }
}
