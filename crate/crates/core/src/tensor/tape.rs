use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    MeanRows(Var),
    MeanCols(Var),
    Dropout(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    AddN(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    Square(Var),
    Cosine(Var, Var),
    Softplus(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Parameter handles bound onto a particular tape.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Wengert list of recorded operations. Node order is a topological order,
/// so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Sign of every ReLU input recorded so far, in tape order. Two
    /// evaluations on the same smooth piece of the function share it.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked on the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind every parameter of `store`. Frozen parameters become constants.
    pub fn bind(&mut self, store: &ParamStore) -> Bindings {
        let vars = store
            .ids()
            .map(|id| {
                let p = store.get(id);
                if p.trainable {
                    self.push(p.value.clone(), Op::Param(id), true)
                } else {
                    self.constant(p.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Bind every parameter as a constant (inference).
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Bindings {
        let vars = store
            .iter()
            .map(|p| self.constant(p.value.clone()))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.expect_matrix("matmul")?;
        let (k2, n) = tb.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.expect_matrix("transpose")?;
        let out = transpose(ta.data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = ta.expect_matrix("add_row")?;
        let tb = self.value(bias);
        if tb.shape() != [n] {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(x, b)| x + b))
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = ta.expect_matrix("softmax_rows")?;
        if !ta.is_finite() {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                data.push(e);
            }
            for y in &mut data[start..] {
                *y /= sum;
            }
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Per-row standardisation followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.expect_matrix("layer_norm")?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm needs at least 2 columns, got {n}"
            )));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over rows: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.expect_matrix("mean_rows")?;
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Mean over columns: `[m×n] -> [m]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = ta.expect_matrix("mean_cols")?;
        let out = ta
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanCols(a), rg))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.expect_matrix("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} out of bounds for width {n}"
            )));
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![m, end - start], data)?,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let m = self.value(*first).expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", t.shape(), &[0]));
            }
            data.extend_from_slice(t.data());
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(Error::shape("add_n", acc.shape(), t.shape()));
            }
            for (a, v) in acc.data.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(acc, Op::AddN(parts.to_vec()), rg))
    }

    /// Inner product of two 1-D tensors, returning a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Cosine similarity of two 1-D tensors; 0 when either has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(Error::shape("cosine", ta.shape(), tb.shape()));
        }
        let v = cosine(ta.data(), tb.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Cosine(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `x[n] · w[n×k] + b[k]`.
    pub fn linear_vec(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let row = self.reshape(x, vec![1, n])?;
        let prod = self.matmul(row, w)?;
        let k = self.value(prod).cols();
        let flat = self.reshape(prod, vec![k])?;
        self.add(flat, b)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into tape
    /// nodes and into the `grad` of every bound trainable parameter.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let seed = &self.nodes[loss.0].value;
        if !seed.is_scalar() {
            return Err(Error::NonScalarLoss(seed.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut adj)?;
            }
            adj[i] = Some(g);
        }

        for (i, g) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if let Op::Param(id) = node.op {
                let p = params.get_mut(id);
                match &mut p.grad {
                    Some(acc) => add_into(acc, &g),
                    None => p.grad = Some(g.clone()),
                }
            }
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if wants(*a) {
                    accumulate(adj, *a, &matmul_nt(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(adj, *b, &matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                accumulate(adj, *a, &transpose(g, m, n));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::AddRow(a, b) => {
                accumulate(adj, *a, g);
                if wants(*b) {
                    let n = node.value.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        add_into(&mut gb, row);
                    }
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g);
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(adj, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, &elementwise(g, val(*b).data(), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(adj, *b, &elementwise(g, val(*a).data(), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(adj, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(adj, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gamma = val(*gain).data();
                if wants(*gain) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(adj, *gain, &gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks(n) {
                        add_into(&mut gb, gr);
                    }
                    accumulate(adj, *bias, &gb);
                }
                if wants(*x) {
                    let nf = n as f64;
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| r / nf * (nf * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::Relu(a) => {
                let ga = elementwise(g, val(*a).data(), |q, x| if x > 0.0 { q } else { 0.0 });
                accumulate(adj, *a, &ga);
            }
            Op::MeanRows(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(g.iter().map(|q| q / m as f64));
                }
                accumulate(adj, *a, &ga);
            }
            Op::MeanCols(a) => {
                let n = val(*a).cols();
                let ga: Vec<f64> = g
                    .iter()
                    .flat_map(|q| std::iter::repeat_n(q / n as f64, n))
                    .collect();
                accumulate(adj, *a, &ga);
            }
            Op::Dropout(a, mask) => {
                accumulate(adj, *a, &elementwise(g, mask, |q, m| q * m));
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let w = node.value.cols();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(adj, *a, &ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(adj, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).len();
                    accumulate(adj, p, &g[offset..offset + w]);
                    offset += w;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    accumulate(adj, p, g);
                }
            }
            Op::Dot(a, b) => {
                let q = g[0];
                if wants(*a) {
                    let ga: Vec<f64> = val(*b).data().iter().map(|x| x * q).collect();
                    accumulate(adj, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = val(*a).data().iter().map(|x| x * q).collect();
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                accumulate(adj, *a, &ga);
            }
            Op::Square(a) => {
                let ga = elementwise(g, val(*a).data(), |q, x| 2.0 * x * q);
                accumulate(adj, *a, &ga);
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let na = norm(xa);
                let nb = norm(xb);
                if na > 0.0 && nb > 0.0 {
                    let c = node.value.item();
                    let q = g[0];
                    if wants(*a) {
                        let ga: Vec<f64> = xa
                            .iter()
                            .zip(xb)
                            .map(|(x, y)| q * (y / (na * nb) - c * x / (na * na)))
                            .collect();
                        accumulate(adj, *a, &ga);
                    }
                    if wants(*b) {
                        let gb: Vec<f64> = xa
                            .iter()
                            .zip(xb)
                            .map(|(x, y)| q * (x / (na * nb) - c * y / (nb * nb)))
                            .collect();
                        accumulate(adj, *b, &gb);
                    }
                }
            }
            Op::Softplus(a) => {
                let ga = elementwise(g, val(*a).data(), |q, x| q * sigmoid(x));
                accumulate(adj, *a, &ga);
            }
            Op::Reshape(a) => accumulate(adj, *a, g),
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => add_into(acc, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn elementwise(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ -> [m×k]`
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n] -> [k×n]`
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut t = Tape::new();
        let i = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let out = t.matmul(i, b).unwrap();
        assert_eq!(t.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = t.constant(mat(1, 2, &[1.0, 2.0]));
        let c = t.constant(mat(2, 1, &[3.0, 4.0]));
        let out = t.matmul(a, c).unwrap();
        assert_eq!(t.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(3, 3, &[0.0, 0.0, f64::NAN, 1000.0, 1000.0, 1000.0, 0.0, 0.0, 0.0]));
        assert!(matches!(t.softmax_rows(x), Err(Error::NonFinite(_))));

        let x = t.constant(mat(1, 2, &[0.0, 0.0]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(mat(1, 3, &[1000.0, 1000.0, 1000.0]));
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t.constant(mat(1, 2, &[0.0, 3f64.ln()]));
        let y = t.softmax_rows(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::filled(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(mat(1, 3, &[5.0, 5.0, 5.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(mat(1, 2, &[1.0, 3.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        // variance 1, so the epsilon perturbation is 1/sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        let d = t.value(y).data();
        assert!((d[0] + expected).abs() < 1e-15 && (d[1] - expected).abs() < 1e-15);

        let g1 = t.constant(Tensor::filled(&[1], 1.0));
        let b1 = t.constant(Tensor::zeros(&[1]));
        let x1 = t.constant(mat(2, 1, &[1.0, 2.0]));
        assert!(t.layer_norm(x1, g1, b1).is_err());
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, -3.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s, &mut store).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn means_and_uniform_gradients() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let r = t.mean_rows(x).unwrap();
        let c = t.mean_cols(x).unwrap();
        assert_eq!(t.value(r).data(), &[2.0, 3.0]);
        assert_eq!(t.value(c).data(), &[1.5, 3.5]);
        let s = t.sum(r);
        t.backward(s, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5; 4]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[4], 3.0));
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());

        let n = 100_000;
        let x = t.constant(Tensor::filled(&[n], 1.0));
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let zeros = t.value(y).data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        assert!(t.value(y).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        t.backward(y, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        t.backward(y, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn matmul_closed_form_gradients() {
        // d sum(A·B)/dA = 1·Bᵀ, d/dB = Aᵀ·1
        let mut store = ParamStore::new();
        let a_id = store.add("a", mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b_id = store.add("b", mat(3, 2, &[1.0, -1.0, 0.5, 2.0, -3.0, 0.0]));
        let mut t = Tape::new();
        let p = t.bind(&store);
        let out = t.matmul(p.var(a_id), p.var(b_id)).unwrap();
        let s = t.sum(out);
        t.backward(s, &mut store).unwrap();
        assert_eq!(
            store.get(a_id).grad.as_deref().unwrap(),
            &[0.0, 2.5, -3.0, 0.0, 2.5, -3.0]
        );
        assert_eq!(
            store.get(b_id).grad.as_deref().unwrap(),
            &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]
        );
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 0.0]));
        let c = t.cosine(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        t.backward(c, &mut store).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(0.0), 2f64.ln());
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }
}
