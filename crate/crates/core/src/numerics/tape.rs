//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in exact reverse order and accumulates gradients, so a
//! value consumed by several ops (residual fan-out) receives the sum of
//! their contributions. Parameters enter the tape as memoized leaves and
//! their gradients are flushed into the owning `ParamStore` at the end.

use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(u64, ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Transpose(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    Gather { src: Var, idx: Vec<usize> },
    Embedding { table: Var, idx: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A tape also carries the multiply-accumulate counter for the work it
/// recorded. Tapes are single-context objects; independent tapes may be used
/// from different threads.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<(u64, ParamId), Var>,
    macs: u64,
    activation_floats: u64,
    profiling: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("kernel produced consistent shape")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            macs: 0,
            activation_floats: 0,
            profiling: true,
        }
    }

    /// Enable or disable MAC counting for subsequently recorded matmuls.
    pub fn set_profiling(&mut self, on: bool) {
        self.profiling = on;
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Floats held by non-leaf nodes, i.e. activations retained for backward.
    pub fn activation_floats(&self) -> u64 {
        self.activation_floats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf | Op::Param(..)) {
            self.activation_floats += value.numel() as u64;
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_leaves.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(key.0, id), p.requires_grad);
        self.param_leaves.insert(key, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = dims(self.value(a));
        let (p2, q) = dims(self.value(b));
        if p != p2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * q];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, p, q);
        if self.profiling {
            self.macs += (m * p * q) as u64;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(m, q, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// `a[m x n] + b[1 x n]`, broadcasting `b` over the leading dimension.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let (br, bn) = dims(self.value(b));
        if br != 1 || bn != n {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> =
            self.value(a).data().chunks(n).flat_map(|r| r.iter().zip(bd).map(|(x, y)| x + y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(m, n, out), Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn check_scalar(&self, s: Var, what: &str) -> Result<()> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!("{what} expects a scalar, got {:?}", self.value(s).shape())));
        }
        Ok(())
    }

    /// `a * s` for a scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar(s, "scale_by")?;
        let c = self.scalar(s);
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// `a / s` for a scalar node `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar(s, "div_by")?;
        let c = self.scalar(s);
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x / c).collect())?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::DivBy(a, s), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::Numeric(format!("softmax input contains NaN/Inf ({:?})", t.shape())));
        }
        let (m, n) = dims(t);
        let mut out = Vec::with_capacity(m * n);
        for r in t.data().chunks(n) {
            softmax_into(r, &mut out);
        }
        let rg = self.rg(a);
        Ok(self.push(mat(m, n, out), Op::Softmax(a), rg))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        for v in [gain, bias] {
            if dims(self.value(v)) != (1, n) {
                return Err(Error::shape(format!(
                    "layer_norm affine {:?} for input {:?}",
                    self.value(v).shape(),
                    self.value(x).shape()
                )));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in self.value(x).data().chunks(n) {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in r.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(mat(m, n, out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = dims(t);
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for {b} rows of logits", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Label(format!("target {bad} out of range for {c} classes")));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("cross_entropy logits contain NaN/Inf".into()));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = dims(t);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(mat(n, m, out), Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(src));
        if len == 0 || start + len > m {
            return Err(Error::shape(format!("slice_rows {start}..{} of {m} rows", start + len)));
        }
        let out = self.value(src).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(src);
        Ok(self.push(mat(len, n, out), Op::SliceRows { src, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::shape(format!("concat_rows width {} vs {n}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(mat(rows, n, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(mat(m, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column means: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims(self.value(a));
        let mut out = vec![0.0; n];
        for r in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(a);
        self.push(mat(1, n, out), Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Select columns of a `1 x n` row.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rows() != 1 {
            return Err(Error::shape(format!("gather expects a row, got {:?}", t.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.cols()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", t.cols())));
        }
        let out: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(mat(1, idx.len(), out), Op::Gather { src, idx: idx.to_vec() }, rg))
    }

    /// Rows of `table` selected by `idx`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = dims(t);
        if idx.is_empty() {
            return Err(Error::shape("embedding of an empty sequence"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!("embedding index {bad} out of {v}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(mat(idx.len(), d, out), Op::Embedding { table, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar `loss`, accumulating into `store` grads.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        match &node.op {
            Op::Leaf => {}
            // leaves from another store get no gradient here
            Op::Param(uid, id) => {
                if *uid == store.uid() {
                    store.accumulate_grad(*id, g)
                }
            }
            Op::MatMul(a, b) => {
                let (m, p) = dims(self.value(*a));
                let q = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_bt_acc(g, self.value(*b).data(), ga, m, p, q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(self.value(*a).data(), g, gb, m, p, q);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = self.value(*b).cols();
                if let Some(gb) = self.acc(grads, *b) {
                    for r in g.chunks(n) {
                        gb.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum::<f64>();
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::DivBy(a, s) => {
                let c = self.scalar(*s);
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] -= g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum::<f64>() / (c * c);
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y / c);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), &xi) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi / ai;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gi * xi;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for (((gr, xr), out), rs) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).zip(rstd) {
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for ((o, d), xi) in out.iter_mut().zip(&dxh).zip(xr) {
                            *o += rs / nf * (nf * d - sum_d - xi * sum_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let b = targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((out, pr), &y) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        for (j, (o, p)) in out.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            *o += g[0] * (p - onehot) / b;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let n = node.value.cols();
                if let Some(gs) = self.acc(grads, *src) {
                    let off = start * n;
                    gs[off..off + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let (m, w) = dims(self.value(p));
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..m {
                            let src = &g[r * total + col..r * total + col + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                    col += w;
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for r in ga.chunks_mut(n) {
                        r.iter_mut().zip(g).for_each(|(o, v)| *o += v / m as f64);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Gather { src, idx } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for (&i, v) in idx.iter().zip(g) {
                        gs[i] += v;
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let d = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (&i, r) in idx.iter().zip(g.chunks(d)) {
                        gt[i * d..(i + 1) * d].iter_mut().zip(r).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
        }
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
