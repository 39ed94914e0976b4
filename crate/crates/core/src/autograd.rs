//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients only into nodes that depend on a
//! gradient-bearing leaf. Parameters are bound by name from a [`ParamStore`]
//! and their gradients are read back by the same name.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, MatRef, Matrix};

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gelu(Var),
    Square(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::dim(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_row_in_place(out.row_mut(r));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters whose name starts with `prefix` bind as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds a named parameter once; later calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| shape_err("matmul", self.value(a), self.value(b)))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| shape_err(name, self.value(a), self.value(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut out = x.clone();
        let bias = r.as_slice();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies row `i` of `a` by the constant `scales[i]`.
    pub fn row_scale(&mut self, a: Var, scales: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if scales.len() != x.rows() {
            return Err(Error::dim(format!(
                "row_scale: {} scales for {} rows",
                scales.len(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        for (i, s) in scales.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::RowScale(a, scales), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != n {
                return Err(shape_err("layer_norm", xv, pv));
            }
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut out = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` stacks `batch` sequences of `seq` rows each; its columns are the
    /// query, key and value projections side by side (`3·d`). Returns the
    /// concatenated head outputs, `batch·seq × d`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(qkv);
        if seq == 0 || x.rows() % seq != 0 || x.cols() % 3 != 0 || heads == 0 {
            return Err(Error::dim(format!(
                "attention: qkv {}x{} does not split into sequences of {seq} with 3 projections",
                x.rows(),
                x.cols()
            )));
        }
        let d = x.cols() / 3;
        if d % heads != 0 {
            return Err(Error::dim(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let batch = x.rows() / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = x.as_slice();
        let ld = 3 * d;
        let tt = seq * seq;
        let mut probs = vec![0.0; batch * heads * tt];
        let mut out = Matrix::zeros(x.rows(), d);
        for b in 0..batch {
            let base = b * seq * ld;
            for h in 0..heads {
                let q = MatRef::new(&data[base + h * dh..], ld, 1);
                let k = MatRef::new(&data[base + d + h * dh..], ld, 1);
                let v = MatRef::new(&data[base + 2 * d + h * dh..], ld, 1);
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                gemm(seq, dh, seq, q, k.t(), p, seq, 0.0);
                for r in 0..seq {
                    let row = &mut p[r * seq..(r + 1) * seq];
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_row_in_place(row);
                }
                let o = &mut out.as_mut_slice()[b * seq * d + h * dh..];
                gemm(seq, seq, dh, MatRef::new(p, seq, 1), v, o, d, 0.0);
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.value(a).gather_rows(&idx)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts), ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Input(format!(
                "class target {t} out of range for {} logits",
                lv.cols()
            )));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let probs = softmax_rows(lv);
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// `x·W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.weight"))?;
        let b = self.param(store, &format!("{prefix}.bias"))?;
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn layer_norm_named(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(store, &format!("{prefix}.weight"))?;
        let b = self.param(store, &format!("{prefix}.bias"))?;
        self.layer_norm(x, g, b)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        if self.ng(loss) {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, dy, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    let bt = MatRef::new(bv.as_slice(), n, 1).t();
                    gemm(m, n, k, MatRef::new(dy.as_slice(), n, 1), bt, &mut da, k, 0.0);
                    self.accumulate(grads, *a, Matrix::from_vec(m, k, da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    let at = MatRef::new(av.as_slice(), k, 1).t();
                    gemm(k, m, n, at, MatRef::new(dy.as_slice(), n, 1), &mut db, n, 0.0);
                    self.accumulate(grads, *b, Matrix::from_vec(k, n, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, dy.clone());
                self.accumulate(grads, *a, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, dy.map(|v| -v));
                self.accumulate(grads, *a, dy);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = dy.zip_map(self.value(*b), |d, y| d * y).unwrap();
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = dy.zip_map(self.value(*a), |d, x| d * x).unwrap();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    let mut g = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (s, d) in g.as_mut_slice().iter_mut().zip(dy.row(r)) {
                            *s += d;
                        }
                    }
                    self.accumulate(grads, *row, g);
                }
                self.accumulate(grads, *a, dy);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|v| v * s));
            }
            Op::RowScale(a, scales) => {
                let mut g = dy;
                for (r, s) in scales.iter().enumerate() {
                    for v in g.row_mut(r) {
                        *v *= s;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| d * gelu_grad(x)).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| 2.0 * d * x).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = dy;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(d, p)| d * p).sum();
                    for (d, p) in g.row_mut(r).iter_mut().zip(yr) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                let gv = self.value(*gamma).as_slice();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(1, n);
                    let mut db = Matrix::zeros(1, n);
                    for r in 0..dy.rows() {
                        let (d, h) = (dy.row(r), xhat.row(r));
                        for j in 0..n {
                            dg.as_mut_slice()[j] += d[j] * h[j];
                            db.as_mut_slice()[j] += d[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(dy.rows(), n);
                    let nf = n as f64;
                    for r in 0..dy.rows() {
                        let (d, h) = (dy.row(r), xhat.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = d[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        let inv = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dh = d[j] * gv[j];
                            *o = inv / nf * (nf * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let xv = self.value(*qkv);
                let d = xv.cols() / 3;
                let dh = d / heads;
                let ld = 3 * d;
                let batch = xv.rows() / seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = xv.as_slice();
                let tt = seq * seq;
                let mut dqkv = Matrix::zeros(xv.rows(), ld);
                let mut dp = vec![0.0; tt];
                for b in 0..batch {
                    let base = b * seq * ld;
                    for h in 0..heads {
                        let q = MatRef::new(&data[base + h * dh..], ld, 1);
                        let k = MatRef::new(&data[base + d + h * dh..], ld, 1);
                        let v = MatRef::new(&data[base + 2 * d + h * dh..], ld, 1);
                        let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                        let p_ref = MatRef::new(p, seq, 1);
                        let d_out = MatRef::new(&dy.as_slice()[b * seq * d + h * dh..], d, 1);
                        let out = dqkv.as_mut_slice();
                        gemm(seq, seq, dh, p_ref.t(), d_out, &mut out[base + 2 * d + h * dh..], ld, 0.0);
                        gemm(seq, dh, seq, d_out, v.t(), &mut dp, seq, 0.0);
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (g, &pv) in dr.iter_mut().zip(pr) {
                                *g = pv * (*g - dot) * scale;
                            }
                        }
                        let ds = MatRef::new(&dp, seq, 1);
                        gemm(seq, seq, dh, ds, k, &mut out[base + h * dh..], ld, 0.0);
                        gemm(seq, seq, dh, ds.t(), q, &mut out[base + d + h * dh..], ld, 0.0);
                    }
                }
                self.accumulate(grads, *qkv, dqkv);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, d) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        self.accumulate(grads, p, dy.gather_rows(&idx).unwrap());
                    }
                    start += rows;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut g = dy;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(d, v)| d * v).sum();
                    let n = norms[r];
                    for (d, v) in g.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - v * dot) / n;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = dy.item() / targets.len() as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = g.row_mut(r);
                    row[t] -= 1.0;
                    for v in row {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = Matrix::filled(av.rows(), av.cols(), dy.item() / av.len() as f64);
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), dy.item()));
            }
        }
    }

    /// Gradients of every bound, trainable parameter that received one.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.ng(v))
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Names of bound parameters, trainable or frozen.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, bool)> {
        self.bound.iter().map(move |(n, &v)| (n.as_str(), self.ng(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of d(f)/d(input) for a graph builder.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| g.input(m)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or(Matrix::zeros(m.rows(), m.cols()));
            for i in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].as_mut_slice()[i] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|m| g2.input(m)).collect();
                    let o = f(&mut g2, &vs);
                    g2.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5 || (fd - an).abs() < 1e-8, "input {k}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, r) = (random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng));
        check(vec![a, b, r], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_row(y, v[2]).unwrap();
            let y = g.gelu(y);
            let y = g.square(y);
            g.sum(y)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 5, &mut rng);
        let gamma = random(1, 5, &mut rng);
        let beta = random(1, 5, &mut rng);
        let w = random(3, 5, &mut rng);
        check(vec![x, gamma, beta, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qkv = random(6, 12, &mut rng);
        let w = random(6, 4, &mut rng);
        check(vec![qkv, w], |g, v| {
            let y = g.attention(v[0], 3, 2).unwrap();
            let y = g.mul(y, v[1]).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn gather_concat_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 3, &mut rng);
        let b = random(1, 3, &mut rng);
        let w = random(5, 3, &mut rng);
        check(vec![a, b, w], |g, v| {
            let c = g.concat_rows(vec![v[0], v[1]]).unwrap();
            let c = g.gather_rows(c, vec![3, 0, 3, 1, 2]).unwrap();
            let c = g.softmax_rows(c);
            let c = g.mul(c, v[2]).unwrap();
            let c = g.transpose(c);
            g.mean(c)
        });
    }

    #[test]
    fn l2_norm_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(3, 4, &mut rng);
        let k = random(3, 4, &mut rng);
        check(vec![q, k], |g, v| {
            let q = g.l2_normalize_rows(v[0]);
            let k = g.l2_normalize_rows(v[1]);
            let kt = g.transpose(k);
            let s = g.matmul(q, kt).unwrap();
            let s = g.scale(s, 5.0);
            let s = g.row_scale(s, vec![1.0, 0.5, 2.0]).unwrap();
            g.cross_entropy(s, vec![0, 1, 2]).unwrap()
        });
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 2, 3.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s);
        // d(x·const)/dx = const (3), not 2x (6)
        assert_eq!(grads.get(x).unwrap().as_slice(), &[3.0, 3.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new();
        store.insert("a.weight", Matrix::scalar(2.0));
        store.insert("b.weight", Matrix::scalar(3.0));
        let mut g = Graph::new();
        g.freeze_prefix("b.");
        let a = g.param(&store, "a.weight").unwrap();
        let b = g.param(&store, "b.weight").unwrap();
        assert_eq!(g.param(&store, "a.weight").unwrap(), a);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg["a.weight"].item(), 3.0);
    }
}
