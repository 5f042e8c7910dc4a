//! Reverse-mode accumulation over an explicit computation tape.
//!
//! Ops append nodes; `backward` walks them in reverse, pushing vector-
//! Jacobian products into parents. Parameters enter as leaves that copy the
//! current value, so a tape never borrows the `ParamSet` it was built from.

use std::collections::BTreeMap;

use super::{NumericsError, ParamId, ParamSet, Tensor};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBiasRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        // (mean, 1/std) per row, cached by the forward pass
        stats: Vec<(f64, f64)>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    EmbedRows {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        weights: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Tensor leaf; participates in gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf { param: None }, needs)
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Copies a parameter's current value onto the tape. After `backward`,
    /// [`Tape::accumulate_param_grads`] routes its gradient back by id.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.value(id).clone();
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::Matmul(a, b),
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = ta.data()[r * n + c];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::matrix(n, m, out).unwrap(), Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Add(a, b),
            needs,
        ))
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape().len() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += tb.data()[c];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::AddBiasRow(a, bias),
            needs,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Mul(a, b),
            needs,
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Scale(a, c), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| gelu(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Gelu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Tanh(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.exp()).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Exp(a), needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| softplus(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Softplus(a), needs)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "softmax_rows",
                shape: ta.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &ta.data()[r * n..(r + 1) * n];
            softmax_into(row, &mut out[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::SoftmaxRows(a),
            needs,
        ))
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm_rows(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "layer_norm_rows",
                shape: tx.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            stats.push((mean, rstd));
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * rstd * tg.data()[c] + tb.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                stats,
            },
            needs,
        ))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                detail: "no parts".into(),
            });
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor::matrix(rows, n, out).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "slice_rows",
                shape: tx.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        if start + len > m {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let out = tx.data()[start * n..(start + len) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(len, n, out).unwrap(),
            Op::SliceRows { x, start, len },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                detail: "no parts".into(),
            });
        }
        let m = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut out = vec![0.0; m * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for r in 0..m {
                out[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor::matrix(m, cols, out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "slice_cols",
                shape: tx.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut out = vec![0.0; m * len];
        for r in 0..m {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(m, len, out).unwrap(),
            Op::SliceCols { x, start, len },
            needs,
        ))
    }

    /// Gathers rows of an embedding table; repeated ids accumulate gradient.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "embed_rows",
                shape: tt.shape().to_vec(),
                detail: "rank-2 required".into(),
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embed_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out).unwrap(),
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    /// Weighted cross-entropy of a single logit vector against one target
    /// class: `w[target] * (logsumexp(logits) - logits[target])`.
    ///
    /// Accepts any shape; the logits are read as a flat vector.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: usize,
        weights: Option<&[f64]>,
    ) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let n = tl.numel();
        if target >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: target,
                len: n,
            });
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(NumericsError::BadClassWeights {
                    detail: format!("{} weights for {} classes", w.len(), n),
                });
            }
            if w.iter().any(|x| *x <= 0.0) {
                return Err(NumericsError::BadClassWeights {
                    detail: "weights must be positive".into(),
                });
            }
        }
        let w_t = weights.map_or(1.0, |w| w[target]);
        let lse = logsumexp(tl.data());
        let loss = w_t * (lse - tl.data()[target]);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                weights: weights.map(|w| w.to_vec()),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Fills gradients for every node that
    /// `loss` depends on (and that requires gradient).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let up = self.grads[i].take().unwrap();
            self.propagate(i, &up);
            self.grads[i] = Some(up);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, up: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let u = up[r * n + c];
                            if u != 0.0 {
                                let brow = &tb.data()[..];
                                for j in 0..k {
                                    da[r * k + j] += u * brow[j * n + c];
                                }
                            }
                        }
                    }
                    self.add_grad(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T . dC
                    let ta = &self.nodes[a.0].value;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let av = ta.data()[r * k + j];
                            if av != 0.0 {
                                for c in 0..n {
                                    db[j * n + c] += av * up[r * n + c];
                                }
                            }
                        }
                    }
                    self.add_grad(b, db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                // output is (m x n) where the parent is (n x m)
                let t = &self.nodes[i].value;
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] = up[r * n + c];
                    }
                }
                self.add_grad(a, da);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, up.to_vec());
                self.add_grad(b, up.to_vec());
            }
            Op::AddBiasRow(a, bias) => {
                let (a, bias) = (*a, *bias);
                let n = self.nodes[bias.0].value.numel();
                let m = up.len() / n;
                self.add_grad(a, up.to_vec());
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += up[r * n + c];
                        }
                    }
                    self.add_grad(bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let tb = &self.nodes[b.0].value;
                    let da: Vec<f64> = up.iter().zip(tb.data()).map(|(u, y)| u * y).collect();
                    self.add_grad(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let ta = &self.nodes[a.0].value;
                    let db: Vec<f64> = up.iter().zip(ta.data()).map(|(u, x)| u * x).collect();
                    self.add_grad(b, db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.add_grad(a, up.iter().map(|u| u * c).collect());
            }
            Op::Gelu(a) => {
                let a = *a;
                let ta = &self.nodes[a.0].value;
                let da: Vec<f64> = up
                    .iter()
                    .zip(ta.data())
                    .map(|(u, &x)| u * gelu_grad(x))
                    .collect();
                self.add_grad(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let da: Vec<f64> = up
                    .iter()
                    .zip(y.data())
                    .map(|(u, y)| u * (1.0 - y * y))
                    .collect();
                self.add_grad(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let da: Vec<f64> = up.iter().zip(y.data()).map(|(u, y)| u * y).collect();
                self.add_grad(a, da);
            }
            Op::Softplus(a) => {
                let a = *a;
                let ta = &self.nodes[a.0].value;
                let da: Vec<f64> = up
                    .iter()
                    .zip(ta.data())
                    .map(|(u, &x)| u * sigmoid(x))
                    .collect();
                self.add_grad(a, da);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let p = &y.data()[r * n..(r + 1) * n];
                    let u = &up[r * n..(r + 1) * n];
                    let dot: f64 = p.iter().zip(u).map(|(p, u)| p * u).sum();
                    for c in 0..n {
                        da[r * n + c] = p[c] * (u[c] - dot);
                    }
                }
                self.add_grad(a, da);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let stats = stats.clone();
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..m {
                    let (mean, rstd) = stats[r];
                    let row = &tx.data()[r * n..(r + 1) * n];
                    let u = &up[r * n..(r + 1) * n];
                    let mut m1 = 0.0; // mean of dy*gamma
                    let mut m2 = 0.0; // mean of dy*gamma*xhat
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let g = u[c] * tg.data()[c];
                        m1 += g;
                        m2 += g * xhat;
                        dg[c] += u[c] * xhat;
                        db[c] += u[c];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let g = u[c] * tg.data()[c];
                        dx[r * n + c] = rstd * (g - m1 - xhat * m2);
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(gamma, dg);
                self.add_grad(beta, db);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let n = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    let slice = up[offset * n..(offset + rows) * n].to_vec();
                    self.add_grad(p, slice);
                    offset += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let tx = &self.nodes[x.0].value;
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(up);
                self.add_grad(x, dx);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let t = &self.nodes[i].value;
                let (m, cols) = (t.shape()[0], t.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&up[r * cols + offset..r * cols + offset + w]);
                    }
                    self.add_grad(p, dp);
                    offset += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let tx = &self.nodes[x.0].value;
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&up[r * len..(r + 1) * len]);
                }
                self.add_grad(x, dx);
            }
            Op::EmbedRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let tt = &self.nodes[table.0].value;
                let (v, d) = (tt.shape()[0], tt.shape()[1]);
                let mut dt = vec![0.0; v * d];
                for (k, id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += up[k * d + c];
                    }
                }
                self.add_grad(table, dt);
            }
            Op::SumAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel();
                self.add_grad(a, vec![up[0]; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                weights,
            } => {
                let (logits, target) = (*logits, *target);
                let w_t = weights.as_ref().map_or(1.0, |w| w[target]);
                let tl = &self.nodes[logits.0].value;
                let mut p = vec![0.0; tl.numel()];
                softmax_into(tl.data(), &mut p);
                let u = up[0];
                let mut dl: Vec<f64> = p.iter().map(|p| u * w_t * p).collect();
                dl[target] -= u * w_t;
                self.add_grad(logits, dl);
            }
        }
    }

    /// Routes gradients of parameter leaves back into the set.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    params.get_mut(id).value.accumulate_grad(g);
                }
            }
        }
    }

    /// Gradients of parameter leaves keyed by id (summed over aliases).
    pub fn param_grads(&self) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    match out.get_mut(&id) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        None => {
                            out.insert(id, g.clone());
                        }
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for j in 0..k {
            let av = a[r * k + j];
            if av != 0.0 {
                let brow = &b[j * n..(j + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for c in 0..n {
                    orow[c] += av * brow[c];
                }
            }
        }
    }
    out
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::matrix(rows, cols, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf2(&mut tape, 2, 1, vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, vec![1.0, 2.0]);
        let b = leaf2(&mut tape, 2, 1, vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_carries_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 3, vec![0.0; 6]);
        let b = leaf2(&mut tape, 2, 2, vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transpose() {
        // d/dA sum(A.B) = ones(m,n) . B^T
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 3, vec![0.1, -0.4, 0.2, 0.9, 0.5, -0.3]);
        let b = leaf2(&mut tape, 3, 2, vec![0.3, 0.1, -0.2, 0.8, 0.7, -0.6]);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        let expect = [
            0.3 + 0.1,
            -0.2 + 0.8,
            0.7 - 0.6,
            0.3 + 0.1,
            -0.2 + 0.8,
            0.7 - 0.6,
        ];
        for (g, e) in tape.grad(a).unwrap().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]).with_grad());
        let loss = tape.softmax_cross_entropy(logits, 0, None).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_weight_scales_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]).with_grad());
        let loss = tape
            .softmax_cross_entropy(logits, 0, Some(&[0.15, 0.85]))
            .unwrap();
        assert!((tape.value(loss).data()[0] - 0.15 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let err = tape.softmax_cross_entropy(logits, 5, None).unwrap_err();
        assert!(matches!(err, NumericsError::IndexOutOfRange { .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 1, vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(a),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, vec![1.0, 2.0]);
        let mask = tape.constant(Tensor::matrix(1, 2, vec![0.0, -1e9]).unwrap());
        let sum = tape.add(a, mask).unwrap();
        let s = tape.sum_all(sum);
        tape.backward(s).unwrap();
        assert!(tape.grad(mask).is_none());
        assert!(tape.grad(a).is_some());
    }

    #[test]
    fn shared_param_leaf_accumulates_both_uses() {
        // y = p*p contributes twice to dp
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&ps, id);
        let y = tape.mul(p, p).unwrap();
        tape.backward(y).unwrap();
        tape.accumulate_param_grads(&mut ps);
        assert_eq!(ps.value(id).grad().unwrap(), &[6.0]);
    }
}
