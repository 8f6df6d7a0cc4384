//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Nodes are
//! appended in execution order, so walking them backwards is a valid reverse
//! topological order and each node's backward rule runs exactly once.
//!
//! Parameters are borrowed from a parameter slice rather than copied, so a
//! fresh tape per example (or per supervision step) is cheap. Recording can
//! be switched off with [`Tape::set_grad_enabled`]; values computed in that
//! state are stored as constants and act as stop-gradient points.

use super::tensor::{gemm, MatView, MatViewMut, Scalar, Tensor};
use crate::error::{GramError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(usize),
}

enum Op<F> {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Exp(Var, F),
    Clamp { x: Var, lo: F, hi: F },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Rope { x: Var, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RepeatRows(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, count: usize },
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var, wq: F, wp: F },
    SumAll(Var),
    MeanAll(Var),
    SquaredError { x: Var, target: Vec<F> },
    BceLogits { x: Var, target: Vec<F> },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'p, F: Scalar> {
    params: &'p [Tensor<F>],
    param_vars: Vec<Option<Var>>,
    params_trainable: bool,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<'p, F: Scalar> Tape<'p, F> {
    /// Tape over a parameter slice; parameters receive gradients.
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Tape { params, param_vars: vec![None; params.len()], params_trainable: true, nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that records nothing: every op produces a constant.
    pub fn inference(params: &'p [Tensor<F>]) -> Self {
        let mut t = Tape::new(params);
        t.params_trainable = false;
        t.grad_enabled = false;
        t
    }

    /// Returns the previous setting.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(index), op: Op::Leaf, needs_grad: self.params_trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by tape op");
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GramError::config(format!("{what}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.check_same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    /// Stop-gradient marker: same value, no gradient flows to `x`.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node { value: Value::Owned(value), op: Op::StopGrad, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(GramError::config(format!("matmul: {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![F::zero(); m * n];
        gemm(F::one(), MatView::dense(ta.data(), m, k), MatView::dense(tb.data(), k, n), F::zero(), MatViewMut::dense(&mut out, m, n));
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(GramError::config(format!("add_row: {:?} + {:?}", tx.shape(), tb.shape())));
        }
        let n = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % n]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    /// `y = x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.exp_scaled(x, F::one())
    }

    /// `exp(s * x)`; finite for `x = -inf` when `s > 0`.
    pub fn exp_scaled(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| (v * s).exp());
        self.push(out, Op::Exp(x, s), &[x])
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (rows, cols) = (tx.rows(), tx.cols());
        if tg.len() != cols {
            return Err(GramError::config(format!("rms_norm: gain {:?} for {:?}", tg.shape(), tx.shape())));
        }
        let eps = F::of(RMS_EPS);
        let inv_n = F::of(1.0 / cols as f64);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
            let ir = F::one() / (ms + eps).sqrt();
            inv_rms.push(ir);
            data.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * ir * g));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position encoding over `heads` contiguous head slices; row
    /// index is the position. Pairs `(i, i + half)` within each head rotate.
    pub fn rope(&mut self, x: Var, heads: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if heads == 0 || cols % heads != 0 || (cols / heads) % 2 != 0 {
            return Err(GramError::config(format!("rope: width {cols} with {heads} heads")));
        }
        let mut out = tx.clone();
        rope_apply(out.data_mut(), rows, cols, heads, base, false);
        Ok(self.push(out, Op::Rope { x, heads, base }, &[x]))
    }

    /// Unmasked multi-head scaled dot-product attention on `[L, D]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.check_same_shape(q, k, "attention q/k")?;
        self.check_same_shape(q, v, "attention q/v")?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(GramError::config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); heads * l * l];
        let mut out = vec![F::zero(); l * d];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                scale,
                MatView::col_block(tq.data(), l, d, h * dh, dh),
                MatView::col_block(tk.data(), l, d, h * dh, dh).t(),
                F::zero(),
                MatViewMut::dense(p, l, l),
            );
            for row in p.chunks_mut(l) {
                softmax_in_place(row);
            }
            gemm(
                F::one(),
                MatView::dense(p, l, l),
                MatView::col_block(tv.data(), l, d, h * dh, dh),
                F::zero(),
                MatViewMut::col_block(&mut out, l, d, h * dh, dh),
            );
        }
        let out = Tensor::new(vec![l, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(GramError::config(format!("concat_cols: {:?} | {:?}", ta.shape(), tb.shape())));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![rows, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(GramError::config(format!("concat_rows: {:?} / {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start > end || end > tx.rows() {
            return Err(GramError::config(format!("slice_rows {start}..{end} of {:?}", tx.shape())));
        }
        let c = tx.cols();
        let out = Tensor::new(vec![end - start, c], tx.data()[start * c..end * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start > end || end > cols {
            return Err(GramError::config(format!("slice_cols {start}..{end} of {:?}", tx.shape())));
        }
        let data = (0..rows).flat_map(|r| tx.row(r)[start..end].iter().copied()).collect();
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Broadcast a single row to `n` rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != 1 {
            return Err(GramError::config(format!("repeat_rows needs one row, got {:?}", tx.shape())));
        }
        let c = tx.cols();
        let data = (0..n).flat_map(|_| tx.data().iter().copied()).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::RepeatRows(x), &[x]))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let c = tt.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(GramError::data(format!("token id {bad} out of range for vocab {}", tt.rows())));
        }
        let data = ids.iter().flat_map(|&i| tt.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows whose target is `Some`. Returns the loss and
    /// whether every row was ignored (loss defined as 0 then).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<(Var, bool)> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(GramError::config(format!("cross entropy: {} targets for {rows} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(GramError::data(format!("target {bad} out of range for vocab {v}")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            if let Some(t) = targets[r] {
                total += Scalar::to_f64(lse - row[t]);
                count += 1;
            }
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let all_ignored = count == 0;
        let loss = if all_ignored { 0.0 } else { total / count as f64 };
        let out = Tensor::scalar(F::of(loss));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok((self.push(out, op, &[logits]), all_ignored))
    }

    /// KL(N(mq, e^lq) || N(mp, e^lp)) for diagonal Gaussians, summed over
    /// columns and averaged over rows. Gradients to the posterior side are
    /// scaled by `wq` and to the prior side by `wp`; `(1, 1)` is the plain
    /// KL and `(1 - a, a)` is the balanced form.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var, wq: F, wp: F) -> Result<Var> {
        for (a, what) in [(lq, "kl lq"), (mp, "kl mp"), (lp, "kl lp")] {
            self.check_same_shape(mq, a, what)?;
        }
        let kl =
            kl_diag_value(self.value(mq).data(), self.value(lq).data(), self.value(mp).data(), self.value(lp).data()) / self.value(mq).rows() as f64;
        let out = Tensor::scalar(F::of(kl));
        Ok(self.push(out, Op::KlDiag { mq, lq, mp, lp, wq, wp }, &[mq, lq, mp, lp]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `sum((x - target)^2)`.
    pub fn squared_error(&mut self, x: Var, target: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != target.len() {
            return Err(GramError::config("squared_error: length mismatch"));
        }
        let s = tx.data().iter().zip(target).map(|(&a, &t)| (a - t) * (a - t)).sum::<F>();
        Ok(self.push(Tensor::scalar(s), Op::SquaredError { x, target: target.to_vec() }, &[x]))
    }

    /// Summed binary cross-entropy on logits.
    pub fn bce_logits(&mut self, x: Var, target: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != target.len() {
            return Err(GramError::config("bce_logits: length mismatch"));
        }
        let s = tx.data().iter().zip(target).map(|(&a, &t)| softplus(a) - t * a).sum::<F>();
        Ok(self.push(Tensor::scalar(s), Op::BceLogits { x, target: target.to_vec() }, &[x]))
    }

    /// Checked finiteness for values that cross module boundaries.
    pub fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).all_finite() {
            Ok(())
        } else {
            Err(GramError::numeric(format!("non-finite values in {what}")))
        }
    }

    /// Backpropagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(GramError::config("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    gemm(F::one(), MatView::dense(g.data(), m, n), MatView::dense(tb.data(), k, n).t(), F::zero(), MatViewMut::dense(&mut ga, m, k));
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                }
                if self.wants(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    gemm(F::one(), MatView::dense(ta.data(), m, k).t(), MatView::dense(g.data(), m, n), F::zero(), MatViewMut::dense(&mut gb, k, n));
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let n = tb.len();
                    let mut gb = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |gv, av| gv * av));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                let gx = zip_map(g, tx, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (F::one() + xv * (F::one() - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, zip_map(g, out, |gv, yv| gv * yv * s));
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let tx = self.value(*x);
                let gx = zip_map(g, tx, |gv, xv| if xv >= lo && xv <= hi { gv } else { F::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (rows, cols) = (tx.rows(), tx.cols());
                let inv_n = F::of(1.0 / cols as f64);
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (xr, gr, ir) = (tx.row(r), g.row(r), inv_rms[r]);
                        let dot = xr.iter().zip(gr).zip(tg.data()).map(|((&xv, &gv), &gn)| gv * gn * xv).sum::<F>();
                        let c = ir * ir * ir * dot * inv_n;
                        gx.extend(xr.iter().zip(gr).zip(tg.data()).map(|((&xv, &gv), &gn)| gv * gn * ir - xv * c));
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).expect("shape"));
                }
                if self.wants(*gain) {
                    let mut gg = vec![F::zero(); cols];
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        for ((acc, &xv), &gv) in gg.iter_mut().zip(tx.row(r)).zip(g.row(r)) {
                            *acc += gv * xv * ir;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), gg).expect("shape"));
                }
            }
            Op::Rope { x, heads, base } => {
                let mut gx = g.clone();
                rope_apply(gx.data_mut(), g.rows(), g.cols(), *heads, *base, true);
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape"));
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                let ga = g.data()[..na].to_vec();
                let gb = g.data()[na..].to_vec();
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape"));
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut gx = Tensor::zeros(tx.shape());
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (c, w) = (tx.cols(), g.cols());
                    let mut gx = Tensor::zeros(tx.shape());
                    for r in 0..g.rows() {
                        gx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::RepeatRows(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = vec![F::zero(); c];
                for row in g.data().chunks(c) {
                    for (acc, &v) in gx.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).expect("shape"));
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut gt = Tensor::zeros(tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &v) in gt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let tl = self.value(*logits);
                let v = tl.cols();
                let scale = g.item() / F::of(*count as f64);
                let mut gl = vec![F::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        gl[r * v + j] = (probs[r * v + j] - onehot) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), gl).expect("shape"));
            }
            Op::KlDiag { mq, lq, mp, lp, wq, wp } => {
                let (tmq, tlq, tmp, tlp) = (self.value(*mq), self.value(*lq), self.value(*mp), self.value(*lp));
                let scale = g.item() / F::of(tmq.rows() as f64);
                let half = F::of(0.5);
                let n = tmq.len();
                let (mut gmq, mut glq, mut gmp, mut glp) = (vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]);
                for i in 0..n {
                    let inv_vp = (-tlp.data()[i]).exp();
                    let vq = tlq.data()[i].exp();
                    let diff = tmq.data()[i] - tmp.data()[i];
                    gmq[i] = diff * inv_vp * scale * *wq;
                    glq[i] = half * (vq * inv_vp - F::one()) * scale * *wq;
                    gmp[i] = -diff * inv_vp * scale * *wp;
                    glp[i] = half * (F::one() - (vq + diff * diff) * inv_vp) * scale * *wp;
                }
                let shape = tmq.shape().to_vec();
                self.accumulate(grads, *mq, Tensor::new(shape.clone(), gmq).expect("shape"));
                self.accumulate(grads, *lq, Tensor::new(shape.clone(), glq).expect("shape"));
                self.accumulate(grads, *mp, Tensor::new(shape.clone(), gmp).expect("shape"));
                self.accumulate(grads, *lp, Tensor::new(shape, glp).expect("shape"));
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let v = g.item() / F::of(tx.len() as f64);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), v));
            }
            Op::SquaredError { x, target } => {
                let tx = self.value(*x);
                let two_g = F::of(2.0) * g.item();
                let data = tx.data().iter().zip(target).map(|(&a, &t)| (a - t) * two_g).collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data).expect("shape"));
            }
            Op::BceLogits { x, target } => {
                let tx = self.value(*x);
                let gv = g.item();
                let data = tx.data().iter().zip(target).map(|(&a, &t)| (sigmoid(a) - t) * gv).collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data).expect("shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[F], g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut gq = vec![F::zero(); l * d];
        let mut gk = vec![F::zero(); l * d];
        let mut gv = vec![F::zero(); l * d];
        let mut dp = vec![F::zero(); l * l];
        for h in 0..heads {
            let p = &probs[h * l * l..(h + 1) * l * l];
            let g_h = MatView::col_block(g.data(), l, d, h * dh, dh);
            // dV = P^T dO
            gemm(F::one(), MatView::dense(p, l, l).t(), g_h, F::zero(), MatViewMut::col_block(&mut gv, l, d, h * dh, dh));
            // dP = dO V^T
            gemm(F::one(), g_h, MatView::col_block(tv.data(), l, d, h * dh, dh).t(), F::zero(), MatViewMut::dense(&mut dp, l, l));
            // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
            for r in 0..l {
                let pr = &p[r * l..(r + 1) * l];
                let dr = &mut dp[r * l..(r + 1) * l];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            gemm(
                F::one(),
                MatView::dense(&dp, l, l),
                MatView::col_block(tk.data(), l, d, h * dh, dh),
                F::zero(),
                MatViewMut::col_block(&mut gq, l, d, h * dh, dh),
            );
            gemm(
                F::one(),
                MatView::dense(&dp, l, l).t(),
                MatView::col_block(tq.data(), l, d, h * dh, dh),
                F::zero(),
                MatViewMut::col_block(&mut gk, l, d, h * dh, dh),
            );
        }
        let shape = tq.shape().to_vec();
        self.accumulate(grads, q, Tensor::new(shape.clone(), gq).expect("shape"));
        self.accumulate(grads, k, Tensor::new(shape.clone(), gk).expect("shape"));
        self.accumulate(grads, v, Tensor::new(shape, gv).expect("shape"));
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, index: usize) -> Option<&Tensor<F>> {
        self.param_vars[index].and_then(|v| self.wrt(v))
    }

    /// Dense per-parameter gradients, zero-filled where no path exists.
    pub fn into_param_grads(mut self, params: &[Tensor<F>]) -> Vec<Tensor<F>> {
        params
            .iter()
            .enumerate()
            .map(|(i, p)| self.param_vars[i].and_then(|v| self.grads[v.0].take()).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

pub(crate) const RMS_EPS: f64 = 1e-6;

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn rope_apply<F: Scalar>(data: &mut [F], rows: usize, cols: usize, heads: usize, base: f64, inverse: bool) {
    let dh = cols / heads;
    let half = dh / 2;
    for pos in 0..rows {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / dh as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (F::of(if inverse { -s } else { s }), F::of(c));
            for h in 0..heads {
                let a = pos * cols + h * dh + i;
                let b = a + half;
                let (x1, x2) = (data[a], data[b]);
                data[a] = x1 * c - x2 * s;
                data[b] = x1 * s + x2 * c;
            }
        }
    }
}

/// Summed elementwise KL between diagonal Gaussians given log-variances.
pub fn kl_diag_value<F: Scalar>(mq: &[F], lq: &[F], mp: &[F], lp: &[F]) -> f64 {
    let mut total = 0.0f64;
    for i in 0..mq.len() {
        let (mq, lq, mp, lp) = (mq[i].to_f64(), lq[i].to_f64(), mp[i].to_f64(), lp[i].to_f64());
        let diff = mq - mp;
        total += 0.5 * (lp - lq + (lq.exp() + diff * diff) / lp.exp() - 1.0);
    }
    total
}
