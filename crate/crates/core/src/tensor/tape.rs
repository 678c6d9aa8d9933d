use super::ops::{gemm, log_add, log_softmax_rows, normalize_rows, softmax_rows};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        logp: usize,
        target: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Mean(usize),
    Sum(usize),
    Ctc {
        logp: usize,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. One tape per forward pass; confined
/// to the thread that built it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err(
                "matmul",
                format!("lhs {:?} rhs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Elementwise sum of equal shapes, or a matrix plus a row vector
    /// broadcast over its rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(&[a.0, b.0]);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::Add(a.0, b.0), rg));
        }
        if ta.ndim() == 2 && tb.ndim() == 1 && ta.cols() == tb.len() {
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::AddRow(a.0, b.0), rg));
        }
        Err(shape_err(
            "add",
            format!("lhs {:?} rhs {:?}", ta.shape(), tb.shape()),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("lhs {:?} rhs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| c * x);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Relu(a.0), rg)
    }

    /// Row-wise layer normalization with affine gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} gain {:?} bias {:?}",
                    tx.shape(),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xhat, inv_std) = normalize_rows(tx.data(), c);
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = softmax_rows(tx.data(), tx.cols());
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Softmax(x.0), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = log_softmax_rows(tx.data(), tx.cols());
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(t, Op::LogSoftmax(x.0), rg)
    }

    /// Gathers rows of `table` (`vocab x dim`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.ndim() != 2 || ids.is_empty() {
            return Err(shape_err(
                "embedding_lookup",
                format!("table {:?} with {} ids", tt.shape(), ids.len()),
            ));
        }
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(
                "embedding_lookup",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `softmax(q k^T / sqrt(d) + mask) v` for one head. With `causal`, query
    /// `i` only sees keys `0..=i`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if tq.ndim() != 2
            || tk.ndim() != 2
            || tv.ndim() != 2
            || tq.cols() != tk.cols()
            || tk.rows() != tv.rows()
        {
            return Err(shape_err(
                "scaled_dot_attention",
                format!("q {:?} k {:?} v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (n, d, m, dv) = (tq.rows(), tq.cols(), tk.rows(), tv.cols());
        if causal && n > m {
            return Err(shape_err(
                "scaled_dot_attention",
                format!("causal mask needs queries ({n}) <= keys ({m})"),
            ));
        }
        let mut scores = vec![0.0; n * m];
        gemm(n, d, m, tq.data(), false, tk.data(), true, &mut scores, 0.0);
        let scale = 1.0 / (d as f64).sqrt();
        for (i, row) in scores.chunks_mut(m).enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = if causal && j > i {
                    f64::NEG_INFINITY
                } else {
                    *s * scale
                };
            }
        }
        let probs = softmax_rows(&scores, m);
        let mut out = vec![0.0; n * dv];
        gemm(n, m, dv, &probs, false, tv.data(), false, &mut out, 0.0);
        let t = Tensor::matrix(n, dv, out)?;
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (n, c) = tl.dims2();
        if tl.ndim() != 2 || targets.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", tl.shape(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {bad} outside {c} classes"),
            ));
        }
        let logp = log_softmax_rows(tl.data(), c);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp[r * c + t])
            .sum::<f64>()
            / n as f64;
        let probs = logp.iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-averaged `KL(target || exp(logp))` where `target_logp` is a
    /// constant distribution given in log space.
    pub fn kl_div(&mut self, logp: Var, target_logp: &Tensor) -> Result<Var> {
        let tl = &self.nodes[logp.0].value;
        if tl.shape() != target_logp.shape() {
            return Err(shape_err(
                "kl_div",
                format!("input {:?} target {:?}", tl.shape(), target_logp.shape()),
            ));
        }
        let rows = tl.rows() as f64;
        let mut total = 0.0;
        let mut target = Vec::with_capacity(tl.len());
        for (&lq, &lp) in tl.data().iter().zip(target_logp.data()) {
            let p = lp.exp();
            if p > 0.0 {
                total += p * (lp - lq);
            }
            target.push(p);
        }
        let rg = self.rg(&[logp.0]);
        Ok(self.push(
            Tensor::scalar(total / rows),
            Op::KlDiv {
                logp: logp.0,
                target,
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() || axis > 1 {
            return Err(shape_err("concat", format!("{} inputs on axis {axis}", xs.len())));
        }
        let first = self.shape(xs[0]).to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
        }
        let t = if axis == 0 {
            let rows = xs.iter().map(|&x| self.shape(x)[0]).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &x in xs {
                data.extend_from_slice(self.nodes[x.0].value.data());
            }
            Tensor::matrix(rows, first[1], data)?
        } else {
            let rows = first[0];
            let cols: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &x in xs {
                    data.extend_from_slice(self.nodes[x.0].value.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Concat { inputs: ids, axis }, rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a 2-D tensor from `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.ndim() != 2 || axis > 1 || len == 0 || start + len > tx.shape()[axis] {
            return Err(shape_err(
                "slice",
                format!("{:?} axis {axis} range {start}..{}", tx.shape(), start + len),
            ));
        }
        let (r, c) = tx.dims2();
        let t = if axis == 0 {
            Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&tx.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Slice { x: x.0, axis, start }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum::<f64>();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// CTC negative log-likelihood of `labels` given per-frame log
    /// probabilities (`frames x vocab`), blank at index `blank`.
    pub fn ctc_loss(&mut self, logp: Var, labels: &[usize], blank: usize) -> Result<Var> {
        let tl = &self.nodes[logp.0].value;
        let rg = self.rg(&[logp.0]);
        let (loss, grad) = ctc_forward_backward(tl, labels, blank, rg)?;
        Ok(self.push(Tensor::scalar(loss), Op::Ctc { logp: logp.0, grad }, rg))
    }

    /// Reverse sweep from a scalar loss. A tape supports one sweep; call
    /// [`Tape::reset`] before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Tape(
                "loss is detached: no input requires a gradient".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[target].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, tb.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, ta.data(), true, gd, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.nodes[*b].requires_grad {
                    let c = self.nodes[*b].value.len();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.nodes[*gain].value.len();
                let gv = self.nodes[*gain].value.data();
                if self.nodes[*gain].requires_grad {
                    let mut dg = vec![0.0; c];
                    for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.nodes[*bias].requires_grad {
                    let mut db = vec![0.0; c];
                    for grow in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; gd.len()];
                    let cf = c as f64;
                    for (r, ((grow, xrow), drow)) in gd
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xrow).map(|(d, x)| d * x).sum();
                        for j in 0..c {
                            drow[j] =
                                inv_std[r] / cf * (cf * dxhat[j] - sum_d - xrow[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((grow, yrow), drow) in gd.chunks(c).zip(y.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((grow, yrow), drow) in gd.chunks(c).zip(y.chunks(c)).zip(da.chunks_mut(c)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Embedding { table, ids } => {
                let tt = &self.nodes[*table].value;
                let d = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention { q, k, v, probs } => {
                let (tq, tk, tv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let (n, d, m, dv) = (tq.rows(), tq.cols(), tk.rows(), tv.cols());
                let scale = 1.0 / (d as f64).sqrt();
                if self.nodes[*v].requires_grad {
                    let mut dvv = vec![0.0; m * dv];
                    gemm(m, n, dv, probs, true, gd, false, &mut dvv, 0.0);
                    self.accumulate(grads, *v, dvv);
                }
                if self.nodes[*q].requires_grad || self.nodes[*k].requires_grad {
                    let mut dp = vec![0.0; n * m];
                    gemm(n, dv, m, gd, false, tv.data(), true, &mut dp, 0.0);
                    let mut ds = vec![0.0; n * m];
                    for i in 0..n {
                        let prow = &probs[i * m..(i + 1) * m];
                        let dprow = &dp[i * m..(i + 1) * m];
                        let dot: f64 = prow.iter().zip(dprow).map(|(p, d)| p * d).sum();
                        for j in 0..m {
                            ds[i * m + j] = prow[j] * (dprow[j] - dot) * scale;
                        }
                    }
                    if self.nodes[*q].requires_grad {
                        let mut dq = vec![0.0; n * d];
                        gemm(n, m, d, &ds, false, tk.data(), false, &mut dq, 0.0);
                        self.accumulate(grads, *q, dq);
                    }
                    if self.nodes[*k].requires_grad {
                        let mut dk = vec![0.0; m * d];
                        gemm(m, n, d, &ds, true, tq.data(), false, &mut dk, 0.0);
                        self.accumulate(grads, *k, dk);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::KlDiv { logp, target } => {
                let rows = self.nodes[*logp].value.rows() as f64;
                let scale = -gd[0] / rows;
                self.accumulate(grads, *logp, target.iter().map(|p| p * scale).collect());
            }
            Op::Concat { inputs, axis } => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &i in inputs {
                    let (r, c) = self.nodes[i].value.dims2();
                    let delta = if *axis == 0 {
                        let d = gd[offset * cols..(offset + r) * cols].to_vec();
                        offset += r;
                        d
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&gd[row * cols + offset..row * cols + offset + c]);
                        }
                        offset += c;
                        d
                    };
                    self.accumulate(grads, i, delta);
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = &self.nodes[*x].value;
                let (r, c) = tx.dims2();
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                } else {
                    let len = node.value.cols();
                    for row in 0..r {
                        dx[row * c + start..row * c + start + len]
                            .copy_from_slice(&gd[row * len..(row + 1) * len]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Ctc { logp, grad } => {
                self.accumulate(grads, *logp, grad.iter().map(|x| x * gd[0]).collect());
            }
        }
    }
}

/// Minimum frame count CTC needs for `labels`: one frame per label plus one
/// separating blank per adjacent repeat.
pub fn ctc_required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space alpha/beta recursions. Returns `-log p(labels)` and, when
/// requested, its gradient with respect to the log-probability inputs.
fn ctc_forward_backward(
    logp: &Tensor,
    labels: &[usize],
    blank: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (frames, vocab) = logp.dims2();
    if logp.ndim() != 2 {
        return Err(shape_err("ctc_loss", format!("log-probs {:?}", logp.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab || l == blank) {
        return Err(shape_err(
            "ctc_loss",
            format!("label {bad} is blank or outside vocabulary of {vocab}"),
        ));
    }
    let required = ctc_required_frames(labels);
    if required > frames {
        return Err(Error::CtcLength {
            labels: labels.len(),
            required,
            frames,
        });
    }
    let ninf = f64::NEG_INFINITY;
    // Blank-augmented label sequence: b l1 b l2 ... b.
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };
    let can_skip = |s: usize| s % 2 == 1 && s >= 3 && labels[s / 2] != labels[s / 2 - 1];
    let lp = |t: usize, k: usize| logp.data()[t * vocab + k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext(s)) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !want_grad {
        return Ok((-log_p, Vec::new()));
    }

    // beta[t][s]: log prob of emitting frames t+1.. given state s at frame t.
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext(s));
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, ext(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, ext(s + 2)));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * vocab + ext(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}
