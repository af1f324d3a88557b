use super::kernels::{self, AttnDims};
use super::{Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// `[n, s, h] -> [n, h]` with fixed per-position weights.
    WeightedPool {
        x: Var,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        valid_len: Vec<usize>,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    RowCosine {
        x: Var,
        y: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in topological order and replays them in reverse.
///
/// Every node's inputs are recorded before the node itself, so a single reverse
/// sweep visits each node exactly once. Nodes that do not depend on any
/// trainable leaf are skipped during backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> TensorResult<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Invalid {
            op,
            reason: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
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

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, requires_grad, Op::Leaf)
    }

    /// Records a non-trainable leaf regardless of the tensor's flag.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.frozen(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a trainable leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("kernel produced consistent shape");
        self.push(value, requires_grad, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a);
        check_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Ok(self.derived(vec![c, r], out, &[a], Op::Transpose(a)))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.derived(shape, out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`cols` bias to every row of a 2-D tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let cols = tx.shape()[1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.derived(shape, out, &[x, bias], Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[x], Op::Scale(x, c))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.sqrt()).collect();
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[x], Op::Sqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(vec![], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(vec![], vec![m], &[x], Op::Mean(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[x], Op::Gelu(x))
    }

    /// Normalizes each row of `x[n x h]` then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TensorResult<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        check_rank("layer_norm", tx, 2)?;
        let h = tx.shape()[1];
        if h == 0 || tg.shape() != [h] || tb.shape() != [h] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = tx.shape()[0];
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(tx.data(), tg.data(), tb.data(), rows, h, eps);
        let shape = tx.shape().to_vec();
        Ok(self.derived(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        check_rank("softmax_rows", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = kernels::softmax_rows(t.data(), r, c);
        Ok(self.derived(vec![r, c], out, &[x], Op::SoftmaxRows(x)))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits[n x c]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> TensorResult<Var> {
        let t = self.value(logits);
        check_rank("cross_entropy", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if labels.len() != n || n == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Label { label, classes: c });
        }
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= n as f64;
        let probs = kernels::softmax_rows(t.data(), n, c);
        Ok(self.derived(
            vec![],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn weighted_pool(&mut self, x: Var, weights: Vec<f64>) -> TensorResult<Var> {
        let t = self.value(x);
        check_rank("pool", t, 3)?;
        let (n, s, h) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        debug_assert_eq!(weights.len(), n * s);
        let mut out = vec![0.0; n * h];
        for b in 0..n {
            let o = &mut out[b * h..(b + 1) * h];
            for j in 0..s {
                let w = weights[b * s + j];
                if w == 0.0 {
                    continue;
                }
                let row = &t.data()[(b * s + j) * h..][..h];
                for (od, &v) in o.iter_mut().zip(row) {
                    *od += w * v;
                }
            }
        }
        Ok(self.derived(vec![n, h], out, &[x], Op::WeightedPool { x, weights }))
    }

    /// Mean over the sequence axis of `x[n x s x h]`.
    pub fn mean_pool_rows(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        check_rank("mean_pool_rows", t, 3)?;
        let (n, s) = (t.shape()[0], t.shape()[1]);
        if s == 0 {
            return Err(TensorError::Invalid {
                op: "mean_pool_rows",
                reason: "empty sequence axis".into(),
            });
        }
        self.weighted_pool(x, vec![1.0 / s as f64; n * s])
    }

    /// Mean over the first `lengths[b]` positions of each sequence.
    pub fn masked_mean_pool(&mut self, x: Var, lengths: &[usize]) -> TensorResult<Var> {
        let t = self.value(x);
        check_rank("masked_mean_pool", t, 3)?;
        let (n, s) = (t.shape()[0], t.shape()[1]);
        if lengths.len() != n || lengths.iter().any(|&l| l == 0 || l > s) {
            return Err(TensorError::Invalid {
                op: "masked_mean_pool",
                reason: format!("lengths {lengths:?} invalid for sequence axis {s}"),
            });
        }
        let mut weights = vec![0.0; n * s];
        for (b, &len) in lengths.iter().enumerate() {
            weights[b * s..b * s + len].fill(1.0 / len as f64);
        }
        self.weighted_pool(x, weights)
    }

    /// Picks position `pos` of every sequence in `x[n x s x h]`.
    pub fn select_token(&mut self, x: Var, pos: usize) -> TensorResult<Var> {
        let t = self.value(x);
        check_rank("select_token", t, 3)?;
        let (n, s) = (t.shape()[0], t.shape()[1]);
        if pos >= s {
            return Err(TensorError::Invalid {
                op: "select_token",
                reason: format!("position {pos} outside sequence of {s}"),
            });
        }
        let mut weights = vec![0.0; n * s];
        for b in 0..n {
            weights[b * s + pos] = 1.0;
        }
        self.weighted_pool(x, weights)
    }

    /// Multi-head scaled dot-product attention over rows `[batch * seq, hidden]`.
    /// Keys at positions `>= valid_len[b]` are masked out for sample `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        valid_len: &[usize],
    ) -> TensorResult<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        check_rank("attention", tq, 2)?;
        let (rows, hidden) = (tq.shape()[0], tq.shape()[1]);
        if batch == 0 || rows % batch != 0 || heads == 0 || hidden % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("rows {rows}, batch {batch}, hidden {hidden}, heads {heads}"),
            });
        }
        let seq = rows / batch;
        if valid_len.len() != batch || valid_len.iter().any(|&l| l == 0 || l > seq) {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("valid lengths {valid_len:?} for sequence {seq}"),
            });
        }
        let dims = AttnDims {
            batch,
            seq,
            heads,
            hidden,
        };
        let (out, probs) =
            kernels::attention_forward(tq.data(), tk.data(), tv.data(), valid_len, dims);
        Ok(self.derived(
            vec![rows, hidden],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                valid_len: valid_len.to_vec(),
                dims,
                probs,
            },
        ))
    }

    /// Gathers rows of `table[vocab x h]` by id into `[ids.len() x h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> TensorResult<Var> {
        let t = self.value(table);
        check_rank("embedding", t, 2)?;
        let (vocab, h) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                reason: format!("token id {bad} outside vocabulary of {vocab}"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        Ok(self.derived(
            vec![ids.len(), h],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: t.len(),
            });
        }
        let data = t.data().to_vec();
        Ok(self.derived(shape.to_vec(), data, &[x], Op::Reshape(x)))
    }

    /// Cosine similarity between matching rows of `x` and `y`, denominators clamped at `eps`.
    pub fn row_cosine(&mut self, x: Var, y: Var, eps: f64) -> TensorResult<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.shape() != ty.shape() || tx.shape().len() != 2 {
            return Err(shape_err("row_cosine", tx, ty));
        }
        let (n, h) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; n];
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (&tx.data()[r * h..][..h], &ty.data()[r * h..][..h]);
            let denom = (kernels::dot(a, a).sqrt() * kernels::dot(b, b).sqrt()).max(eps);
            *o = kernels::dot(a, b) / denom;
        }
        Ok(self.derived(vec![n], out, &[x, y], Op::RowCosine { x, y, eps }))
    }

    /// Reverse sweep from a scalar `loss`. Trainable leaves receive `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, grad) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let len = node.value.len();
                node.value.set_grad(grad.unwrap_or_else(|| vec![0.0; len]));
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let acc = slot(grads, *a, ta.len());
                    kernels::matmul_a_bt_acc(g, tb.data(), acc, m, k, n);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, tb.len());
                    kernels::matmul_at_b_acc(ta.data(), g, acc, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let acc = slot(grads, *a, ta.len());
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    acc.iter_mut().zip(g).for_each(|(o, &d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((o, &d), &y) in acc.iter_mut().zip(g).zip(tb.data()) {
                        *o += d * y;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((o, &d), &x) in acc.iter_mut().zip(g).zip(ta.data()) {
                        *o += d * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((o, &d), &y) in acc.iter_mut().zip(g).zip(tb.data()) {
                        *o += d / y;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for (((o, &d), &x), &y) in acc.iter_mut().zip(g).zip(ta.data()).zip(tb.data())
                    {
                        *o -= d * x / (y * y);
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let cols = val(*bias).len();
                    let acc = slot(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        add_into(acc, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                let acc = slot(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(o, &d)| *o += d * c);
            }
            Op::Sqrt(x) => {
                let acc = slot(grads, *x, g.len());
                for ((o, &d), &y) in acc.iter_mut().zip(g).zip(out) {
                    *o += d * 0.5 / y;
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                slot(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                let d = g[0] / len as f64;
                slot(grads, *x, len).iter_mut().for_each(|o| *o += d);
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                let acc = slot(grads, *x, g.len());
                for ((o, &d), &v) in acc.iter_mut().zip(g).zip(tx.data()) {
                    *o += d * kernels::gelu_grad_scalar(v);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = val(*gain);
                let h = tg.len();
                let rows = g.len() / h;
                if wants(*x) {
                    let dx =
                        kernels::layer_norm_backward_input(g, tg.data(), xhat, inv_std, rows, h);
                    add_into(slot(grads, *x, g.len()), &dx);
                }
                if wants(*gain) {
                    let acc = slot(grads, *gain, h);
                    for r in 0..rows {
                        for j in 0..h {
                            acc[j] += g[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, h);
                    for row in g.chunks(h) {
                        add_into(acc, row);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let acc = slot(grads, *x, g.len());
                for (r, (p_row, g_row)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let inner = kernels::dot(p_row, g_row);
                    for j in 0..cols {
                        acc[r * cols + j] += p_row[j] * (g_row[j] - inner);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let acc = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { 1.0 } else { 0.0 };
                        acc[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
            Op::WeightedPool { x, weights } => {
                let tx = val(*x);
                let (n, s, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let acc = slot(grads, *x, tx.len());
                for b in 0..n {
                    let gb = &g[b * h..(b + 1) * h];
                    for j in 0..s {
                        let w = weights[b * s + j];
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut acc[(b * s + j) * h..][..h];
                        dst.iter_mut().zip(gb).for_each(|(o, &d)| *o += w * d);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                valid_len,
                dims,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (dq, dk, dv) = kernels::attention_backward(
                    g,
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    valid_len,
                    *dims,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        add_into(slot(grads, var, d.len()), &d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let h = tt.shape()[1];
                let acc = slot(grads, *table, tt.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                }
            }
            Op::Reshape(x) => {
                add_into(slot(grads, *x, g.len()), g);
            }
            Op::RowCosine { x, y, eps } => {
                let (tx, ty) = (val(*x), val(*y));
                let h = tx.shape()[1];
                let mut dx = vec![0.0; tx.len()];
                let mut dy = vec![0.0; ty.len()];
                for (r, &d) in g.iter().enumerate() {
                    let a = &tx.data()[r * h..][..h];
                    let b = &ty.data()[r * h..][..h];
                    let (na, nb) = (kernels::dot(a, a).sqrt(), kernels::dot(b, b).sqrt());
                    let cos = out[r];
                    if na * nb > *eps {
                        for j in 0..h {
                            dx[r * h + j] = d * (b[j] / (na * nb) - cos * a[j] / (na * na));
                            dy[r * h + j] = d * (a[j] / (na * nb) - cos * b[j] / (nb * nb));
                        }
                    } else {
                        for j in 0..h {
                            dx[r * h + j] = d * b[j] / eps;
                            dy[r * h + j] = d * a[j] / eps;
                        }
                    }
                }
                if wants(*x) {
                    add_into(slot(grads, *x, dx.len()), &dx);
                }
                if wants(*y) {
                    add_into(slot(grads, *y, dy.len()), &dy);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, &s)| *o += s);
}
