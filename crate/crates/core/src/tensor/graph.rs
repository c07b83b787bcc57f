use super::kernels::{self, AttnShape};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Pick(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Clamp(Var, Vec<f64>, Vec<f64>),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation record over a borrowed [`ParamStore`].
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer and [`Graph::backward`] simply walks the list in reverse.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Per-parameter gradients produced by one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn per_param(&self) -> &[Option<Vec<f64>>] {
        &self.per_param
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param[id.index()].as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m x k] * [k x p] -> [m x p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Adds a length-`p` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let p = tx.cols();
        if tr.len() != p {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut out = tx.clone();
        for r in out.data_mut().chunks_mut(p) {
            r.iter_mut().zip(tr.data()).for_each(|(a, b)| *a += b);
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Element-wise clamp to per-element bounds `lo <= hi`.
    pub fn clamp(&mut self, x: Var, lo: Vec<f64>, hi: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if lo.len() != tx.len() || hi.len() != tx.len() {
            return Err(Error::Shape {
                op: "clamp",
                lhs: tx.shape().to_vec(),
                rhs: vec![lo.len(), hi.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Clamp(x, lo, hi), ng))
    }

    // ---- normalisation and attention -----------------------------------

    /// Layer normalisation over the last dimension (population variance, eps 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 {
            return Err(Error::Config("layer_norm over an empty dimension".into()));
        }
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut out = Tensor::zeros(tx.shape());
        let stats = kernels::layer_norm_rows(tx.data(), d, tg.data(), tb.data(), out.data_mut());
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }, ng))
    }

    /// Row-wise softmax over the last dimension. `mask[j] == false` removes an
    /// entry; a row with no unmasked entry is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = mask {
            if m.len() != tx.len() {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = Tensor::zeros(tx.shape());
        kernels::softmax_rows(tx.data(), tx.cols(), mask, out.data_mut())?;
        let ng = self.ng(x);
        // Masked outputs are exactly zero, so the generic softmax backward
        // (which only uses the output) needs no mask.
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(tx.shape());
        kernels::log_softmax_rows(tx.data(), tx.cols(), out.data_mut());
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Fused batched multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`, sequences stored
    /// contiguously. With `causal`, position `i` attends to `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let expect = [shape.batch * shape.seq, shape.width()];
        for t in [tq, tk, tv] {
            if t.shape() != expect {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: t.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
        }
        let (out, probs) = kernels::attention_forward(tq.data(), tk.data(), tv.data(), shape);
        let out = Tensor::new(expect.to_vec(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }, ng))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Handles of all attention nodes, in recording order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    // ---- indexing -------------------------------------------------------

    /// Selects rows `idx` of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, idx), ng))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[total x c]` tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, total: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if idx.len() != tx.rows() || idx.iter().any(|&i| i >= total) {
            return Err(Error::Contract("scatter_rows index mismatch".into()));
        }
        let mut out = Tensor::zeros(&[total, c]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(tx.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScatterRows(x, idx), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ta.rows(), ca + cb], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// `out[r] = x[r, idx[r]]`, shape `[rows, 1]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if idx.len() != tx.rows() || idx.iter().any(|&i| i >= c) {
            return Err(Error::Contract("pick index out of range".into()));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| tx.row(r)[i]).collect();
        let out = Tensor::new(vec![idx.len(), 1], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Pick(x, idx), ng))
    }

    // ---- reductions -----------------------------------------------------

    /// `[m x p] -> [m x 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().chunks(tx.cols().max(1)).map(|r| r.iter().sum()).collect();
        let out = Tensor {
            shape: vec![data.len(), 1],
            data,
        };
        let ng = self.ng(x);
        self.push(out, Op::SumRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut per_param: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(idx, &node.op, g, &mut grads, &mut per_param);
        }
        Ok(Gradients { per_param })
    }

    fn backward_node(
        &self,
        idx: usize,
        op: &Op,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        per_param: &mut [Option<Vec<f64>>],
    ) {
        let out = self.value(Var(idx));
        // Accumulate into an input's gradient slot, allocating on first use.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.value(v).len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body;
                }
            }};
        }
        match op {
            Op::Leaf => {}
            Op::Param(id) => match &mut per_param[id.index()] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC * B^T ; dB = A^T * dC
                acc!(*a, |buf| kernels::gemm(m, p, k, &g, false, tb.data(), true, buf, 1.0));
                acc!(*b, |buf| kernels::gemm(k, m, p, ta.data(), true, &g, false, buf, 1.0));
            }
            Op::Add(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                acc!(*b, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                acc!(*b, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * tb[i];
                });
                acc!(*b, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * ta[i];
                });
            }
            Op::AddRow(x, row) => {
                acc!(*x, |buf| buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                let p = out.cols();
                acc!(*row, |buf| for r in g.chunks(p) {
                    buf.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                });
            }
            Op::Affine(x, s) => {
                acc!(*x, |buf| buf.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b));
            }
            Op::Exp(x) => {
                let o = out.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * o[i];
                });
            }
            Op::Gelu(x) => {
                let xi = self.value(*x).data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * kernels::gelu_grad(xi[i]);
                });
            }
            Op::Sigmoid(x) => {
                let o = out.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * o[i] * (1.0 - o[i]);
                });
            }
            Op::Tanh(x) => {
                let o = out.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - o[i] * o[i]);
                });
            }
            Op::Square(x) => {
                let xi = self.value(*x).data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += 2.0 * g[i] * xi[i];
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xi = self.value(*x).data();
                acc!(*x, |buf| for i in 0..g.len() {
                    if xi[i] >= lo[i] && xi[i] <= hi[i] {
                        buf[i] += g[i];
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(op, Op::Minimum(..));
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                // Ties route the whole gradient to the first operand.
                let first = |i: usize| if is_min { ta[i] <= tb[i] } else { ta[i] >= tb[i] };
                acc!(*a, |buf| for i in 0..g.len() {
                    if first(i) {
                        buf[i] += g[i];
                    }
                });
                acc!(*b, |buf| for i in 0..g.len() {
                    if !first(i) {
                        buf[i] += g[i];
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let tx = self.value(*x).data();
                let tg = self.value(*gain).data();
                let d = tg.len();
                let inv_d = 1.0 / d as f64;
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let need_x = self.nodes[x.0].needs_grad;
                let mut dx = if need_x { vec![0.0; tx.len()] } else { Vec::new() };
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &tx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * tg[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    if need_x {
                        for j in 0..d {
                            dx[r * d + j] = rstd * (dxhat[j] - inv_d * s1 - xhat[j] * inv_d * s2);
                        }
                    }
                }
                acc!(*x, |buf| buf.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                acc!(*gain, |buf| buf.iter_mut().zip(&dgain).for_each(|(a, b)| *a += b));
                acc!(*bias, |buf| buf.iter_mut().zip(&dbias).for_each(|(a, b)| *a += b));
            }
            Op::Softmax(x) => {
                let o = out.data();
                let c = out.cols();
                acc!(*x, |buf| for r in 0..out.rows() {
                    let (orow, grow) = (&o[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = orow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        buf[r * c + j] += orow[j] * (grow[j] - dot);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let o = out.data();
                let c = out.cols();
                acc!(*x, |buf| for r in 0..out.rows() {
                    let grow = &g[r * c..(r + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        buf[r * c + j] += grow[j] - o[r * c + j].exp() * gsum;
                    }
                });
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = tq.len();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    &g,
                    *shape,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                acc!(*q, |buf| buf.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                acc!(*k, |buf| buf.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
                acc!(*v, |buf| buf.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                acc!(*x, |buf| for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        buf[i * c + j] += g[r * c + j];
                    }
                });
            }
            Op::ScatterRows(x, idx) => {
                let c = out.cols();
                acc!(*x, |buf| for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        buf[r * c + j] += g[i * c + j];
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                acc!(*a, |buf| for r in 0..out.rows() {
                    for j in 0..ca {
                        buf[r * ca + j] += g[r * w + j];
                    }
                });
                acc!(*b, |buf| for r in 0..out.rows() {
                    for j in 0..cb {
                        buf[r * cb + j] += g[r * w + ca + j];
                    }
                });
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).cols();
                acc!(*x, |buf| for (r, &i) in idx.iter().enumerate() {
                    buf[r * c + i] += g[r];
                });
            }
            Op::SumRows(x) => {
                let c = self.value(*x).cols();
                acc!(*x, |buf| for (r, chunk) in buf.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|a| *a += g[r]);
                });
            }
            Op::Sum(x) => {
                acc!(*x, |buf| buf.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                acc!(*x, |buf| buf.iter_mut().for_each(|a| *a += g[0] / n));
            }
        }
    }
}
