//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive appends
//! a node whose inputs are earlier nodes, so insertion order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use softneg_core::autodiff::Graph;
//! use softneg_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = g.sum(w);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Relu(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    Embedding(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    LayerNormRows(Var, Vec<f64>),
    Cosine(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Transpose(..) => "transpose",
            Op::Embedding(..) => "embedding_lookup",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::Cosine(..) => "cosine_similarity",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One op record as seen from outside: kind, input ids and output id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Define-by-run computation graph. Confined to one thread while in use.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.nodes[v.0].value.clone();
        t.clear_grad();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Gradient of `v` after [`Graph::backward`], if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                kind: n.op.name(),
                inputs: inputs_of(&n.op).iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 2 {
            return Err(Error::shape(
                op,
                format!("expected rank-2 input, got shape {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary_map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, op, needs)
    }

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {n}x{k} · {k2}x{m}"),
            ));
        }
        let mut out = vec![0.0; n * m];
        mm_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul_t", a)?;
        let (m, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("inner dims differ: {n}x{k} · ({m}x{k2})ᵀ"),
            ));
        }
        let mut out = vec![0.0; n * m];
        mm_nt_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Adds the rank-1 `bias` to every row of the rank-2 `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("add_row", a)?;
        let b = self.value(bias);
        if b.rank() != 1 || b.len() != d {
            return Err(Error::shape(
                "add_row",
                format!("bias shape {:?} vs row width {d}", b.shape()),
            ));
        }
        let bd = b.data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &x) in row.iter_mut().zip(bd) {
                *o += x;
            }
        }
        let needs = self.needs(&[a, bias]);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddRow(a, bias), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary_map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary_map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_map(a, Op::Sigmoid(a), sigmoid)
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::SoftmaxRows(a), needs))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("log_softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::LogSoftmaxRows(a), needs))
    }

    /// Column-wise mean over rows: `n×d → d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("mean_rows", a)?;
        if n == 0 {
            return Err(Error::shape("mean_rows", "zero rows"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), needs))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, d) = self.matrix_dims("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (n, d2) = self.matrix_dims("concat_rows", p)?;
            if d2 != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {d} vs {d2}"),
                ));
            }
            rows += n;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} of {n} rows"),
            ));
        }
        let out = self.value(a).data()[start * d..end * d].to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![end - start, d], out)?,
            Op::SliceRows(a, start),
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), needs))
    }

    /// Rows `ids` of `table: V×d`, giving `len(ids)×d`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding_lookup", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let src = self.value(table).data();
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, vocab_size: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, ids.to_vec()),
            needs,
        ))
    }

    /// Picks `a[i, cols[i]]` for each row, giving a rank-1 tensor.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims("gather", a)?;
        if cols.len() != n {
            return Err(Error::shape(
                "gather",
                format!("{} indices for {n} rows", cols.len()),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n);
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::Vocab {
                    id: c,
                    vocab_size: m,
                });
            }
            out.push(src[i * m + c]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Gather(a, cols.to_vec()), needs))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("layer_norm_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(d.max(1)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNormRows(a, inv_std),
            needs,
        ))
    }

    /// Cosine similarity of two rank-1 tensors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 || ta.len() != tb.len() || ta.is_empty() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let c = cosine(ta.data(), tb.data())?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), needs))
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Afterwards every node that requires a gradient holds one; nodes the
    /// loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    mm_nt_acc(ga, g, self.value(*b).data(), n, m, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    mm_tn_acc(gb, self.value(*a).data(), g, n, k, m);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = self.value(*b).shape()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · B
                    mm_acc(ga, g, self.value(*b).data(), n, m, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = dCᵀ · A
                    mm_tn_acc(gb, g, self.value(*a).data(), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let m = node.value.shape()[1].max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), or) in g.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, &gi), &y) in or.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let m = node.value.shape()[1].max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), or) in g.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, &gi), &y) in or.iter_mut().zip(gr).zip(yr) {
                            *o += gi - y.exp() * total;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (n, d) = dims2(self.value(*a));
                let inv = 1.0 / n as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_mut(d) {
                        axpy(row, g, inv);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        axpy(gp, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let d = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(&mut ga[start * d..start * d + g.len()], g, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = dims2(self.value(*a));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        axpy(&mut gt[id * d..(id + 1) * d], row, 1.0);
                    }
                }
            }
            Op::Gather(a, cols) => {
                let m = self.value(*a).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, (&c, &gi)) in cols.iter().zip(g).enumerate() {
                        ga[r * m + c] += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::LayerNormRows(a, inv_std) => {
                let d = node.value.shape()[1].max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    let rows = g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d));
                    for (((gr, yr), or), &inv) in rows.zip(inv_std) {
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                        for ((o, &gi), &y) in or.iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gi - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let c = out[0];
                let na = norm(xa);
                let nb = norm(xb);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(xa).zip(xb) {
                        *o += g[0] * (y / (na * nb) - c * x / (na * na));
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(xa).zip(xb) {
                        *o += g[0] * (x / (na * nb) - c * y / (nb * nb));
                    }
                }
            }
        }
    }

    /// Mutable gradient accumulator for `v`, allocated on first use, or
    /// `None` when `v` does not take part in backward.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.len()])
                .as_mut_slice(),
        )
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Cosine(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::MeanRows(a)
        | Op::Transpose(a)
        | Op::SliceRows(a, _)
        | Op::Embedding(a, _)
        | Op::Gather(a, _)
        | Op::Sum(a)
        | Op::LayerNormRows(a, _) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(out: &mut [f64], x: &[f64], alpha: f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two equal-length slices, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// out[n×m] += a[n×k] · b[k×m]
fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[n×m] += a[n×k] · b[m×k]ᵀ
fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += dot4(arow, brow);
        }
    }
}

// out[n×m] += a[k×n]ᵀ · b[k×m]
fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// Four independent accumulators so the compiler can vectorise.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
