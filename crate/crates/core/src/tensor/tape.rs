// Wengert tape: every op appends a node holding its value and the ids of its
// inputs. Node ids are creation-ordered, so a reverse sweep over the node list
// is a valid topological order and the graph cannot contain cycles.

use super::Tensor;
use crate::error::{Error, Result};

/// Added to the norm product in cosine similarities. Treated as a constant by the backward pass.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis along which softmax normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

/// Deliberate backward bugs, used to prove the gradient checker catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate the gradient flowing through `tanh`.
    FlipTanhGrad,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Same shape, or `[1, c]` broadcast over the rows of the left operand.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatLast(Var, Var),
    Softmax(Var, Axis),
    Cosine(Var, Var),
    RowCosine(Var, Var),
    Sum(Var),
    Rows(Var, usize),
    Gather(Var, Vec<usize>),
    StackRows(Vec<Var>),
    LogSumExp(Var, f64),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass carries the given bug.
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Tape { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor { shape, data }, op, requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| x + y).collect()
        } else if sb.len() == 2 && sb[0] == 1 && sb[1] == *sa.last().unwrap() {
            let c = sb[1];
            va.iter().enumerate().map(|(i, x)| x + vb[i % c]).collect()
        } else {
            return Err(Error::dim(format!("add: shapes {sa:?} and {sb:?} do not broadcast")));
        };
        Ok(self.push_op(sa, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    fn zip_same(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push_op(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Joins two tensors along their last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat: shapes {sa:?} and {sb:?} are incompatible")));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out: Vec<f64> = va
            .chunks(ca)
            .zip(vb.chunks(cb))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        Ok(self.push_op(shape, out, Op::ConcatLast(a, b), &[a, b]))
    }

    /// Max-subtracted softmax along `axis` of a matrix.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let x = self.value(a).data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; r * c];
        match axis {
            Axis::Rows => {
                for i in 0..r {
                    softmax_into(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                }
            }
            Axis::Cols => {
                let mut col = vec![0.0; r];
                let mut sm = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = x[i * c + j];
                    }
                    softmax_into(&col, &mut sm);
                    for i in 0..r {
                        out[i * c + j] = sm[i];
                    }
                }
            }
        }
        Ok(self.push_op(vec![r, c], out, Op::Softmax(a, axis), &[a]))
    }

    /// `out[i][j] = cos(v_i, w_j)` with [`COSINE_EPS`] added to the norm product.
    pub fn cosine(&mut self, v: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2(v)?;
        let (q, d2) = self.dims2(w)?;
        if d != d2 {
            return Err(Error::dim(format!(
                "cosine: row widths differ, [{n}, {d}] vs [{q}, {d2}]"
            )));
        }
        let vv = self.value(v).data();
        let wv = self.value(w).data();
        let vn: Vec<f64> = vv.chunks(d).map(norm).collect();
        let wn: Vec<f64> = wv.chunks(d).map(norm).collect();
        let mut out = vec![0.0; n * q];
        for i in 0..n {
            let vi = &vv[i * d..(i + 1) * d];
            for j in 0..q {
                let wj = &wv[j * d..(j + 1) * d];
                out[i * q + j] = dot(vi, wj) / (vn[i] * wn[j] + COSINE_EPS);
            }
        }
        Ok(self.push_op(vec![n, q], out, Op::Cosine(v, w), &[v, w]))
    }

    /// Cosine between matching rows: `out[i] = cos(a_i, b_i)`, shape `[n, 1]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a)?;
        if self.shape(b) != [n, d] {
            return Err(Error::dim(format!(
                "row_cosine: shapes [{n}, {d}] and {:?} differ",
                self.shape(b)
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| dot(x, y) / (norm(x) * norm(y) + COSINE_EPS))
            .collect();
        Ok(self.push_op(vec![n, 1], out, Op::RowCosine(a, b), &[a, b]))
    }

    /// Sum of all entries, shape `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(vec![1, 1], vec![s], Op::Sum(a), &[a])
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start >= end || end > r {
            return Err(Error::dim(format!("row range {start}..{end} outside [0, {r})")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        Ok(self.push_op(vec![end - start, c], out, Op::Rows(a, start), &[a]))
    }

    /// Embedding lookup: one output row per id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather: id {bad} outside table of {r} rows")));
        }
        let t = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Ok(self.push_op(vec![ids.len(), c], out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push_op(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("stack_rows: no inputs"))?;
        let c = self.dims2(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::dim(format!("stack_rows: widths {c} and {pc} differ")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_op(vec![rows, c], out, Op::StackRows(parts.to_vec()), parts))
    }

    /// `(1/λ) · ln Σ exp(λ·x)` over every entry, shape `[1, 1]`.
    pub fn log_sum_exp(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0) {
            return Err(Error::Contract(format!("LSE sharpness must be positive, got {lambda}")));
        }
        let x = self.value(a).data();
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|&v| (lambda * (v - m)).exp()).sum();
        let out = m + s.ln() / lambda;
        if !out.is_finite() {
            return Err(Error::Numeric(format!("LSE produced {out}")));
        }
        Ok(self.push_op(vec![1, 1], vec![out], Op::LogSumExp(a, lambda), &[a]))
    }

    // ---- reverse sweep ----

    /// Accumulates `d loss / d leaf` into every reachable trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Tape::backward`] but seeds the sweep with `seed` instead of one.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            let row = &g[i * n..(i + 1) * n];
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *dst += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                let nb = self.value(*b).numel();
                self.accumulate(grads, *b, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += k * s)
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let sign = if self.fault == Some(Fault::FlipTanhGrad) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += sign * g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::ConcatLast(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                self.accumulate(grads, *a, |ga| {
                    for (dst, src) in ga.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(dst, &src[..ca]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (dst, src) in gb.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(dst, &src[ca..]);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (r, c) = node.value.dims2().unwrap();
                self.accumulate(grads, *a, |ga| match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            let y = &out[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let inner = dot(y, gr);
                            for j in 0..c {
                                ga[i * c + j] += y[j] * (gr[j] - inner);
                            }
                        }
                    }
                    Axis::Cols => {
                        for j in 0..c {
                            let inner: f64 = (0..r).map(|i| out[i * c + j] * g[i * c + j]).sum();
                            for i in 0..r {
                                ga[i * c + j] += out[i * c + j] * (g[i * c + j] - inner);
                            }
                        }
                    }
                });
            }
            Op::Cosine(v, w) => self.cosine_backward(*v, *w, g, grads),
            Op::RowCosine(a, b) => {
                let d = self.value(*a).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = g.len();
                let mut coeffs = Vec::with_capacity(n);
                for i in 0..n {
                    let x = &av[i * d..(i + 1) * d];
                    let y = &bv[i * d..(i + 1) * d];
                    let (nx, ny) = (norm(x), norm(y));
                    let den = nx * ny + COSINE_EPS;
                    let dt = dot(x, y);
                    let alpha = g[i] / den;
                    let bx = if nx > 0.0 { g[i] * dt * ny / (nx * den * den) } else { 0.0 };
                    let by = if ny > 0.0 { g[i] * dt * nx / (ny * den * den) } else { 0.0 };
                    coeffs.push((alpha, bx, by));
                }
                self.accumulate(grads, *a, |ga| {
                    for (i, &(alpha, bx, _)) in coeffs.iter().enumerate() {
                        for p in 0..d {
                            ga[i * d + p] += alpha * bv[i * d + p] - bx * av[i * d + p];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, &(alpha, _, by)) in coeffs.iter().enumerate() {
                        for p in 0..d {
                            gb[i * d + p] += alpha * av[i * d + p] - by * bv[i * d + p];
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Rows(a, start) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| add_into(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::Gather(table, ids) => {
                let c = self.value(*table).cols();
                self.accumulate(grads, *table, |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::LogSumExp(a, lambda) => {
                let x = self.value(*a).data();
                let mut w = vec![0.0; x.len()];
                let scaled: Vec<f64> = x.iter().map(|v| lambda * v).collect();
                softmax_into(&scaled, &mut w);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..w.len() {
                        ga[i] += g[0] * w[i];
                    }
                });
            }
        }
    }

    fn cosine_backward(&self, v: Var, w: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = self.value(v).dims2().unwrap();
        let q = self.value(w).rows();
        let vv = self.value(v).data();
        let wv = self.value(w).data();
        let vn: Vec<f64> = vv.chunks(d).map(norm).collect();
        let wn: Vec<f64> = wv.chunks(d).map(norm).collect();
        // alpha[i][j] = g / den; self terms collect the norm derivatives.
        let mut alpha = vec![0.0; n * q];
        let mut v_self = vec![0.0; n];
        let mut w_self = vec![0.0; q];
        for i in 0..n {
            for j in 0..q {
                let den = vn[i] * wn[j] + COSINE_EPS;
                let gij = g[i * q + j];
                let dt = dot(&vv[i * d..(i + 1) * d], &wv[j * d..(j + 1) * d]);
                alpha[i * q + j] = gij / den;
                if vn[i] > 0.0 {
                    v_self[i] += gij * dt * wn[j] / (vn[i] * den * den);
                }
                if wn[j] > 0.0 {
                    w_self[j] += gij * dt * vn[i] / (wn[j] * den * den);
                }
            }
        }
        self.accumulate(grads, v, |gv| {
            for i in 0..n {
                for j in 0..q {
                    let a = alpha[i * q + j];
                    for p in 0..d {
                        gv[i * d + p] += a * wv[j * d + p];
                    }
                }
                for p in 0..d {
                    gv[i * d + p] -= v_self[i] * vv[i * d + p];
                }
            }
        });
        self.accumulate(grads, w, |gw| {
            for j in 0..q {
                for i in 0..n {
                    let a = alpha[i * q + j];
                    for p in 0..d {
                        gw[j * d + p] += a * vv[i * d + p];
                    }
                }
                for p in 0..d {
                    gw[j * d + p] -= w_self[j] * wv[j * d + p];
                }
            }
        });
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (dst, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += x * y;
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
