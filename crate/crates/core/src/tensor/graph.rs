use super::kernels;
use super::{matmul_dims, Tensor};
use crate::error::{RadError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    CausalMask(Var, usize),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Nll {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability floor applied before taking logs in the NLL.
pub const LOG_CLAMP: f64 = 1e-12;

/// A computation tape.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so [`Graph::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; every node is a constant.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let requires_grad = self.grad_enabled && t.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an untracked constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        t.requires_grad = false;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
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

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Broadcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok((sa.to_vec(), Broadcast::Same))
        } else if self.value(b).numel() == 1 {
            Ok((sa.to_vec(), Broadcast::RhsScalar))
        } else if self.value(a).numel() == 1 {
            Ok((sb.to_vec(), Broadcast::LhsScalar))
        } else {
            Err(RadError::dim(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (shape, bc) = self.binary_shape(name, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let data: Vec<f64> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op(a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x * c).collect(),
            grad: None,
            requires_grad: false,
        };
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k, c) = matmul_dims(self.shape(a), self.shape(b))?;
        let data = kernels::matmul(self.data(a), self.data(b), r, k, c);
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[r×c] + row[c]` broadcast over rows (affine bias).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.shape(a).len() != 2 || self.value(row).numel() != c {
            return Err(RadError::dim("add_row", self.shape(a), self.shape(row)));
        }
        let bias = self.data(row);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(RadError::Contract("mean of an empty tensor".into()));
        }
        let s: f64 = self.data(a).iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), &[a]))
    }

    /// Row-wise layer normalisation followed by the affine `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = self.value(x).cols();
        if shape.len() != 2 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(RadError::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let r = shape[0];
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| kernels::gelu(x)).collect(),
            grad: None,
            requires_grad: false,
        };
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x.tanh()).collect(),
            grad: None,
            requires_grad: false,
        };
        self.push(t, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax with max subtraction. `-inf` entries (masked
    /// scores) are allowed as long as each row keeps one finite value.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let c = src.cols();
        if src.data.iter().any(|v| v.is_nan()) {
            return Err(RadError::Numeric {
                op: "softmax_rows",
                detail: "NaN in input".into(),
            });
        }
        let mut out = vec![0.0; src.numel()];
        if c > 0 {
            for (row, o) in src.data.chunks(c).zip(out.chunks_mut(c)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(RadError::Numeric {
                        op: "softmax_rows",
                        detail: format!("row without a finite maximum ({max})"),
                    });
                }
                kernels::softmax_row(row, o);
            }
        }
        let t = Tensor::new(src.shape.clone(), out)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Sets score `(i, j)` to `-inf` whenever key `j` lies after query
    /// position `offset + i`.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(RadError::dim("causal_mask", &shape, &[2]));
        }
        let (r, c) = (shape[0], shape[1]);
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in (offset + i + 1).min(c)..c {
                data[i * c + j] = f64::NEG_INFINITY;
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::CausalMask(a, offset), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start > end || end > shape[1] {
            return Err(RadError::dim("slice_cols", &shape, &[start, end]));
        }
        let (r, c) = (shape[0], shape[1]);
        let w = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], data)?;
        Ok(self.push(t, Op::SliceCols(a, start, end), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(RadError::Contract("concat_cols of nothing".into()));
        };
        let r = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(RadError::dim("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start > end || end > shape[0] {
            return Err(RadError::dim("slice_rows", &shape, &[start, end]));
        }
        let t = self.value(a).slice_rows(start, end);
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    /// Stacks matrices with equal column counts; zero-row parts are fine.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(RadError::Contract("concat_rows of nothing".into()));
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(RadError::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(RadError::dim("gather_rows", &shape, &[2]));
        }
        let (v, c) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(RadError::Vocabulary {
                    id,
                    vocab_size: v,
                });
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Multiplies by a precomputed mask already scaled by `1/(1-p)`.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(RadError::dim("dropout", self.shape(a), &[mask.len()]));
        }
        let src = self.value(a);
        let data = src.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(src.shape.clone(), data)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    /// Mean negative log-likelihood of `targets` under the row
    /// distributions in `probs`, over positions where `mask` is true.
    pub fn nll(&mut self, probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || mask.len() != targets.len() {
            return Err(RadError::dim("nll", &shape, &[targets.len(), mask.len()]));
        }
        let v = shape[1];
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(RadError::Contract("nll over fully padded targets".into()));
        }
        let p = self.data(probs);
        let mut total = 0.0;
        for (t, (&y, &keep)) in targets.iter().zip(mask).enumerate() {
            if !keep {
                continue;
            }
            if y >= v {
                return Err(RadError::Vocabulary { id: y, vocab_size: v });
            }
            total -= p[t * v + y].max(LOG_CLAMP).ln();
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Replaces gradients from any
    /// earlier sweep; gradients of shared subexpressions add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(RadError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (r, k) = (sa[0], sa[1]);
                let c = nodes[b.0].value.shape()[1];
                acc(*a, &mut |buf| kernels::add_matmul_bt(buf, g, val(*b), r, k, c));
                acc(*b, &mut |buf| kernels::add_matmul_at(buf, val(*a), g, r, k, c));
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                match bc {
                    Broadcast::Same => {
                        acc(*a, &mut |buf| add_scaled(buf, g, 1.0));
                        acc(*b, &mut |buf| add_scaled(buf, g, sign));
                    }
                    Broadcast::RhsScalar => {
                        acc(*a, &mut |buf| add_scaled(buf, g, 1.0));
                        acc(*b, &mut |buf| buf[0] += sign * g.iter().sum::<f64>());
                    }
                    Broadcast::LhsScalar => {
                        acc(*a, &mut |buf| buf[0] += g.iter().sum::<f64>());
                        acc(*b, &mut |buf| add_scaled(buf, g, sign));
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (val(*a), val(*b));
                match bc {
                    Broadcast::Same => {
                        acc(*a, &mut |buf| {
                            for ((o, gv), y) in buf.iter_mut().zip(g).zip(db) {
                                *o += gv * y;
                            }
                        });
                        acc(*b, &mut |buf| {
                            for ((o, gv), x) in buf.iter_mut().zip(g).zip(da) {
                                *o += gv * x;
                            }
                        });
                    }
                    Broadcast::RhsScalar => {
                        acc(*a, &mut |buf| add_scaled(buf, g, db[0]));
                        acc(*b, &mut |buf| {
                            buf[0] += g.iter().zip(da).map(|(gv, x)| gv * x).sum::<f64>()
                        });
                    }
                    Broadcast::LhsScalar => {
                        acc(*a, &mut |buf| {
                            buf[0] += g.iter().zip(db).map(|(gv, y)| gv * y).sum::<f64>()
                        });
                        acc(*b, &mut |buf| add_scaled(buf, g, da[0]));
                    }
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| add_scaled(buf, g, *c)),
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_scaled(buf, g, 1.0));
                let c = nodes[row.0].value.numel();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(c) {
                        for (o, gv) in buf.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                acc(*gamma, &mut |buf| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            buf[j] += gr[j];
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![0.0; c];
                    for (row, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        let is = inv_std[row];
                        for j in 0..c {
                            buf[row * c + j] += is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xs = val(*a);
                acc(*a, &mut |buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(xs) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Tanh(a) => {
                let ys = out.data();
                acc(*a, &mut |buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(ys) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let ys = out.data();
                acc(*a, &mut |buf| {
                    for ((o, gr), yr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(ys.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CausalMask(a, offset) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for (row, gr) in g.chunks(c).enumerate() {
                        let keep = (offset + row + 1).min(c);
                        for j in 0..keep {
                            buf[row * c + j] += gr[j];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let gt = kernels::transpose(g, r, c);
                acc(*a, &mut |buf| add_scaled(buf, &gt, 1.0));
            }
            Op::SliceCols(a, start, end) => {
                let c = nodes[a.0].value.cols();
                let w = end - start;
                acc(*a, &mut |buf| {
                    for (row, gr) in g.chunks(w.max(1)).enumerate().take(out.rows()) {
                        for j in 0..w {
                            buf[row * c + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut start = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |buf| {
                        for row in 0..out.rows() {
                            for j in 0..w {
                                buf[row * w + j] += g[row * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(*a, &mut |buf| add_scaled(&mut buf[start * c..start * c + g.len()], g, 1.0));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, &mut |buf| add_scaled(buf, &g[start..start + n], 1.0));
                    start += n;
                }
            }
            Op::GatherRows(table, ids) => {
                let c = out.cols();
                acc(*table, &mut |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[id * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |buf| {
                    for ((o, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::Nll {
                probs,
                targets,
                mask,
                count,
            } => {
                let v = nodes[probs.0].value.cols();
                let p = val(*probs);
                acc(*probs, &mut |buf| {
                    for (t, (&y, &keep)) in targets.iter().zip(mask).enumerate() {
                        let pv = p[t * v + y];
                        if keep && pv > LOG_CLAMP {
                            buf[t * v + y] -= g[0] / (*count as f64 * pv);
                        }
                    }
                });
            }
        }
    }
}

fn add_scaled(buf: &mut [f64], g: &[f64], c: f64) {
    for (o, gv) in buf.iter_mut().zip(g) {
        *o += c * gv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(r, c, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let eye = g.constant(mat(2, 2, &[1., 0., 0., 1.]));
        let m = g.constant(mat(2, 2, &[3., -1., 2., 5.]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[3., -1., 2., 5.]);

        let a = g.constant(mat(1, 2, &[1., 2.]));
        let b = g.constant(mat(2, 1, &[3., 4.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut g = Graph::new();
        let t = mat(2, 2, &[1., 2., 3., 4.]);
        let a = g.constant(t.clone());
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), t.data());
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(RadError::Dimension { .. })));
        assert!(matches!(g.mul(a, b), Err(RadError::Dimension { .. })));
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.leaf(&mat(1, 3, &[1., 2., 3.]).with_requires_grad(true));
        let s = g.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
        let p = g.mul(a, s).unwrap();
        let t = g.sum(p);
        g.backward(t).unwrap();
        assert_eq!(g.value(p).data(), &[2., 4., 6.]);
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(a).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0., 0., 0., 1000., 0., -1000.]));
        let s = g.softmax_rows(a).unwrap();
        let d = g.value(s).data();
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((d[3] - 1.0).abs() < 1e-15);
        assert!(d[4] < 1e-300 && d[4] >= 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let a = g.constant(mat(1, 2, &[f64::NAN, 0.]));
        assert!(matches!(g.softmax_rows(a), Err(RadError::Numeric { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(mat(1, 4, &[5., 5., 5., 5.]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn causal_mask_upper_triangle() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 3]));
        let m = g.causal_mask(a, 0).unwrap();
        let d = g.value(m).data();
        let masked: Vec<bool> = d.iter().map(|v| v.is_infinite()).collect();
        assert_eq!(
            masked,
            vec![false, true, true, false, false, true, false, false, false]
        );
    }

    #[test]
    fn gather_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.gather_rows(t, &[1, 4]),
            Err(RadError::Vocabulary { id: 4, vocab_size: 4 })
        ));
        let e = g.gather_rows(t, &[]).unwrap();
        assert_eq!(g.shape(e), &[0, 2]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(a), Err(RadError::Contract(_))));
    }

    #[test]
    fn no_grad_graph_tracks_nothing() {
        let mut g = Graph::no_grad();
        let a = g.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
        let b = g.mul(a, a).unwrap();
        assert!(!g.requires_grad(b));
        g.backward(b).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn nll_all_padded_is_contract_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[2, 2], 0.5));
        assert!(matches!(
            g.nll(p, &[0, 1], &[false, false]),
            Err(RadError::Contract(_))
        ));
    }
}
