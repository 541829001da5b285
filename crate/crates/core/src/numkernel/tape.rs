use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which slices of a matrix form the distributions of a softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Every row sums to one.
    Row,
    /// Every column sums to one.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    Gelu(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaskedMeanRows { x: Var, mask: Vec<bool>, count: usize },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Rope { x: Var, positions: Vec<f64>, freqs: Vec<f64>, head_dim: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives for reverse-mode differentiation.
///
/// Values are immutable once recorded. Ops whose inputs carry no gradient
/// are stored as constants and skipped by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn distributions(rows: usize, cols: usize, axis: Axis) -> (usize, usize, usize, usize) {
    // (count, len, outer stride, inner stride)
    match axis {
        Axis::Row => (rows, cols, cols, 1),
        Axis::Col => (cols, rows, 1, cols),
    }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let sa = self.mat(a, op)?;
        let sb = self.mat(b, op)?;
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::raw(vec![m, n], out), Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", Tensor::raw(vec![r, c], out), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push("sub", Tensor::raw(vec![r, c], out), Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", Tensor::raw(vec![r, c], out), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.mat(a, "scale")?;
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push("scale", Tensor::raw(vec![r, c], out), Op::Scale(a, s), &[a])
    }

    /// Element-wise product with a constant buffer of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let (r, cols) = self.mat(a, "mul_const")?;
        if c.len() != r * cols {
            return Err(Error::shape("mul_const", "constant length differs"));
        }
        let out = self.data(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        self.push("mul_const", Tensor::raw(vec![r, cols], out), Op::MulConst(a, c), &[a])
    }

    /// Adds a `1×N` row to every row of an `M×N` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "add_row")?;
        let (br, bc) = self.mat(b, "add_row")?;
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", format!("bias [{br}x{bc}] for [{r}x{c}]")));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::raw(vec![r, c], out), Op::AddRow(x, b), &[x, b])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "gelu")?;
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push("gelu", Tensor::raw(vec![r, c], out), Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.mat(x, "softmax")?;
        let mut out = self.data(x).to_vec();
        let (count, len, outer, inner) = distributions(r, c, axis);
        for d in 0..count {
            let idx = |i: usize| d * outer + i * inner;
            let mx = (0..len).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..len {
                let e = (out[idx(i)] - mx).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..len {
                out[idx(i)] /= s;
            }
        }
        self.push("softmax", Tensor::raw(vec![r, c], out), Op::Softmax(x, axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.mat(x, "log_softmax")?;
        let mut out = self.data(x).to_vec();
        let (count, len, outer, inner) = distributions(r, c, axis);
        for d in 0..count {
            let idx = |i: usize| d * outer + i * inner;
            let mx = (0..len).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..len).map(|i| (out[idx(i)] - mx).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[idx(i)] -= lse;
            }
        }
        self.push("log_softmax", Tensor::raw(vec![r, c], out), Op::LogSoftmax(x, axis), &[x])
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// are exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.mat(x, "masked_softmax")?;
        if mask.len() != r * c {
            return Err(Error::shape("masked_softmax", "mask size differs from input"));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::shape("masked_softmax", format!("row {i} is fully masked")));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - mx).exp();
                    s += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= s;
            }
        }
        self.push("masked_softmax", Tensor::raw(vec![r, c], out), Op::MaskedSoftmax(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    /// A constant row maps to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.mat(p, "layer_norm")? != (1, c) {
                return Err(Error::shape("layer_norm", "gain/bias must be 1xN"));
            }
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, inv_std };
        self.push("layer_norm", Tensor::raw(vec![r, c], out), op, &[x, gain, bias])
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat(x, "l2_normalize")?;
        let mut out = self.data(x).to_vec();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            norms[i] = n;
            let d = n.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let op = Op::L2Normalize { x, norms, eps };
        self.push("l2_normalize", Tensor::raw(vec![r, c], out), op, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} exceeds {c} cols")));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::raw(vec![r, len], out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let c = self.mat(parts[0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        self.push("concat_rows", Tensor::raw(vec![rows, c], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let r = self.mat(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("height {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::raw(vec![r, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Mean over the rows where `mask` is true, as a `1×N` row.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.mat(x, "masked_mean_rows")?;
        if mask.len() != r {
            return Err(Error::shape("masked_mean_rows", "mask length differs from rows"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("pooling over zero tokens".into()));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| mask[i]) {
            for (o, v) in out.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= count as f64;
        }
        let op = Op::MaskedMeanRows { x, mask: mask.to_vec(), count };
        self.push("masked_mean_rows", Tensor::raw(vec![1, c], out), op, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ w ⊙ x` as a scalar, for a constant weight buffer.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", "weight length differs"));
        }
        let s = self.data(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum(x, w), &[x])
    }

    /// Rotary embedding over heads of width `head_dim`: pair `k` of row `t`
    /// turns by `positions[t] * freqs[k]`.
    pub fn rope(&mut self, x: Var, positions: &[f64], freqs: &[f64], head_dim: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "rope")?;
        if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
            return Err(Error::shape("rope", format!("width {c} with head_dim {head_dim}")));
        }
        if positions.len() != r || freqs.len() != head_dim / 2 {
            return Err(Error::shape("rope", "positions/frequencies length"));
        }
        let mut out = self.data(x).to_vec();
        kernels::rotate_pairs(&mut out, c, head_dim, positions, freqs, 1.0);
        let op = Op::Rope { x, positions: positions.to_vec(), freqs: freqs.to_vec(), head_dim };
        self.push("rope", Tensor::raw(vec![r, c], out), op, &[x])
    }

    /// Reverse pass from a scalar loss; visits recorded ops in exact reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let taken = if i == loss.0 { grads[i].clone() } else { grads[i].take() };
            let Some(g) = taken else { continue };
            for (v, delta) in self.local_grads(node, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let y = node.value.data();
        let (r, c) = (node.value.rows(), node.value.cols());
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = c;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.data(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.data(*a), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = c;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, self.data(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, self.data(*a), &mut db, m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::raw(vec![r, c], g.to_vec()).transpose().expect("matrix");
                out.push((*a, gt.into_data()));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                out.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
                out.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|v| v * s).collect())),
            Op::MulConst(a, k) => out.push((*a, g.iter().zip(k).map(|(x, y)| x * y).collect())),
            Op::AddRow(x, b) => {
                if self.wants(*b) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, db));
                }
                out.push((*x, g.to_vec()));
            }
            Op::Gelu(x) => {
                let xs = self.data(*x);
                out.push((*x, g.iter().zip(xs).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect()));
            }
            Op::Softmax(x, axis) => {
                let mut dx = vec![0.0; r * c];
                let (count, len, outer, inner) = distributions(r, c, *axis);
                for d in 0..count {
                    let idx = |i: usize| d * outer + i * inner;
                    let s: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = y[idx(i)] * (g[idx(i)] - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x, axis) => {
                let mut dx = vec![0.0; r * c];
                let (count, len, outer, inner) = distributions(r, c, *axis);
                for d in 0..count {
                    let idx = |i: usize| d * outer + i * inner;
                    let s: f64 = (0..len).map(|i| g[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = g[idx(i)] - y[idx(i)].exp() * s;
                    }
                }
                out.push((*x, dx));
            }
            Op::MaskedSoftmax(x) => {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.data(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*bias, db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    let n = c as f64;
                    for i in 0..r {
                        let h = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let m1 = dh.iter().sum::<f64>() / n;
                        let m2 = dot(&dh, h) / n;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    if norms[i] > *eps {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dx[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / eps;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut dx = vec![0.0; src.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let sc = src.cols();
                let mut dx = vec![0.0; src.len()];
                for i in 0..r {
                    dx[i * sc + start..i * sc + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    out.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * c + col..i * c + col + w]);
                    }
                    out.push((*p, dp));
                    col += w;
                }
            }
            Op::MaskedMeanRows { x, mask, count } => {
                let src = self.value(*x);
                let xc = src.cols();
                let mut dx = vec![0.0; src.len()];
                let inv = 1.0 / *count as f64;
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..xc {
                        dx[i * xc + j] = g[j] * inv;
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::WeightedSum(x, w) => out.push((*x, w.iter().map(|v| v * g[0]).collect())),
            Op::Rope { x, positions, freqs, head_dim } => {
                let mut dx = g.to_vec();
                kernels::rotate_pairs(&mut dx, c, *head_dim, positions, freqs, -1.0);
                out.push((*x, dx));
            }
        }
        out
    }
}
