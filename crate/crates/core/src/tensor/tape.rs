use crate::error::{DaanError, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Vec<f64>),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Conv1d { x: usize, w: usize, dilation: usize },
    NormalizeRows { x: usize, inv_std: Vec<f64> },
    NormalizeCols { x: usize, inv_std: Vec<f64> },
    Sum(usize),
    SumSq(usize),
    Sqrt(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only reference handles that already exist.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(DaanError::Shape(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(DaanError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DaanError::Dimension { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(DaanError::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), &[a.0, b.0], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta, "transpose")?;
        let out = transpose_raw(ta.data(), r, c);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a.0), &[a.0], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        self.push(out, Op::Scale(a.0, c), &[a.0], "scale")
    }

    /// Elementwise product with a constant array (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(DaanError::Dimension {
                op: "mul_const",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::MulConst(a.0, mask), &[a.0], "mul_const")
    }

    /// `x[r, c] + b[c]` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (r, c) = dims2(tx, "add_row")?;
        if tb.len() != c {
            return Err(DaanError::Dimension {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tb.data()[j];
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::AddRow(x.0, b.0), &[x.0, b.0], "add_row")
    }

    /// `x[r, c] * s[c]` for every row.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = dims2(tx, "mul_row")?;
        if ts.len() != c {
            return Err(DaanError::Dimension {
                op: "mul_row",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= ts.data()[j];
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::MulRow(x.0, s.0), &[x.0, s.0], "mul_row")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push(out, Op::Relu(a.0), &[a.0], "relu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_finite(ta, "softmax_rows")?;
        let (r, c) = dims2(ta, "softmax_rows")?;
        let out = softmax_rows_raw(ta.data(), r, c);
        self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a.0), &[a.0], "softmax_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push(out, Op::Reshape(a.0), &[a.0], "reshape")
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(DaanError::Shape(format!(
                "slice_cols [{start}, {}) out of range for {c} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&ta.data()[i * c + start..i * c + start + width]);
        }
        self.push(Tensor::matrix(r, width, out)?, Op::SliceCols { x: a.0, start }, &[a.0], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DaanError::Shape("concat_cols of nothing".into()));
        }
        let r = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(DaanError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(idx.clone()), &idx, "concat_cols")
    }

    /// Rows `[start, start + count)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(DaanError::Shape(format!(
                "slice_rows [{start}, {}) out of range for {r} rows",
                start + count
            )));
        }
        let out = ta.data()[start * c..(start + count) * c].to_vec();
        self.push(Tensor::matrix(count, c, out)?, Op::SliceRows { x: a.0, start }, &[a.0], "slice_rows")
    }

    /// Causal dilated 1-D convolution of `x[C_in, T]` with `w[C_out, C_in, K]`.
    ///
    /// Tap `k` reads `x[:, t - k * dilation]`; positions before the start of
    /// the sequence are zero, so the output keeps length `T`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(DaanError::Parameter("dilation must be positive".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let (c_in, t_len) = dims2(tx, "conv1d_causal")?;
        let [c_out, wc_in, k] = match tw.shape() {
            [a, b, c] => [*a, *b, *c],
            s => return Err(DaanError::Shape(format!("conv kernel must be 3-D, got {s:?}"))),
        };
        if wc_in != c_in {
            return Err(DaanError::Dimension {
                op: "conv1d_causal",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let out = conv1d_raw(tx.data(), tw.data(), c_in, t_len, c_out, k, dilation);
        self.push(
            Tensor::matrix(c_out, t_len, out)?,
            Op::Conv1d { x: x.0, w: w.0, dilation },
            &[x.0, w.0],
            "conv1d_causal",
        )
    }

    /// `(x - mean) / sqrt(var + eps)` within each row (biased variance).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta, "normalize_rows")?;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::NormalizeRows { x: a.0, inv_std },
            &[a.0],
            "normalize_rows",
        )
    }

    /// `(x[:, j] - mean[j]) * inv_std[j]` with statistics held constant.
    pub fn normalize_cols(&mut self, a: Var, mean: &[f64], inv_std: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta, "normalize_cols")?;
        if mean.len() != c || inv_std.len() != c {
            return Err(DaanError::Dimension {
                op: "normalize_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![mean.len()],
            });
        }
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (out[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::NormalizeCols { x: a.0, inv_std: inv_std.to_vec() },
            &[a.0],
            "normalize_cols",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0], "sum")
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_sq();
        self.push(Tensor::scalar(s), Op::SumSq(a.0), &[a.0], "sum_sq")
    }

    /// Elementwise square root; the derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&v| v < 0.0) {
            return Err(DaanError::NonFinite { op: "sqrt" });
        }
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.sqrt()).collect())?;
        self.push(out, Op::Sqrt(a.0), &[a.0], "sqrt")
    }

    /// Euclidean distance between two same-shape values.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.sum_sq(d)?;
        self.sqrt(s)
    }

    /// Mean of squared differences.
    pub fn mean_sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let s = self.sum_sq(d)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar.
    ///
    /// Only nodes that both require gradients and are reached from `loss`
    /// are visited, so calling this repeatedly on different per-sample losses
    /// of one shared tape costs roughly the size of each sample's subgraph.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(DaanError::Contract("backward on an empty tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(DaanError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut acc = |i: usize, contrib: Vec<f64>| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::MulConst(a, mask) => acc(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                if wants(*b) {
                    let mut gb = vec![0.0; c];
                    for (idx, v) in g.iter().enumerate() {
                        gb[idx % c] += v;
                    }
                    acc(*b, gb);
                }
                acc(*x, g.to_vec());
            }
            Op::MulRow(x, s) => {
                let (tx, ts) = (val(*x).data(), val(*s).data());
                let c = ts.len();
                if wants(*s) {
                    let mut gs = vec![0.0; c];
                    for (idx, v) in g.iter().enumerate() {
                        gs[idx % c] += v * tx[idx];
                    }
                    acc(*s, gs);
                }
                if wants(*x) {
                    acc(*x, g.iter().enumerate().map(|(idx, v)| v * ts[idx % c]).collect());
                }
            }
            Op::Relu(a) => {
                let ta = val(*a).data();
                acc(*a, g.iter().zip(ta).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect());
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::SliceCols { x, start } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let w = node.value.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Conv1d { x, w, dilation } => {
                let (tx, tw) = (val(*x), val(*w));
                let (c_in, t_len) = (tx.shape()[0], tx.shape()[1]);
                let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for o in 0..c_out {
                    for t in 0..t_len {
                        let go = g[o * t_len + t];
                        if go == 0.0 {
                            continue;
                        }
                        for i in 0..c_in {
                            for tap in 0..k {
                                let back = tap * dilation;
                                if back > t {
                                    break;
                                }
                                let xi = i * t_len + t - back;
                                let wi = (o * c_in + i) * k + tap;
                                gx[xi] += wd[wi] * go;
                                gw[wi] += xd[xi] * go;
                            }
                        }
                    }
                }
                if wants(*x) {
                    acc(*x, gx);
                }
                if wants(*w) {
                    acc(*w, gw);
                }
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = node.value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let mean_g = g[row.clone()].iter().sum::<f64>() / c as f64;
                    let mean_gy =
                        g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in row {
                        gx[j] = inv_std[i] * (g[j] - mean_g - y[j] * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            Op::NormalizeCols { x, inv_std } => {
                let c = inv_std.len();
                acc(*x, g.iter().enumerate().map(|(idx, v)| v * inv_std[idx % c]).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::SumSq(a) => acc(*a, val(*a).data().iter().map(|x| 2.0 * x * g[0]).collect()),
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(v, &s)| if s > 0.0 { v * 0.5 / s } else { 0.0 }).collect());
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &a[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for j in 0..c {
            out[i * c + j] /= total;
        }
    }
    out
}

fn conv1d_raw(x: &[f64], w: &[f64], c_in: usize, t_len: usize, c_out: usize, k: usize, dilation: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * t_len];
    for o in 0..c_out {
        for t in 0..t_len {
            let mut s = 0.0;
            for i in 0..c_in {
                for tap in 0..k {
                    let back = tap * dilation;
                    if back > t {
                        break;
                    }
                    s += w[(o * c_in + i) * k + tap] * x[i * t_len + t - back];
                }
            }
            out[o * t_len + t] = s;
        }
    }
    out
}
