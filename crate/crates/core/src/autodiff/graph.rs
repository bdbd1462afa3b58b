//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is appended to a flat node list, so node order is already a
//! topological order and `backward` is a single reverse sweep. A graph is
//! single-use: build it, run one backward pass, drop it.

use super::tensor::{dot, matmul, matmul_at, matmul_bt, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Huber(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    NormalizeRows(Var),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    PearsonRows(Var, Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Rows with an L2 norm at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// True when `target` is reachable backwards from `from` through
    /// recorded ops, i.e. a gradient of `from` could flow into `target`.
    pub fn depends_on(&self, from: Var, target: Var) -> bool {
        if from.0 < target.0 {
            return false;
        }
        let mut seen = vec![false; from.0 + 1];
        seen[from.0] = true;
        for i in (target.0..=from.0).rev() {
            if !seen[i] {
                continue;
            }
            if i == target.0 {
                return true;
            }
            for input in self.inputs(i) {
                seen[input.0] = true;
            }
        }
        false
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::PearsonRows(a, b, _) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Huber(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::NormalizeRows(a)
            | Op::MeanRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} @ ({n}x{k2})^T")));
        }
        let out = matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(r, c, data).expect("shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// `a [r,c] + row [1,c]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + {:?}", self.shape(row)),
            ));
        }
        let bias = self.value(row).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&bias).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(r, c, data)?, Op::AddRow(a, row), rg))
    }

    /// Multiply every element of `a` by the `1x1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("mul_scalar", format!("{:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, f: T) -> Var {
        let out = self.value(a).map(|x| x * f);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, f), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_K);
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: T) -> Var {
        let half = T::of(0.5);
        let out = self.value(a).map(|x| {
            if x.abs() <= delta {
                half * x * x
            } else {
                delta * (x.abs() - half * delta)
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Huber(a, delta), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            data.extend(softmax_slice(row));
        }
        let rg = self.rg(a);
        self.push(Tensor::new(r, c, data).expect("shape"), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(r, c, data).expect("shape"),
            Op::LogSoftmaxRows(a),
            rg,
        )
    }

    /// Row-wise log-sum-exp, `[r,c] -> [r,1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .map(logsumexp_slice)
            .collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(r, 1, data).expect("shape"),
            Op::LogSumExpRows(a),
            rg,
        )
    }

    /// Per-row normalization to zero mean and unit variance followed by
    /// an elementwise affine map. `gain` and `bias` are `1 x c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {r}x{c}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let (mean, inv_std) = row_moments(row, eps);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv_std * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(r, c, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            },
            rg,
        ))
    }

    /// Scale each row to unit L2 norm. Zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let n = dot(row, row).sqrt();
            if n.to_f64_lossy() <= ZERO_NORM {
                data.extend(std::iter::repeat_n(T::zero(), c));
            } else {
                data.extend(row.iter().map(|&x| x / n));
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(r, c, data).expect("shape"),
            Op::NormalizeRows(a),
            rg,
        )
    }

    /// Mean over rows, `[r,c] -> [1,c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = vec![T::zero(); c];
        for row in self.value(a).data().chunks(c) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        for o in &mut data {
            *o = *o * inv;
        }
        let rg = self.rg(a);
        self.push(Tensor::new(1, c, data).expect("shape"), Op::MeanRows(a), rg)
    }

    /// Sum over columns, `[r,c] -> [r,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::new(r, 1, data).expect("shape"), Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::of(t.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(r, len, data)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(r, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(total, c, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape(
                "select_rows",
                format!("{rows:?} out of {r} rows"),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(rows.len(), c, data)?,
            Op::SelectRows(a, rows.to_vec()),
            rg,
        ))
    }

    /// Row-wise Pearson distance `1 - corr(p_i, q_i)`, `[r,c] -> [r,1]`.
    ///
    /// A row whose population standard deviation is at or below `eps` in
    /// either input contributes distance 0 and no gradient.
    pub fn pearson_rows(&mut self, p: Var, q: Var, eps: T) -> Result<Var> {
        self.check_same("pearson_rows", p, q)?;
        let (r, _) = self.shape(p);
        let pv = self.value(p);
        let qv = self.value(q);
        let data = (0..r)
            .map(|i| pearson_stats(pv.row(i), qv.row(i), eps).map_or(T::zero(), |s| T::one() - s.corr))
            .collect();
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::new(r, 1, data)?, Op::PearsonRows(p, q, eps), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        let (r, c) = node.value.shape();
                        Some(Tensor::new(r, c, g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let (orow, ocol) = out.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = ocol;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |d| add_into(d, &matmul_bt(g, bv, m, n, k)));
                acc(*b, &mut |d| add_into(d, &matmul_at(av, g, m, k, n)));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = ocol;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |d| add_into(d, &matmul(g, bv, m, n, k)));
                acc(*b, &mut |d| add_into(d, &matmul_at(g, av, m, n, k)));
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(orow, ocol, g.to_vec()).expect("shape").transpose();
                acc(*a, &mut |d| add_into(d, gt.data()));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &bb) in d.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * bb;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &aa) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * aa;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for grow in g.chunks(ocol) {
                        add_into(d, grow);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let av = self.value(*a).data();
                acc(*a, &mut |d| {
                    for (x, &gy) in d.iter_mut().zip(g) {
                        *x = *x + gy * sv;
                    }
                });
                acc(*s, &mut |d| d[0] = d[0] + dot(g, av));
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |d| {
                    for (x, &gy) in d.iter_mut().zip(g) {
                        *x = *x + gy * *f;
                    }
                });
            }
            Op::AddConst(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *x = *x + gy * (T::one() - yy * yy);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let c = T::of(GELU_C);
                let k = T::of(GELU_K);
                let half = T::of(0.5);
                let three = T::of(3.0);
                acc(*a, &mut |d| {
                    for ((dx, &gy), &x) in d.iter_mut().zip(g).zip(xv) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *dx = *dx + gy * (half * (T::one() + t) + half * x * dt);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *x = *x + gy * yy;
                    }
                });
            }
            Op::Huber(a, delta) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| {
                    for ((dx, &gy), &x) in d.iter_mut().zip(g).zip(xv) {
                        let slope = if x.abs() <= *delta {
                            x
                        } else {
                            *delta * x.signum()
                        };
                        *dx = *dx + gy * slope;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_mut(ocol)
                        .zip(g.chunks(ocol))
                        .zip(out.data().chunks(ocol))
                    {
                        let s = dot(grow, yrow);
                        for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx = *dx + y * (gy - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_mut(ocol)
                        .zip(g.chunks(ocol))
                        .zip(out.data().chunks(ocol))
                    {
                        let s = grow.iter().fold(T::zero(), |acc, &x| acc + x);
                        for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx = *dx + gy - y.exp() * s;
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let (_, c) = self.shape(*a);
                let xv = self.value(*a).data();
                acc(*a, &mut |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(c).zip(xv.chunks(c)).enumerate() {
                        let p = softmax_slice(xrow);
                        for (dx, &pp) in drow.iter_mut().zip(&p) {
                            *dx = *dx + g[r] * pp;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            } => {
                let c = ocol;
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let cf = T::of(c as f64);
                let mut dx_all = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for ((xrow, grow), dxrow) in xv
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(dx_all.chunks_mut(c))
                {
                    let (mean, inv_std) = row_moments(xrow, *eps);
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&gy, &gg)| gy * gg).collect();
                    let mean_dxhat = dxhat.iter().fold(T::zero(), |a, &b| a + b) / cf;
                    let mean_dxhat_xhat = dot(&dxhat, &xhat) / cf;
                    for j in 0..c {
                        dxrow[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx_all));
                acc(*gain, &mut |d| add_into(d, &dgain));
                acc(*bias, &mut |d| add_into(d, &dbias));
            }
            Op::NormalizeRows(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| {
                    for (((drow, grow), xrow), yrow) in d
                        .chunks_mut(ocol)
                        .zip(g.chunks(ocol))
                        .zip(xv.chunks(ocol))
                        .zip(out.data().chunks(ocol))
                    {
                        let n = dot(xrow, xrow).sqrt();
                        if n.to_f64_lossy() <= ZERO_NORM {
                            continue;
                        }
                        let proj = dot(yrow, grow);
                        for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx = *dx + (gy - y * proj) / n;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = T::one() / T::of(r as f64);
                acc(*a, &mut |d| {
                    for drow in d.chunks_mut(c) {
                        for (dx, &gy) in drow.iter_mut().zip(g) {
                            *dx = *dx + gy * inv;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                let (_, c) = self.shape(*a);
                acc(*a, &mut |d| {
                    for (drow, &gy) in d.chunks_mut(c).zip(g) {
                        for dx in drow {
                            *dx = *dx + gy;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| {
                for dx in d {
                    *dx = *dx + g[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = T::of(self.value(*a).len() as f64);
                acc(*a, &mut |d| {
                    for dx in d {
                        *dx = *dx + g[0] / n;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (_, c) = self.shape(*a);
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(ocol)) {
                        add_into(&mut drow[*start..*start + ocol], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, pc) = self.shape(p);
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(pc).zip(g.chunks(ocol)) {
                            add_into(drow, &grow[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectRows(a, rows) => {
                let (_, c) = self.shape(*a);
                acc(*a, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::PearsonRows(p, q, eps) => {
                let (r, c) = self.shape(*p);
                let pv = self.value(*p);
                let qv = self.value(*q);
                let mut dp = vec![T::zero(); r * c];
                let mut dq = vec![T::zero(); r * c];
                for i in 0..r {
                    let Some(s) = pearson_stats(pv.row(i), qv.row(i), *eps) else {
                        continue;
                    };
                    let denom = (s.spp * s.sqq).sqrt();
                    // d(1 - corr)/dp_k = -(qc_k / denom - corr * pc_k / spp)
                    for k in 0..c {
                        dp[i * c + k] = -g[i] * (s.qc[k] / denom - s.corr * s.pc[k] / s.spp);
                        dq[i * c + k] = -g[i] * (s.pc[k] / denom - s.corr * s.qc[k] / s.sqq);
                    }
                }
                acc(*p, &mut |d| add_into(d, &dp));
                acc(*q, &mut |d| add_into(d, &dq));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf, or `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) struct PearsonStats<T> {
    pub pc: Vec<T>,
    pub qc: Vec<T>,
    pub spp: T,
    pub sqq: T,
    pub corr: T,
}

/// Centered vectors and sums of squares, or `None` for a degenerate
/// (near-constant) input.
pub(crate) fn pearson_stats<T: Scalar>(p: &[T], q: &[T], eps: T) -> Option<PearsonStats<T>> {
    let n = T::of(p.len() as f64);
    let mp = p.iter().fold(T::zero(), |a, &b| a + b) / n;
    let mq = q.iter().fold(T::zero(), |a, &b| a + b) / n;
    let pc: Vec<T> = p.iter().map(|&x| x - mp).collect();
    let qc: Vec<T> = q.iter().map(|&x| x - mq).collect();
    let spp = dot(&pc, &pc);
    let sqq = dot(&qc, &qc);
    if (spp / n).sqrt() <= eps || (sqq / n).sqrt() <= eps {
        return None;
    }
    let corr = dot(&pc, &qc) / (spp * sqq).sqrt();
    Some(PearsonStats {
        pc,
        qc,
        spp,
        sqq,
        corr,
    })
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn softmax_slice<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn logsumexp_slice<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let sum = row.iter().fold(T::zero(), |a, &x| a + (x - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[1.0, -2.0, 5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_product_gradients_swap_operands() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let y = g.param(t(1, 2, &[3.0, 4.0]));
        let xy = g.mul(x, y).unwrap();
        let loss = g.sum(xy);
        assert_eq!(g.value(loss).item(), 11.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_tensor_accumulates_branch_gradients() {
        // loss = sum(x*x) + sum(3x) -> grad = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[1.0, -1.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let a = g.sum(sq);
        let b = g.sum(lin);
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 1.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(1, 2, &[1.0, 2.0]));
        let x = g.param(t(1, 2, &[3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(g.depends_on(loss, c));
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 2, &[1000.0, 1000.0]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pearson_constant_row_is_zero_distance() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(1, 3, &[1.0 / 3.0; 3]));
        let q = g.param(t(1, 3, &[0.2, 0.3, 0.5]));
        let d = g.pearson_rows(p, q, 1e-8).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        let loss = g.sum(d);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rows_keeps_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        let y = g.normalize_rows(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(&grads.get(x).unwrap().data()[..2], &[0.0, 0.0]);
    }
}
