//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse and
//! returns the gradient of that node with respect to every node that
//! requires one. Graphs are cheap, single-use and not shared between
//! threads; data-parallel training builds one graph per sample.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    MeanRows(Var),
    Sum(Var),
    L2Norm(Var),
    L1Norm(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    ReverseGrad(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Marker index for [`Graph::gather`] entries that produce a zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    fn row_broadcast(&self, x: Var, row: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "broadcast operand must be a row");
        assert_eq!(xv.cols(), rv.cols(), "broadcast width mismatch");
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rv.data()[i % cols]))
            .collect();
        Tensor::from_vec(xv.rows(), cols, data).expect("same shape")
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.row_broadcast(x, row, |p, q| p + q);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn sub_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.row_broadcast(x, row, |p, q| p - q);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::SubRow(x, row), rg)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.row_broadcast(x, row, |p, q| p * q);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.affine(x, k, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        let rg = self.rg(x);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through only for
    /// inputs inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..xv.cols() {
                let e = out.get(r, c);
                out.set(r, c, e / denom);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row layer normalization with learnable `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gain), self.value(bias));
        let n = T::of(cols as f64);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Euclidean norm of all entries. The gradient at the origin is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).l2_norm());
        let rg = self.rg(x);
        self.push(value, Op::L2Norm(x), rg)
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        let rg = self.rg(x);
        self.push(value, Op::L1Norm(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let value = Tensor::from_vec(xv.rows(), width, data).expect("slice shape");
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn slice_row(&mut self, x: Var, row: usize) -> Var {
        let cols = self.value(x).cols();
        let idx = (0..cols).map(|c| row * cols + c).collect();
        self.gather(x, idx, 1, cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::from_vec(rows, cols, data).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Builds a `rows × cols` tensor whose `i`-th entry is the flat entry
    /// `index[i]` of `x`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, x: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] })
            .collect();
        let value = Tensor::from_vec(rows, cols, data).expect("gather shape");
        let rg = self.rg(x);
        self.push(value, Op::Gather(x, index), rg)
    }

    /// Gradient reversal: identity on the forward pass, multiplies the
    /// incoming gradient by `-lambda` on the backward pass.
    pub fn reverse_grad(&mut self, x: Var, lambda: T) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::ReverseGrad(x, lambda), rg)
    }

    /// Reverse-mode sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, hadamard(g, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                if self.rg(*r) {
                    acc(*r, column_sums(g));
                }
            }
            Op::SubRow(x, r) => {
                acc(*x, g.clone());
                if self.rg(*r) {
                    acc(*r, column_sums(g).map(|v| -v));
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let cols = xv.cols();
                if self.rg(*x) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * rv.data()[i % cols])
                        .collect();
                    acc(*x, Tensor::from_vec(g.rows(), cols, data).expect("shape"));
                }
                if self.rg(*r) {
                    acc(*r, column_sums(&hadamard(g, xv)));
                }
            }
            Op::Affine(x, k) => acc(*x, g.map(|v| v * *k)),
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::Ln(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                acc(*x, Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::Exp(x) => acc(*x, hadamard(g, y)),
            Op::Clamp(x, lo, hi) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                acc(*x, Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::SoftmaxRows(x) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        out.set(r, c, yr[c] * (gr[c] - inner));
                    }
                }
                acc(*x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*gain) {
                    acc(*gain, column_sums(&hadamard(g, xhat)));
                }
                if self.rg(*bias) {
                    acc(*bias, column_sums(g));
                }
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.data()[c];
                            sum_d += d;
                            sum_dh += d * xhat.get(r, c);
                        }
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.data()[c];
                            let v = inv_std[r] / n * (n * d - sum_d - xhat.get(r, c) * sum_dh);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = T::one() / T::of(xv.rows() as f64);
                let mut out = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for c in 0..xv.cols() {
                        out.set(r, c, g.data()[c] * inv);
                    }
                }
                acc(*x, out);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.value(*x).shape();
                acc(*x, Tensor::filled(rows, cols, g.item()));
            }
            Op::L2Norm(x) => {
                let norm = y.item();
                let xv = self.value(*x);
                if norm > T::zero() {
                    let k = g.item() / norm;
                    acc(*x, xv.map(|v| v * k));
                } else {
                    acc(*x, Tensor::zeros(xv.rows(), xv.cols()));
                }
            }
            Op::L1Norm(x) => {
                let k = g.item();
                acc(
                    *x,
                    self.value(*x).map(|v| {
                        if v > T::zero() {
                            k
                        } else if v < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut out = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        out.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*x, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, Tensor::from_vec(g.rows(), w, data).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(p, Tensor::from_vec(rows, cols, data).expect("shape"));
                    }
                    offset += rows;
                }
            }
            Op::Gather(x, index) => {
                let (rows, cols) = self.value(*x).shape();
                let mut out = Tensor::zeros(rows, cols);
                let buf = out.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        buf[i] += gv;
                    }
                }
                acc(*x, out);
            }
            Op::ReverseGrad(x, lambda) => {
                let k = -*lambda;
                acc(*x, g.map(|v| v * k));
            }
        }
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central finite differences of `f` with respect to every entry of
    /// each input, compared with the tape gradient.
    fn gradcheck(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);

        let eval = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "input {k} entry {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, w) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 3, 2));
        gradcheck(vec![a, b, w], |g, v| {
            let p = g.matmul(v[0], v[1]);
            let q = g.mul(p, v[2]);
            g.sum(q)
        });
    }

    #[test]
    fn matmul_nt_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, w) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 3, 5));
        gradcheck(vec![a, b, w], |g, v| {
            let s = g.matmul_nt(v[0], v[1]);
            let p = g.softmax_rows(s);
            let q = g.mul(p, v[2]);
            g.sum(q)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, gain, bias, w) = (
            random(&mut rng, 4, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 4, 5),
        );
        gradcheck(vec![x, gain, bias, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let q = g.mul(y, v[3]);
            g.sum(q)
        });
    }

    #[test]
    fn broadcast_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, r, s) = (random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        gradcheck(vec![x, r, s], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let b = g.mul_row(a, v[2]);
            let c = g.sub_row(b, v[1]);
            let m = g.mean_rows(c);
            let centred = g.sub_row(c, m);
            let sq = g.mul(centred, centred);
            let var = g.mean_rows(sq);
            let n1 = g.l2_norm(var);
            let n2 = g.l2_norm(m);
            let t = g.add(n1, n2);
            let e = g.exp(t);
            g.affine(e, 0.5, 1.0)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y, w) = (random(&mut rng, 2, 6), random(&mut rng, 1, 3), random(&mut rng, 5, 3));
        gradcheck(vec![x, y, w], |g, v| {
            let a = g.slice_cols(v[0], 1, 3);
            let b = g.slice_cols(v[0], 3, 3);
            let c = g.concat_rows(&[a, v[1], b]);
            let d = g.concat_cols(&[c, c]);
            let r = g.slice_row(d, 1);
            let e = g.gather(v[0], vec![0, GATHER_ZERO, 5, 7, 0, 11], 2, 3);
            let q = g.mul(c, v[2]);
            let s1 = g.sum(q);
            let s2 = g.sum(r);
            let s3 = g.l1_norm(e);
            let relu = g.relu(b);
            let s4 = g.sum(relu);
            let t = g.add(s1, s2);
            let t = g.add(t, s3);
            g.add(t, s4)
        });
    }

    #[test]
    fn log_and_clamp_gradients() {
        let x = Tensor::from_vec(1, 4, vec![0.2, 0.5, 0.7, 0.95]).unwrap();
        gradcheck(vec![x], |g, v| {
            let c = g.clamp(v[0], 0.1, 0.9);
            let l = g.ln(c);
            let om = g.affine(c, -1.0, 1.0);
            let l2 = g.ln(om);
            let s = g.add(l, l2);
            g.sum(s)
        });
    }

    #[test]
    fn reverse_grad_is_identity_forward_and_negates_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::row_vector(vec![1.5, -2.0]));
        let r = g.reverse_grad(x, 2.0);
        assert_eq!(g.value(r), g.value(x));
        let s = g.sum(r);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[-2.0, -2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(3.0));
        let x = g.variable(Tensor::scalar(2.0));
        let p = g.mul(c, x);
        let grads = g.backward(p);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }
}
