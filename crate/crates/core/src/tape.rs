//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes in reverse insertion order, so gradient accumulation
//! order is fixed and results are bitwise reproducible.

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, sigmoid_scalar, squash_from_sq_norm, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Softmax / reduction axis of a matrix. `Rows` normalizes down each column
/// (over the row index); `Cols` normalizes along each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl TryFrom<usize> for Axis {
    type Error = TensorError;

    fn try_from(axis: usize) -> Result<Self, Self::Error> {
        match axis {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(TensorError::InvalidAxis { axis }),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Softmax { x: Var, axis: Axis },
    SquashRateCols(Var),
    AvgPoolCols(Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    DiagScaleCols { x: Var, g: Var },
    ColMean(Var),
    ColStd { x: Var, mean: Vec<T> },
    ColSum(Var),
    ScaleByEntry { x: Var, v: Var, index: usize },
    Sum(Var),
    BceWithLogits { logits: Var, labels: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::SquashRateCols(_) => "squash_rate_cols",
            Op::AvgPoolCols(_) => "avg_pool_cols",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::DiagScaleCols { .. } => "diag_scale_cols",
            Op::ColMean(_) => "col_mean",
            Op::ColStd { .. } => "col_std",
            Op::ColSum(_) => "col_sum",
            Op::ScaleByEntry { .. } => "scale_by_entry",
            Op::Sum(_) => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` when the variable
    /// does not require gradients. Tracked variables the loss does not
    /// depend on get a zero tensor.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Name of the primitive that produced `var`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// A tracked input whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        let name = op.name();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn check(&self, var: Var) -> Result<(), TensorError> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    // ── Primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Op::Matmul(a, b), vec![m, n], out, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let t = self.value(x).transpose();
        let shape = t.shape().to_vec();
        self.push(Op::Transpose(x), shape, t.into_data(), &[x])
    }

    fn zip_same(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.mismatch(op.name(), a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        self.push(op, shape, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Div(a, b), a, b, |x, y| x / y)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Affine { x, scale }, shape, data, &[x])
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.affine(x, -T::one(), T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Sigmoid(x), shape, data, &[x])
    }

    /// Numerically stable softmax along `axis` of the matrix view.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        let (lanes, lane_len, stride_outer, stride_inner) = match axis {
            Axis::Rows => (c, r, 1, c),
            Axis::Cols => (r, c, c, 1),
        };
        if lane_len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        for lane in 0..lanes {
            let base = lane * stride_outer;
            let idx = |k: usize| base + k * stride_inner;
            let max = (0..lane_len).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..lane_len {
                let e = (out[idx(k)] - max).exp();
                out[idx(k)] = e;
                total = total + e;
            }
            for k in 0..lane_len {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::Softmax { x, axis }, shape, out, &[x])
    }

    /// Activation rate `‖x_j‖² / (1 + ‖x_j‖²)` of every column; `d×N → N`.
    pub fn squash_rate_cols(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut norms = vec![T::zero(); c];
        for i in 0..r {
            for (j, n) in norms.iter_mut().enumerate() {
                let v = xv.data()[i * c + j];
                *n = *n + v * v;
            }
        }
        let out = norms.into_iter().map(squash_from_sq_norm).collect();
        self.push(Op::SquashRateCols(x), vec![c], out, &[x])
    }

    /// Mean over columns; `d×N → d`.
    pub fn avg_pool_cols(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let inv = T::one() / T::from_usize(c).unwrap();
        let out = (0..r).map(|i| xv.row(i).iter().copied().sum::<T>() * inv).collect();
        self.push(Op::AvgPoolCols(x), vec![r], out, &[x])
    }

    /// Repeats a length-`d` vector as `n` identical columns.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Result<Var, TensorError> {
        self.check(v)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "broadcast_cols" });
        }
        let vv = self.value(v);
        let d = vv.len();
        let mut out = Vec::with_capacity(d * n);
        for &x in vv.data() {
            out.extend(std::iter::repeat_n(x, n));
        }
        self.push(Op::BroadcastCols(v), vec![d, n], out, &[v])
    }

    /// Repeats a length-`N` vector as `d` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, d: usize) -> Result<Var, TensorError> {
        self.check(v)?;
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "broadcast_rows" });
        }
        let vv = self.value(v);
        let n = vv.len();
        let out = vv.data().repeat(d);
        self.push(Op::BroadcastRows(v), vec![d, n], out, &[v])
    }

    /// `x · diag(g)`: column `j` of `x` scaled by `g[j]`.
    pub fn diag_scale_cols(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(g)?;
        let (xv, gv) = (self.value(x), self.value(g));
        let c = xv.cols();
        if gv.len() != c {
            return Err(self.mismatch("diag_scale_cols", x, g));
        }
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v * gv.data()[k % c])
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Op::DiagScaleCols { x, g }, shape, out, &[x, g])
    }

    /// Per-column mean; `d×N → N`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let mean = col_means(xv);
        let c = xv.cols();
        self.push(Op::ColMean(x), vec![c], mean, &[x])
    }

    /// Per-column population standard deviation `sqrt(var + eps)`; `d×N → N`.
    pub fn col_std(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mean = col_means(xv);
        let mut var = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                let dv = xv.data()[i * c + j] - mean[j];
                var[j] = var[j] + dv * dv;
            }
        }
        let inv = T::one() / T::from_usize(r).unwrap();
        let out = var.into_iter().map(|v| (v * inv + eps).sqrt()).collect();
        self.push(Op::ColStd { x, mean }, vec![c], out, &[x])
    }

    /// Per-column sum; `d×N → N`.
    pub fn col_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + xv.data()[i * c + j];
            }
        }
        self.push(Op::ColSum(x), vec![c], out, &[x])
    }

    /// `v[index] · x`, differentiable in both `x` and the selected entry.
    pub fn scale_by_entry(&mut self, x: Var, v: Var, index: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(v)?;
        let len = self.value(v).len();
        if index >= len {
            return Err(TensorError::IndexOutOfRange { index, len });
        }
        let s = self.value(v).data()[index];
        let xv = self.value(x);
        let out = xv.data().iter().map(|&e| e * s).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::ScaleByEntry { x, v, index }, shape, out, &[x, v])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), vec![1], vec![s], &[x])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`,
    /// evaluated from the logits: `max(z,0) − z·ℓ + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let zv = self.value(logits);
        if zv.len() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: zv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = T::from_usize(labels.len()).unwrap();
        let total: T = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &l)| z.max(T::zero()) - z * l + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total / n],
            &[logits],
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar `loss`. Consumes the tape:
    /// a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.check(loss)?;
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor::new(shape, data).expect("gradient shape mirrors value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |var: Var, contribution: Vec<T>| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contribution) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let tracked = |var: Var| self.nodes[var.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(dy, bv.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if tracked(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), dy, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = dy[i * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if tracked(*a) {
                    acc(*a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                }
                if tracked(*b) {
                    acc(*b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if tracked(*a) {
                    acc(*a, dy.iter().zip(bv).map(|(&g, &v)| g / v).collect());
                }
                if tracked(*b) {
                    acc(
                        *b,
                        dy.iter().zip(bv).zip(y).map(|((&g, &v), &q)| -g * q / v).collect(),
                    );
                }
            }
            Op::Affine { x, scale } => acc(*x, dy.iter().map(|&g| g * *scale).collect()),
            Op::Sigmoid(x) => acc(
                *x,
                dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            ),
            Op::Softmax { x, axis } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut dx = vec![T::zero(); r * c];
                let (lanes, lane_len, so, si) = match axis {
                    Axis::Rows => (c, r, 1, c),
                    Axis::Cols => (r, c, c, 1),
                };
                for lane in 0..lanes {
                    let idx = |k: usize| lane * so + k * si;
                    let dot: T = (0..lane_len).map(|k| dy[idx(k)] * y[idx(k)]).sum();
                    for k in 0..lane_len {
                        dx[idx(k)] = y[idx(k)] * (dy[idx(k)] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SquashRateCols(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                // r_j = s/(1+s) ⇒ ∂r_j/∂x_ij = 2 x_ij / (1+s)² = 2 x_ij (1 − r_j)²
                let mut dx = vec![T::zero(); r * c];
                let two = T::one() + T::one();
                for i in 0..r {
                    for j in 0..c {
                        let one_minus = T::one() - y[j];
                        dx[i * c + j] = dy[j] * two * xv.data()[i * c + j] * one_minus * one_minus;
                    }
                }
                acc(*x, dx);
            }
            Op::AvgPoolCols(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut dx = Vec::with_capacity(r * c);
                for &g in dy.iter().take(r) {
                    dx.extend(std::iter::repeat_n(g * inv, c));
                }
                acc(*x, dx);
            }
            Op::BroadcastCols(v) => {
                let n = node.value.cols();
                let dv = dy.chunks(n).map(|row| row.iter().copied().sum()).collect();
                acc(*v, dv);
            }
            Op::BroadcastRows(v) => {
                let n = node.value.cols();
                let mut dv = vec![T::zero(); n];
                for row in dy.chunks(n) {
                    for (d, &g) in dv.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                acc(*v, dv);
            }
            Op::DiagScaleCols { x, g } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let c = xv.cols();
                if tracked(*x) {
                    acc(
                        *x,
                        dy.iter().enumerate().map(|(k, &d)| d * gv.data()[k % c]).collect(),
                    );
                }
                if tracked(*g) {
                    let mut dg = vec![T::zero(); c];
                    for (k, (&d, &v)) in dy.iter().zip(xv.data()).enumerate() {
                        dg[k % c] = dg[k % c] + d * v;
                    }
                    acc(*g, dg);
                }
            }
            Op::ColMean(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::from_usize(r).unwrap();
                acc(*x, (0..r * c).map(|k| dy[k % c] * inv).collect());
            }
            Op::ColStd { x, mean } => {
                // ∂σ_j/∂x_ij = (x_ij − μ_j) / (d σ_j)
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::from_usize(r).unwrap();
                let dx = (0..r * c)
                    .map(|k| {
                        let j = k % c;
                        dy[j] * (xv.data()[k] - mean[j]) * inv / y[j]
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::ColSum(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                acc(*x, (0..r * c).map(|k| dy[k % c]).collect());
            }
            Op::ScaleByEntry { x, v, index } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let s = vv.data()[*index];
                if tracked(*x) {
                    acc(*x, dy.iter().map(|&g| g * s).collect());
                }
                if tracked(*v) {
                    let mut dv = vec![T::zero(); vv.len()];
                    dv[*index] = dy.iter().zip(xv.data()).map(|(&g, &e)| g * e).sum();
                    acc(*v, dv);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![dy[0]; n]);
            }
            Op::BceWithLogits { logits, labels } => {
                let zv = self.value(*logits);
                let inv = T::one() / T::from_usize(labels.len()).unwrap();
                acc(
                    *logits,
                    zv.data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &l)| dy[0] * (sigmoid_scalar(z) - l) * inv)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

fn col_means<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut mean = vec![T::zero(); c];
    for i in 0..r {
        for (j, m) in mean.iter_mut().enumerate() {
            *m = *m + x.data()[i * c + j];
        }
    }
    let inv = T::one() / T::from_usize(r).unwrap();
    mean.iter_mut().for_each(|m| *m = *m * inv);
    mean
}
