use super::kernels;
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }
}

/// Backward rule for an operation defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns `∂loss/∂input` for every input whose `needs[k]` is true
    /// (entries for the others are ignored and may be `None`).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    MulConst(usize, Tensor<T>),
    Affine(usize, T),
    MatMul(usize, usize),
    MatMulBT(usize, usize),
    Softplus(usize, T),
    /// Softplus whose derivative is the recorded `σ(βx)` node.
    SoftplusFrom(usize, usize),
    SigmoidScaled(usize, T),
    Relu(usize),
    Exp(usize),
    Square(usize),
    SumAll(usize),
    SumCols(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    RowNorm(usize),
    Softmax(usize),
    StraightThrough(usize),
    Inject(usize, Tensor<T>),
    Custom(Vec<usize>, Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations in topological order for reverse-mode
/// differentiation.
///
/// Every operation appends a node; [`Tape::backward`] walks them in
/// reverse, so gradient accumulation order is fixed by construction.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::param`]; `None` when unreachable.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| {
            let (r, c) = self.shapes[var.id];
            Tensor::zeros(r, c)
        })
    }
}

impl<T: Real> Tape<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let var = Var {
            id: self.nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            a.shape(),
            b.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            Tensor::from_vec(
                a.rows,
                a.cols,
                x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
            )
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T + Sync + Send, op: Op<T>) -> Var {
        let value = kernels::map(self.value(a), f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        self.zip(a, b, |p, q| p + q, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        self.zip(a, b, |p, q| p - q, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        self.zip(a, b, |p, q| p * q, Op::Mul(a.id, b.id))
    }

    /// `a[r, c] + row[0, c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.shape(), (1, a.cols), "add_row: bad row shape");
        let value = kernels::broadcast_row(self.value(a), self.value(row), |p, q| p + q);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a.id, row.id), rg)
    }

    /// `a[r, c] * row[0, c]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.shape(), (1, a.cols), "mul_row: bad row shape");
        let value = kernels::broadcast_row(self.value(a), self.value(row), |p, q| p * q);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a.id, row.id), rg)
    }

    /// `a[r, c] + col[r, 0]`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(col.shape(), (a.rows, 1), "add_col: bad column shape");
        let value = kernels::broadcast_col(self.value(a), self.value(col), |p, q| p + q);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::AddCol(a.id, col.id), rg)
    }

    /// `a[r, c] * col[r, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(col.shape(), (a.rows, 1), "mul_col: bad column shape");
        let value = kernels::broadcast_col(self.value(a), self.value(col), |p, q| p * q);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a.id, col.id), rg)
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, k: Tensor<T>) -> Var {
        assert_eq!(a.shape(), k.shape(), "mul_const: shape mismatch");
        let value = Tensor::from_vec(
            a.rows,
            a.cols,
            self.value(a)
                .data()
                .iter()
                .zip(k.data())
                .map(|(&p, &q)| p * q)
                .collect(),
        );
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a.id, k), rg)
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Var {
        self.unary(a, move |v| scale * v + offset, Op::Affine(a.id, scale))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.affine(a, k, T::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::zero())
    }

    /// `a[r × k] · b[k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul: inner dimensions differ");
        let value = kernels::matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a.id, b.id), rg)
    }

    /// `a[r × n] · b[k × n]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.cols, "matmul_bt: inner dimensions differ");
        let value = kernels::matmul_bt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBT(a.id, b.id), rg)
    }

    /// `softplus_β(x) = ln(1 + e^{βx}) / β`.
    pub fn softplus(&mut self, a: Var, beta: T) -> Var {
        self.unary(a, move |v| kernels::softplus(v, beta), Op::Softplus(a.id, beta))
    }

    /// `(softplus_β(x), σ(βx))` with one exponential per element; the
    /// softplus backward reuses the sigmoid.
    pub fn softplus_sigmoid(&mut self, a: Var, beta: T) -> (Var, Var) {
        let s = self.sigmoid_scaled(a, beta);
        let value = kernels::zip(self.value(a), self.value(s), move |x, s| {
            let z = beta * x;
            if z > T::of(20.0) {
                x
            } else if z >= T::zero() {
                (z - s.ln()) / beta
            } else {
                -(-s).ln_1p() / beta
            }
        });
        let rg = self.rg(a);
        (self.push(value, Op::SoftplusFrom(a.id, s.id), rg), s)
    }

    /// `σ(βx)`.
    pub fn sigmoid_scaled(&mut self, a: Var, beta: T) -> Var {
        self.unary(
            a,
            move |v| kernels::sigmoid(beta * v),
            Op::SigmoidScaled(a.id, beta),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.sigmoid_scaled(a, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a.id))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a.id))
    }

    /// Sum of all elements, as a `1 × 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.value(a));
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.id), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = a.rows * a.cols;
        let s = self.sum(a);
        if n == 0 {
            return s;
        }
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Per-row sums: `[r × c] → [r × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_vec(a.rows, 1, (0..a.rows).map(|r| x.row(r).iter().copied().sum()).collect());
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a.id), rg)
    }

    /// Horizontal concatenation of equal-height tensors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols: row counts differ");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let src = self.value(*p);
            for r in 0..rows {
                value.row_mut(r)[off..off + p.cols].copy_from_slice(src.row(r));
            }
            off += p.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols, "slice_cols out of range");
        let src = self.value(a);
        let mut value = Tensor::zeros(a.rows, len);
        for r in 0..a.rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a.id, start), rg)
    }

    /// Euclidean norm of each row: `[r × c] → [r × 1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_vec(
            a.rows,
            1,
            (0..a.rows)
                .map(|r| x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect(),
        );
        let rg = self.rg(a);
        self.push(value, Op::RowNorm(a.id), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let row = x.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = value.row_mut(r);
            let mut z = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o = *o / z;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a.id), rg)
    }

    /// Forward value `hard`, backward gradient routed to `soft` unchanged:
    /// `hard + (soft − sg[soft])`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var, AutodiffError> {
        if hard.shape() != soft.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "straight_through",
                expected: soft.shape(),
                found: hard.shape(),
            });
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft.id), rg))
    }

    /// Scalar pseudo-loss `Σ sg[residual] ⊙ output` whose gradient with
    /// respect to anything upstream of `output` is `residualᵀ ∂output/∂Θ`.
    pub fn inject_gradient(&mut self, output: Var, residual: Tensor<T>) -> Result<Var, AutodiffError> {
        if residual.shape() != output.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "inject_gradient",
                expected: output.shape(),
                found: residual.shape(),
            });
        }
        let v: T = self
            .value(output)
            .data()
            .iter()
            .zip(residual.data())
            .map(|(&o, &r)| o * r)
            .sum();
        let rg = self.rg(output);
        Ok(self.push(Tensor::scalar(v), Op::Inject(output.id, residual), rg))
    }

    /// Records an externally defined operation whose forward `value` the caller computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(value, Op::Custom(inputs.iter().map(|v| v.id).collect(), op), rg)
    }

    /// Reverse sweep from the scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if loss.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(loss.shape()));
        }
        self.consumed = true;
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.id].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let val = |i: usize| &nodes[i].value;
        let need = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, t: Tensor<T>| {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(prev) => prev.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, kernels::zip(g, val(*b), |p, q| p * q));
                }
                if need(*b) {
                    acc(*b, kernels::zip(g, val(*a), |p, q| p * q));
                }
            }
            Op::AddRow(a, r) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*r) {
                    acc(*r, kernels::col_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                if need(*a) {
                    acc(*a, kernels::broadcast_row(g, val(*r), |p, q| p * q));
                }
                if need(*r) {
                    acc(*r, kernels::col_sums(&kernels::zip(g, val(*a), |p, q| p * q)));
                }
            }
            Op::AddCol(a, c) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*c) {
                    acc(*c, kernels::row_sums(g));
                }
            }
            Op::MulCol(a, c) => {
                if need(*a) {
                    acc(*a, kernels::broadcast_col(g, val(*c), |p, q| p * q));
                }
                if need(*c) {
                    acc(*c, kernels::row_sums(&kernels::zip(g, val(*a), |p, q| p * q)));
                }
            }
            Op::MulConst(a, k) => acc(*a, kernels::zip(g, k, |p, q| p * q)),
            Op::Affine(a, s) => {
                let s = *s;
                acc(*a, kernels::map(g, move |v| v * s));
            }
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, kernels::matmul_bt(g, val(*b)));
                }
                if need(*b) {
                    acc(*b, kernels::matmul_at(val(*a), g));
                }
            }
            Op::MatMulBT(a, b) => {
                // z = a·bᵀ: da = g·b, db = gᵀ·a
                if need(*a) {
                    acc(*a, kernels::matmul(g, val(*b)));
                }
                if need(*b) {
                    acc(*b, kernels::matmul_at(g, val(*a)));
                }
            }
            Op::Softplus(a, beta) => {
                let beta = *beta;
                acc(*a, kernels::zip(g, val(*a), move |p, x| p * kernels::sigmoid(beta * x)));
            }
            Op::SoftplusFrom(a, s) => acc(*a, kernels::zip(g, val(*s), |p, s| p * s)),
            Op::SigmoidScaled(a, beta) => {
                let beta = *beta;
                acc(
                    *a,
                    kernels::zip(g, &node.value, move |p, s| p * beta * s * (T::one() - s)),
                );
            }
            Op::Relu(a) => acc(
                *a,
                kernels::zip(g, val(*a), |p, x| if x > T::zero() { p } else { T::zero() }),
            ),
            Op::Exp(a) => acc(*a, kernels::zip(g, &node.value, |p, y| p * y)),
            Op::Square(a) => {
                let two = T::of(2.0);
                acc(*a, kernels::zip(g, val(*a), move |p, x| two * p * x));
            }
            Op::SumAll(a) => {
                let (r, c) = nodes[*a].value.shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.at(r, 0);
                    out.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                acc(*a, out);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = nodes[p].value.cols();
                    if need(p) {
                        let mut part = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, part);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = nodes[*a].value.shape();
                let mut full = Tensor::zeros(rows, cols);
                let len = g.cols();
                for r in 0..rows {
                    full.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(*a, full);
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = y.at(r, 0);
                    if n > T::zero() {
                        let k = g.at(r, 0) / n;
                        for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = k * v;
                        }
                    }
                }
                acc(*a, out);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut out = Tensor::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: T = g.row(r).iter().zip(s.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(s.row(r)) {
                        *o = q * (p - dot);
                    }
                }
                acc(*a, out);
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
            Op::Inject(out, residual) => {
                let k = g.item();
                acc(*out, kernels::map(residual, move |v| v * k));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&i| need(i)).collect();
                let out = op.backward(&ins, &node.value, g, &needs);
                for ((&i, n), gi) in inputs.iter().zip(&needs).zip(out) {
                    if *n {
                        if let Some(gi) = gi {
                            acc(i, gi);
                        }
                    }
                }
            }
        }
    }
}
