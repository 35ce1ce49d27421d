//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! tracked (parameters) or constants; any node with a tracked ancestor is
//! tracked itself. [`Tape::backward`] walks the record in reverse creation
//! order, which is a valid topological order because parents are always
//! created before their children.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::ParamTable;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Normalization tolerance of `kl_div` inputs.
pub const KL_NORM_TOL: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MeanRows(usize),
    SumAll(usize),
    SumCols(usize),
    RowDot(usize, usize),
    MulCol(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    PickSum(usize, Vec<(usize, usize)>),
    KlDiv(usize, Vec<S>),
    KlDivReverse(usize, Vec<S>),
    CosineRows(usize, usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
    param: Option<String>,
    grad: Option<Vec<S>>,
}

/// Recording of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf tracked iff `t.requires_grad`.
    pub fn leaf(&self, mut t: Tensor<S>) -> Var<'_, S> {
        let tracked = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn constant(&self, mut t: Tensor<S>) -> Var<'_, S> {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Leaf holding a copy of a named parameter. Its gradient can later be
    /// folded back with [`ParamTable::accumulate_grads`].
    pub fn param(&self, table: &ParamTable<S>, name: &str) -> Result<Var<'_, S>> {
        let t = table.get(name)?.clone();
        let v = self.leaf(t);
        self.nodes.borrow_mut()[v.id].param = Some(name.to_string());
        Ok(v)
    }

    /// Parameter copied in as an untracked constant.
    pub fn frozen(&self, table: &ParamTable<S>, name: &str) -> Result<Var<'_, S>> {
        Ok(self.constant(table.get(name)?.clone()))
    }

    /// Accumulated gradients of parameter leaves, in creation order.
    pub fn param_grads(&self) -> Vec<(String, Vec<S>)> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match (&n.param, &n.grad) {
                (Some(name), Some(g)) => Some((name.clone(), g.clone())),
                _ => None,
            })
            .collect()
    }

    /// Back-propagates from a 1x1 `loss`, adding into the gradient of every
    /// tracked leaf. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {shape:?}"
            )));
        }
        if !nodes[loss.id].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut nodes[id];
                if matches!(node.op, Op::Leaf) && node.tracked {
                    match &mut node.grad {
                        Some(acc) => kernels::axpy(S::one(), &g, acc),
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'a mut Vec<S>> {
    if !nodes[id].tracked {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).shape();
            let n = val(*b).cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::matmul_t_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = val(*a).shape();
            let n = val(*b).rows();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::matmul_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).shape();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::axpy(S::one(), g, ga);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                kernels::axpy(S::one(), g, gb);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::axpy(S::one(), g, ga);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                kernels::axpy(-S::one(), g, gb);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * bv[i];
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] = gb[i] + g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::axpy(*s, g, ga);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                kernels::axpy(S::one(), g, ga);
            }
        }
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = kernels::dot(y, gr);
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + y[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let c = out.cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let total: S = gr.iter().copied().sum();
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + gr[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).shape();
            let inv = S::one() / S::of_usize(r);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..r {
                    kernels::axpy(inv, g, &mut ga[i * c..(i + 1) * c]);
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for v in ga.iter_mut() {
                    *v = *v + g[0];
                }
            }
        }
        Op::SumCols(a) => {
            let c = val(*a).cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    for v in &mut ga[i * c..(i + 1) * c] {
                        *v = *v + gi;
                    }
                }
            }
        }
        Op::RowDot(a, b) => {
            let c = val(*a).cols();
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    kernels::axpy(gi, &bv[i * c..(i + 1) * c], &mut ga[i * c..(i + 1) * c]);
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    kernels::axpy(gi, &av[i * c..(i + 1) * c], &mut gb[i * c..(i + 1) * c]);
                }
            }
        }
        Op::MulCol(x, col) => {
            let c = val(*x).cols();
            let (xv, cv) = (val(*x).data(), val(*col).data());
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (i, &ci) in cv.iter().enumerate() {
                    kernels::axpy(ci, &g[i * c..(i + 1) * c], &mut gx[i * c..(i + 1) * c]);
                }
            }
            if let Some(gc) = grad_slot(nodes, grads, *col) {
                for i in 0..cv.len() {
                    gc[i] = gc[i] + kernels::dot(&g[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if let Some(gp) = grad_slot(nodes, grads, p) {
                    kernels::axpy(S::one(), &g[offset..offset + len], gp);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if let Some(gp) = grad_slot(nodes, grads, p) {
                    for i in 0..r {
                        let src = &g[i * total + offset..i * total + offset + c];
                        kernels::axpy(S::one(), src, &mut gp[i * c..(i + 1) * c]);
                    }
                }
                offset += c;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = val(*a).cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    kernels::axpy(S::one(), &g[k * c..(k + 1) * c], &mut ga[i * c..(i + 1) * c]);
                }
            }
        }
        Op::SliceCols(a, start) => {
            let src_cols = val(*a).cols();
            let w = out.cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..out.rows() {
                    for j in 0..w {
                        let t = i * src_cols + start + j;
                        ga[t] = ga[t] + g[i * w + j];
                    }
                }
            }
        }
        Op::PickSum(a, cells) => {
            let c = val(*a).cols();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for &(r, col) in cells {
                    ga[r * c + col] = ga[r * c + col] + g[0];
                }
            }
        }
        Op::KlDiv(log_p, q) => {
            if let Some(gl) = grad_slot(nodes, grads, *log_p) {
                for (gi, &qi) in gl.iter_mut().zip(q) {
                    *gi = *gi - g[0] * qi;
                }
            }
        }
        Op::KlDivReverse(log_p, log_q) => {
            let lp = val(*log_p).data();
            if let Some(gl) = grad_slot(nodes, grads, *log_p) {
                for i in 0..lp.len() {
                    let p = lp[i].exp();
                    gl[i] = gl[i] + g[0] * p * (lp[i] - log_q[i] + S::one());
                }
            }
        }
        Op::CosineRows(a, b) => {
            let c = val(*a).cols();
            let (av, bv) = (val(*a).data(), val(*b).data());
            for i in 0..out.rows() {
                let (ar, br) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
                let (na, nb) = (kernels::dot(ar, ar).sqrt(), kernels::dot(br, br).sqrt());
                if na == S::zero() || nb == S::zero() {
                    continue;
                }
                let cos = out.data()[i];
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    let gr = &mut ga[i * c..(i + 1) * c];
                    kernels::axpy(g[i] / (na * nb), br, gr);
                    kernels::axpy(-g[i] * cos / (na * na), ar, gr);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    let gr = &mut gb[i * c..(i + 1) * c];
                    kernels::axpy(g[i] / (na * nb), ar, gr);
                    kernels::axpy(-g[i] * cos / (nb * nb), br, gr);
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    fn with<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let tracked = self.tracked();
        self.tape.push(value, op, tracked)
    }

    fn binary(&self, other: &Var<'t, S>, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.same_tape(other);
        let tracked = self.tracked() || other.tracked();
        self.tape.push(value, op, tracked)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable is recorded on.
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.with(Tensor::clone)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with(Tensor::shape)
    }

    pub fn item(&self) -> Result<S> {
        self.with(Tensor::item)
    }

    /// Gradient accumulated by [`Tape::backward`] on a tracked leaf.
    pub fn grad(&self) -> Option<Tensor<S>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.rows(), node.value.cols(), g.clone()).expect("shape"))
    }

    /// Copy of the value as a fresh constant leaf; no gradient flows back.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.cols() != b.rows() {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = Tensor::zeros(m, n);
            kernels::matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
            out
        };
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.cols() != b.cols() {
                return Err(Error::shape("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = Tensor::zeros(m, n);
            kernels::matmul_t_acc(a.data(), b.data(), out.data_mut(), m, k, n);
            out
        };
        Ok(self.binary(other, value, Op::MatMulT(self.id, other.id)))
    }

    pub fn transpose(&self) -> Var<'t, S> {
        let value = self.with(|a| {
            let (r, c) = a.shape();
            let mut out = Tensor::zeros(c, r);
            for i in 0..r {
                for j in 0..c {
                    out.set(j, i, a.get(i, j));
                }
            }
            out
        });
        self.unary(value, Op::Transpose(self.id))
    }

    fn zip_same(
        &self,
        other: &Var<'t, S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.rows(), a.cols(), data)
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: S) -> Var<'t, S> {
        let value = self.with(|a| {
            Tensor::new(a.rows(), a.cols(), a.data().iter().map(|&x| x * s).collect()).expect("shape")
        });
        self.unary(value, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: S) -> Var<'t, S> {
        let value = self.with(|a| {
            Tensor::new(a.rows(), a.cols(), a.data().iter().map(|&x| x + s).collect()).expect("shape")
        });
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t, S> {
        let value = self.with(|a| {
            let mut out = Tensor::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                kernels::softmax_row(a.row(r), out.row_mut(r));
            }
            out
        });
        self.unary(value, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t, S> {
        let value = self.with(|a| {
            let mut out = Tensor::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                kernels::log_softmax_row(a.row(r), out.row_mut(r));
            }
            out
        });
        self.unary(value, Op::LogSoftmaxRows(self.id))
    }

    /// Column means, `r x d -> 1 x d`.
    pub fn mean_rows(&self) -> Result<Var<'t, S>> {
        let value = self.with(|a| {
            if a.rows() == 0 {
                return Err(Error::Empty("mean_rows"));
            }
            let mut out = Tensor::zeros(1, a.cols());
            for r in 0..a.rows() {
                kernels::axpy(S::one(), a.row(r), out.data_mut());
            }
            let inv = S::one() / S::of_usize(a.rows());
            for v in out.data_mut() {
                *v = *v * inv;
            }
            Ok(out)
        })?;
        Ok(self.unary(value, Op::MeanRows(self.id)))
    }

    pub fn sum(&self) -> Var<'t, S> {
        let value = self.with(|a| Tensor::scalar(a.data().iter().copied().sum()));
        self.unary(value, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, S>> {
        let n = self.with(Tensor::len);
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        Ok(self.sum().scale(S::one() / S::of_usize(n)))
    }

    /// Per-row sums, `r x d -> r x 1`.
    pub fn sum_cols(&self) -> Var<'t, S> {
        let value = self.with(|a| {
            let data = (0..a.rows()).map(|r| a.row(r).iter().copied().sum()).collect();
            Tensor::new(a.rows(), 1, data).expect("shape")
        });
        self.unary(value, Op::SumCols(self.id))
    }

    /// Row-wise inner products, `r x d, r x d -> r x 1`.
    pub fn row_dot(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::shape("row_dot", a.shape(), b.shape()));
            }
            let data = (0..a.rows()).map(|r| kernels::dot(a.row(r), b.row(r))).collect();
            Tensor::new(a.rows(), 1, data)?
        };
        Ok(self.binary(other, value, Op::RowDot(self.id, other.id)))
    }

    /// Scales row `i` of `self` by `col[i]`; `col` is `r x 1`.
    pub fn mul_col(&self, col: &Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, c) = (&nodes[self.id].value, &nodes[col.id].value);
            if c.shape() != (x.rows(), 1) {
                return Err(Error::shape("mul_col", x.shape(), c.shape()));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                let s = c.data()[r];
                for v in out.row_mut(r) {
                    *v = *v * s;
                }
            }
            out.requires_grad = false;
            out
        };
        Ok(self.binary(col, value, Op::MulCol(self.id, col.id)))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t, S>> {
        let value = self.with(|a| {
            if start + width > a.cols() {
                return Err(Error::shape("slice_cols", a.shape(), (a.rows(), start + width)));
            }
            let mut data = Vec::with_capacity(a.rows() * width);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..start + width]);
            }
            Tensor::new(a.rows(), width, data)
        })?;
        Ok(self.unary(value, Op::SliceCols(self.id, start)))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, S>> {
        let value = self.with(|a| {
            if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
                return Err(Error::shape("gather_rows", a.shape(), (bad, a.cols())));
            }
            Ok(a.select_rows(idx))
        })?;
        Ok(self.unary(value, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Sum of the listed `(row, col)` cells.
    pub fn pick_sum(&self, cells: &[(usize, usize)]) -> Result<Var<'t, S>> {
        let value = self.with(|a| {
            let mut total = S::zero();
            for &(r, c) in cells {
                if r >= a.rows() || c >= a.cols() {
                    return Err(Error::shape("pick_sum", a.shape(), (r, c)));
                }
                total = total + a.get(r, c);
            }
            Ok(Tensor::scalar(total))
        })?;
        Ok(self.unary(value, Op::PickSum(self.id, cells.to_vec())))
    }

    /// Row-wise cosine similarity, `r x d, r x d -> r x 1`. A zero-norm row
    /// has similarity 0 and passes no gradient.
    pub fn cosine_rows(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
            }
            let data = (0..a.rows())
                .map(|r| {
                    let (x, y) = (a.row(r), b.row(r));
                    let (nx, ny) = (kernels::dot(x, x).sqrt(), kernels::dot(y, y).sqrt());
                    if nx == S::zero() || ny == S::zero() {
                        S::zero()
                    } else {
                        kernels::dot(x, y) / (nx * ny)
                    }
                })
                .collect();
            Tensor::new(a.rows(), 1, data)?
        };
        Ok(self.binary(other, value, Op::CosineRows(self.id, other.id)))
    }

    /// `sum_rows sum_i q_i (log_q_i - log_p_i)` with `q = exp(log_q)` and
    /// `0 ln 0 = 0`.
    ///
    /// `self` holds row-wise log-probabilities, `log_q` those of a constant
    /// target. Taking the target in log space keeps the divergence exactly 0
    /// when both sides come from the same logits. Each row of `exp(self)` and
    /// of `exp(log_q)` must sum to 1 within [`KL_NORM_TOL`].
    pub fn kl_div(&self, log_q: &Tensor<S>) -> Result<Var<'t, S>> {
        let q = Tensor::new(log_q.rows(), log_q.cols(), log_q.data().iter().map(|v| v.exp()).collect())?;
        let value = self.with(|lp| {
            check_kl_operands(lp, &q)?;
            let mut total = S::zero();
            for ((&l, &lq), &qi) in lp.data().iter().zip(log_q.data()).zip(q.data()) {
                if qi > S::zero() {
                    total = total + qi * (lq - l);
                }
            }
            Ok::<_, Error>(Tensor::scalar(total))
        })?;
        Ok(self.unary(value, Op::KlDiv(self.id, q.into_data())))
    }

    /// `sum_rows sum_i p_i (log_p_i - log_q_i)` where `p = exp(self)`; the
    /// divergence taken in the opposite direction of [`Var::kl_div`], with the
    /// gradient flowing through `p` as well.
    pub fn kl_div_reverse(&self, log_q: &Tensor<S>) -> Result<Var<'t, S>> {
        let value = self.with(|lp| {
            let q = Tensor::new(
                log_q.rows(),
                log_q.cols(),
                log_q.data().iter().map(|v| v.exp()).collect(),
            )?;
            check_kl_operands(lp, &q)?;
            let total = lp
                .data()
                .iter()
                .zip(log_q.data())
                .map(|(&l, &lq)| l.exp() * (l - lq))
                .sum();
            Ok::<_, Error>(Tensor::scalar(total))
        })?;
        Ok(self.unary(value, Op::KlDivReverse(self.id, log_q.data().to_vec())))
    }
}

fn check_kl_operands<S: Scalar>(log_p: &Tensor<S>, q: &Tensor<S>) -> Result<()> {
    if log_p.shape() != q.shape() {
        return Err(Error::shape("kl_div", log_p.shape(), q.shape()));
    }
    let tol = S::of(KL_NORM_TOL);
    for r in 0..q.rows() {
        let p_sum: S = log_p.row(r).iter().map(|v| v.exp()).sum();
        let q_sum: S = q.row(r).iter().copied().sum();
        if (p_sum - S::one()).abs() > tol || (q_sum - S::one()).abs() > tol {
            return Err(Error::Contract(format!(
                "kl_div row {r} not normalized (sum exp(log_p) = {p_sum}, sum q = {q_sum})"
            )));
        }
        if q.row(r).iter().any(|&v| v < S::zero()) {
            return Err(Error::Contract(format!("kl_div row {r} has negative target mass")));
        }
    }
    Ok(())
}

/// Stacks row vectors (or any equal-width matrices) vertically.
pub fn concat_rows<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[first.id].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p);
            let v = &nodes[p.id].value;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", (1, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Tensor::new(rows, cols, data)?
    };
    let tracked = parts.iter().any(Var::tracked);
    Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), tracked))
}

/// Joins equal-height matrices side by side.
pub fn concat_cols<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let rows = nodes[first.id].value.rows();
        let mut cols = 0;
        for p in parts {
            first.same_tape(p);
            let v = &nodes[p.id].value;
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, 1), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                offset += v.cols();
            }
        }
        out
    };
    let tracked = parts.iter().any(Var::tracked);
    Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), tracked))
}
