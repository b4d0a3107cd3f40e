use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `op(a) · op(b)` where `op` optionally transposes.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    /// `a[i, :] + row[:]` for every row `i`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[i, :] * row[:]` for every row `i`.
    MulRow(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Pow(Var, T),
    SoftmaxRows(Var),
    LayerNorm {
        a: Var,
        inv_std: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is already topologically sorted and `backward` is a single reverse sweep.
///
/// Gradients from one `backward` call accumulate into per-node buffers; a
/// second call is rejected until [`Graph::zero_grad`] clears them.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    macs: u64,
}

fn view<T>(data: &[T], rows: usize, cols: usize, trans: bool) -> ArrayView2<'_, T> {
    let v = ArrayView2::from_shape((rows, cols), data).expect("buffer matches shape");
    if trans {
        v.reversed_axes()
    } else {
        v
    }
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize, trans: bool) -> ndarray::ArrayViewMut2<'_, T> {
    let v = ndarray::ArrayViewMut2::from_shape((rows, cols), data).expect("buffer matches shape");
    if trans {
        v.reversed_axes()
    } else {
        v
    }
}

/// `out (+)= op(a) · op(b)`, with `a` stored `ar × ac` and `b` stored `br × bc`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [T],
    out_trans: bool,
    beta: T,
) {
    let av = view(a, ar, ac, ta);
    let bv = view(b, br, bc, tb);
    let (m, n) = (av.nrows(), bv.ncols());
    let (or, oc) = if out_trans { (n, m) } else { (m, n) };
    let mut ov = view_mut(out, or, oc, out_trans);
    general_mat_mul(T::one(), &av, &bv, beta, &mut ov);
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            macs: 0,
        }
    }

    /// Multiply-accumulates performed by forward matrix products so far.
    pub fn forward_macs(&self) -> u64 {
        self.macs
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

    fn node_value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.node_value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node_value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient buffer of `v` after `backward`, if any gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zeros when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.node_value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shape(name, &[sa, sb]));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let va = self.node_value(a);
        let vb = self.node_value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        let va = self.node_value(a);
        let vr = self.node_value(row);
        let cols = va.cols();
        if vr.numel() != cols || va.shape().is_empty() {
            return Err(TensorError::shape(name, &[va.shape(), vr.shape()]));
        }
        let r = vr.data();
        let data = va
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, op, rg))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || TensorError::shape("matmul", &[sa, sb]);
        let (ar, ac) = dims2(sa).ok_or_else(err)?;
        let (br, bc) = dims2(sb).ok_or_else(err)?;
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(err());
        }
        self.macs += (m * k1 * n) as u64;
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.node_value(a).data(),
            (ar, ac),
            ta,
            self.node_value(b).data(),
            (br, bc),
            tb,
            &mut out,
            false,
            T::zero(),
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("maximum", a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("minimum", a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    /// Elementwise `x^p`.
    pub fn pow(&mut self, a: Var, p: T) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.node_value(a);
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let va = self.node_value(a);
        let cols = va.cols();
        let n = T::from_usize(cols).expect("cols fits scalar");
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    /// Copies the listed rows of a 2-D tensor, in order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let va = self.node_value(a);
        let (r, c) = dims2(va.shape()).ok_or_else(|| TensorError::shape("gather_rows", &[va.shape()]))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Copies the listed columns of a 2-D tensor, in order.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let va = self.node_value(a);
        let (r, c) = dims2(va.shape()).ok_or_else(|| TensorError::shape("gather_cols", &[va.shape()]))?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * r);
        for i in 0..r {
            let row = va.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(vec![r, idx.len()], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherCols(a, idx.to_vec()), rg))
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let c = self.node_value(*first).cols();
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        if shapes.iter().any(|s| s.len() != 2 || s[1] != c) {
            return Err(TensorError::shape("concat_rows", &shapes));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.node_value(p);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let r = self.node_value(*first).rows();
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        if shapes.iter().any(|s| s.len() != 2 || s[0] != r) {
            return Err(TensorError::shape("concat_cols", &shapes));
        }
        let total: usize = shapes.iter().map(|s| s[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.node_value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.node_value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.node_value(a);
        let (r, c) = dims2(va.shape()).ok_or_else(|| TensorError::shape("transpose", &[va.shape()]))?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node_value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.node_value(a);
        let n = T::from_usize(va.numel().max(1)).expect("numel fits scalar");
        let s = va.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse sweep from a one-element `loss`; fills gradient buffers for every
    /// node on a path from a `param` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.node_value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &gout);
            }
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    /// Adds `f(i)` into the gradient buffer of `target` if it requires one.
    fn acc(&mut self, target: Var, f: impl Fn(usize) -> T) {
        if !self.rg(target) {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let g = self.grads[target.0].get_or_insert_with(|| vec![T::zero(); n]);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = *gi + f(i);
        }
    }

    fn grad_buf(&mut self, target: Var) -> &mut Vec<T> {
        let n = self.nodes[target.0].value.numel();
        self.grads[target.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        // Detach the op while its inputs' buffers are updated.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let out = Var(id);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (ar, ac) = dims2(self.shape(a)).expect("2-D");
                let (br, bc) = dims2(self.shape(b)).expect("2-D");
                let (m, n) = dims2(self.shape(out)).expect("2-D");
                if self.rg(a) {
                    // d op(a) = g · op(b)ᵀ, written into a (transposed if ta).
                    let mut buf = self.grads[a.0].take().unwrap_or_else(|| vec![T::zero(); ar * ac]);
                    gemm(g, (m, n), false, self.node_value(b).data(), (br, bc), !tb, &mut buf, ta, T::one());
                    self.grads[a.0] = Some(buf);
                }
                if self.rg(b) {
                    // d op(b) = op(a)ᵀ · g.
                    let mut buf = self.grads[b.0].take().unwrap_or_else(|| vec![T::zero(); br * bc]);
                    gemm(self.node_value(a).data(), (ar, ac), !ta, g, (m, n), false, &mut buf, tb, T::one());
                    self.grads[b.0] = Some(buf);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, |i| g[i]);
                self.acc(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(*a, |i| g[i]);
                self.acc(*b, |i| -g[i]);
            }
            Op::AddRow(a, row) => {
                self.acc(*a, |i| g[i]);
                if self.rg(*row) {
                    let c = self.node_value(*row).numel();
                    let mut s = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        for (sj, &gj) in s.iter_mut().zip(chunk) {
                            *sj = *sj + gj;
                        }
                    }
                    self.acc(*row, |j| s[j]);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = self.node_value(b).data().to_vec();
                    self.acc(a, |i| g[i] * vb[i]);
                }
                if self.rg(b) {
                    let va = self.node_value(a).data().to_vec();
                    self.acc(b, |i| g[i] * va[i]);
                }
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                let c = self.node_value(row).numel();
                if self.rg(a) {
                    let r = self.node_value(row).data().to_vec();
                    self.acc(a, |i| g[i] * r[i % c]);
                }
                if self.rg(row) {
                    let va = self.node_value(a).data();
                    let mut s = vec![T::zero(); c];
                    for (i, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                        s[i % c] = s[i % c] + gi * ai;
                    }
                    self.acc(row, |j| s[j]);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let vb = self.node_value(b).data().to_vec();
                if self.rg(a) {
                    self.acc(a, |i| g[i] / vb[i]);
                }
                if self.rg(b) {
                    let va = self.node_value(a).data().to_vec();
                    self.acc(b, |i| -g[i] * va[i] / (vb[i] * vb[i]));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |i| g[i] * s);
            }
            Op::AddScalar(a) => self.acc(*a, |i| g[i]),
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(op, Op::Maximum(..));
                let (a, b) = (*a, *b);
                let va = self.node_value(a).data().to_vec();
                let vb = self.node_value(b).data().to_vec();
                let pick_a = |i: usize| if is_max { va[i] >= vb[i] } else { va[i] <= vb[i] };
                self.acc(a, |i| if pick_a(i) { g[i] } else { T::zero() });
                self.acc(b, |i| if pick_a(i) { T::zero() } else { g[i] });
            }
            Op::Relu(a) => {
                let va = self.node_value(*a).data().to_vec();
                self.acc(*a, |i| if va[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Sigmoid(a) => {
                let y = self.node_value(out).data().to_vec();
                self.acc(*a, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::LogSigmoid(a) => {
                let va = self.node_value(*a).data().to_vec();
                self.acc(*a, |i| g[i] * sigmoid(-va[i]));
            }
            Op::Log(a) => {
                let va = self.node_value(*a).data().to_vec();
                self.acc(*a, |i| g[i] / va[i]);
            }
            Op::Exp(a) => {
                let y = self.node_value(out).data().to_vec();
                self.acc(*a, |i| g[i] * y[i]);
            }
            Op::Abs(a) => {
                let va = self.node_value(*a).data().to_vec();
                self.acc(*a, |i| g[i] * sign(va[i]));
            }
            Op::Pow(a, p) => {
                let p = *p;
                let va = self.node_value(*a).data().to_vec();
                self.acc(*a, |i| g[i] * p * va[i].powf(p - T::one()));
            }
            Op::SoftmaxRows(a) => {
                let y = self.node_value(out);
                let c = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.acc(*a, |i| dx[i]);
            }
            Op::LayerNorm { a, inv_std } => {
                let y = self.node_value(out);
                let c = y.cols();
                let n = T::from_usize(c).expect("cols fits scalar");
                let mut dx = vec![T::zero(); y.numel()];
                for (r, ((yr, gr), dr)) in y
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum::<T>() / n;
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.acc(*a, |i| dx[i]);
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let c = self.node_value(*a).cols();
                    let buf = self.grad_buf(*a);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[k * c + j];
                        }
                    }
                }
            }
            Op::GatherCols(a, idx) => {
                if self.rg(*a) {
                    let c = self.node_value(*a).cols();
                    let k = idx.len();
                    let buf = self.grad_buf(*a);
                    for (r, grow) in g.chunks(k).enumerate() {
                        for (&j, &gj) in idx.iter().zip(grow) {
                            buf[r * c + j] = buf[r * c + j] + gj;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.node_value(p).numel();
                    self.acc(p, |i| g[offset + i]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.node_value(out).cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.node_value(p).cols();
                    self.acc(p, |i| g[(i / c) * total + col + i % c]);
                    col += c;
                }
            }
            Op::Reshape(a) => self.acc(*a, |i| g[i]),
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a)).expect("2-D");
                // a[i, j] = out[j, i]
                self.acc(*a, |k| g[(k % c) * r + k / c]);
            }
            Op::Sum(a) => self.acc(*a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.node_value(*a).numel().max(1)).expect("fits");
                self.acc(*a, |_| g[0] / n);
            }
        }
        self.nodes[id].op = op;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln()
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
