//! Reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto an immutable-once-built node:
//! forward values are computed eagerly at construction, and every non-leaf
//! node records the operation and parent handles that produced it. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph once in
//! reverse topological order and *accumulates* gradients into the
//! persistent `.grad` buffers of leaf tensors created with
//! [`Tensor::param`]; running backward twice therefore doubles the stored
//! gradients, which is what gradient accumulation over a batch relies on.
//!
//! Graph construction and backward are single-threaded; the kernels a node
//! calls into may fork internally (see [`crate::kernels`]) without
//! affecting results. Intermediate adjoints live in a side table for the
//! duration of one backward call and are dropped afterwards, so only
//! parameters ever hold persistent gradient state.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::kernels;
use crate::scalar::Scalar;

const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    Add(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    /// x[r, d] + row[d] broadcast down the rows.
    AddRow(Tensor<F>, Tensor<F>),
    /// x[r, d] * row[d] broadcast down the rows.
    MulRow(Tensor<F>, Tensor<F>),
    AddScalar(Tensor<F>, F),
    Scale(Tensor<F>, F),
    MatMul(Tensor<F>, Tensor<F>),
    Gelu(Tensor<F>),
    /// Max-subtracted softmax over the last axis.
    Softmax(Tensor<F>),
    /// Parameter-free normalization over the last axis.
    LayerNorm(Tensor<F>),
    Concat {
        parts: Vec<Tensor<F>>,
        axis: usize,
    },
    Slice {
        x: Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Tensor<F>),
    Transpose(Tensor<F>),
    /// Rows of `table` gathered by index; gradients scatter-add back.
    Embed {
        table: Tensor<F>,
        ids: Vec<usize>,
    },
    /// Mean squared error over all elements; output shape [1].
    Mse(Tensor<F>, Tensor<F>),
}

impl<F: Scalar> Op<F> {
    fn parents(&self) -> Vec<&Tensor<F>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![a, b]
            }
            Op::MatMul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::AddScalar(a, _) | Op::Scale(a, _) => vec![a],
            Op::Gelu(a) | Op::Softmax(a) | Op::LayerNorm(a) | Op::Reshape(a) | Op::Transpose(a) => {
                vec![a]
            }
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Slice { x, .. } => vec![x],
            Op::Embed { table, .. } => vec![table],
        }
    }
}

struct Inner<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    /// True if this node or any ancestor requires grad; backward prunes
    /// subgraphs where this is false.
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) so that
/// flat index = (o * axis_len + a) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of rank {}", shape.len());
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Tensor<F> {
    fn build(data: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Op<F>) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} vs shape {:?}",
            data.len(),
            shape
        );
        let needs_grad = requires_grad || op.parents().iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn new(data: Vec<F>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), false, Op::Leaf)
    }

    /// Trainable leaf with a persistent gradient buffer.
    pub fn param(data: Vec<F>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), true, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![F::zero(); numel(shape)], shape)
    }

    pub fn scalar(v: F) -> Self {
        Self::new(vec![v], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.inner.shape.len(), 2, "rows() needs rank 2");
        self.inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.inner.shape.len(), 2, "cols() needs rank 2");
        self.inner.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.inner.data.borrow()
    }

    /// In-place mutation is only legitimate for leaves (optimizer updates,
    /// checkpoint loading); non-leaf values are derived and must not drift
    /// from what the tape recorded.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        assert!(
            matches!(self.inner.op, Op::Leaf),
            "data_mut on non-leaf tensor"
        );
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> *const Inner<F> {
        Rc::as_ptr(&self.inner)
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let mut out = vec![F::zero(); self.len()];
        kernels::zip_into(&self.data(), &other.data(), &mut out, |a, b| a + b);
        Tensor::build(
            out,
            self.shape().to_vec(),
            false,
            Op::Add(self.clone(), other.clone()),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let mut out = vec![F::zero(); self.len()];
        kernels::zip_into(&self.data(), &other.data(), &mut out, |a, b| a - b);
        Tensor::build(
            out,
            self.shape().to_vec(),
            false,
            Op::Sub(self.clone(), other.clone()),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let mut out = vec![F::zero(); self.len()];
        kernels::zip_into(&self.data(), &other.data(), &mut out, |a, b| a * b);
        Tensor::build(
            out,
            self.shape().to_vec(),
            false,
            Op::Mul(self.clone(), other.clone()),
        )
    }

    fn row_broadcast_check(&self, row: &Tensor<F>) -> (usize, usize) {
        let d = *self.shape().last().expect("rank >= 1");
        assert_eq!(row.len(), d, "row broadcast: row len {} vs last dim {d}", row.len());
        (self.len() / d, d)
    }

    pub fn add_row(&self, row: &Tensor<F>) -> Tensor<F> {
        let (r, d) = self.row_broadcast_check(row);
        let xs = self.data();
        let rs = row.data();
        let mut out = vec![F::zero(); self.len()];
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = xs[i * d + j] + rs[j];
            }
        }
        drop(xs);
        drop(rs);
        Tensor::build(
            out,
            self.shape().to_vec(),
            false,
            Op::AddRow(self.clone(), row.clone()),
        )
    }

    pub fn mul_row(&self, row: &Tensor<F>) -> Tensor<F> {
        let (r, d) = self.row_broadcast_check(row);
        let xs = self.data();
        let rs = row.data();
        let mut out = vec![F::zero(); self.len()];
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = xs[i * d + j] * rs[j];
            }
        }
        drop(xs);
        drop(rs);
        Tensor::build(
            out,
            self.shape().to_vec(),
            false,
            Op::MulRow(self.clone(), row.clone()),
        )
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let mut out = vec![F::zero(); self.len()];
        kernels::map_into(&self.data(), &mut out, move |x| x + c);
        Tensor::build(out, self.shape().to_vec(), false, Op::AddScalar(self.clone(), c))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let mut out = vec![F::zero(); self.len()];
        kernels::map_into(&self.data(), &mut out, move |x| x * c);
        Tensor::build(out, self.shape().to_vec(), false, Op::Scale(self.clone(), c))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "matmul lhs rank");
        assert_eq!(other.shape().len(), 2, "matmul rhs rank");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_nn(&self.data(), &other.data(), &mut out, m, k, n);
        Tensor::build(out, vec![m, n], false, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn transpose(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "transpose rank");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let xs = self.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        drop(xs);
        Tensor::build(out, vec![c, r], false, Op::Transpose(self.clone()))
    }

    // ---- nonlinearities ----

    pub fn gelu(&self) -> Tensor<F> {
        let scale = F::of(GELU_SCALE);
        let coef = F::of(GELU_COEF);
        let half = F::of(0.5);
        let one = F::one();
        let mut out = vec![F::zero(); self.len()];
        kernels::map_into(&self.data(), &mut out, move |x| {
            let t = (scale * (x + coef * x * x * x)).tanh();
            half * x * (one + t)
        });
        Tensor::build(out, self.shape().to_vec(), false, Op::Gelu(self.clone()))
    }

    pub fn softmax(&self) -> Tensor<F> {
        let d = *self.shape().last().expect("rank >= 1");
        let mut out = self.to_vec();
        kernels::for_each_row(&mut out, d, |_, row| {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        });
        Tensor::build(out, self.shape().to_vec(), false, Op::Softmax(self.clone()))
    }

    pub fn layer_norm(&self) -> Tensor<F> {
        let d = *self.shape().last().expect("rank >= 1");
        let eps = F::of(LAYER_NORM_EPS);
        let inv_d = F::one() / F::of(d as f64);
        let mut out = self.to_vec();
        kernels::for_each_row(&mut out, d, |_, row| {
            let mut mean = F::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for &v in row.iter() {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        });
        Tensor::build(out, self.shape().to_vec(), false, Op::LayerNorm(self.clone()))
    }

    // ---- structure ----

    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rank = parts[0].shape().len();
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat rank mismatch");
            for a in 0..rank {
                if a != axis {
                    assert_eq!(
                        p.shape()[a],
                        parts[0].shape()[a],
                        "concat shape mismatch off axis"
                    );
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); numel(&shape)];
        let total_axis = shape[axis];
        let mut offset = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                for a in 0..pa {
                    let src = (o * pa + a) * inner;
                    let dst = (o * total_axis + offset + a) * inner;
                    out[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
                }
            }
            offset += pa;
        }
        Tensor::build(
            out,
            shape,
            false,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let (outer, axis_len, inner) = axis_split(self.shape(), axis);
        assert!(
            start + len <= axis_len,
            "slice {start}+{len} beyond axis {axis_len}"
        );
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let xs = self.data();
        let mut out = vec![F::zero(); numel(&shape)];
        for o in 0..outer {
            for a in 0..len {
                let src = (o * axis_len + start + a) * inner;
                let dst = (o * len + a) * inner;
                out[dst..dst + inner].copy_from_slice(&xs[src..src + inner]);
            }
        }
        drop(xs);
        Tensor::build(
            out,
            shape,
            false,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
                len,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        assert_eq!(numel(shape), self.len(), "reshape element count");
        Tensor::build(self.to_vec(), shape.to_vec(), false, Op::Reshape(self.clone()))
    }

    pub fn embed(table: &Tensor<F>, ids: &[usize]) -> Tensor<F> {
        assert_eq!(table.shape().len(), 2, "embedding table rank");
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let td = table.data();
        let mut out = vec![F::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding id {id} out of range {v}");
            out[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        Tensor::build(
            out,
            vec![ids.len(), d],
            false,
            Op::Embed {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        )
    }

    // ---- loss ----

    pub fn mse(&self, target: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), target.shape(), "mse shape mismatch");
        let xs = self.data();
        let ts = target.data();
        let mut acc = F::zero();
        for i in 0..xs.len() {
            let d = xs[i] - ts[i];
            acc = acc + d * d;
        }
        let mean = acc / F::of(xs.len() as f64);
        drop(xs);
        drop(ts);
        Tensor::build(vec![mean], vec![1], false, Op::Mse(self.clone(), target.clone()))
    }

    // ---- backward ----

    /// Reverse pass from a scalar output. Accumulates into the `.grad`
    /// buffers of every reachable `param` leaf.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward from non-scalar");
        if !self.inner.needs_grad {
            return;
        }

        // Post-order DFS (parents exit before the nodes they feed); the
        // reversed order is then a valid schedule for adjoint propagation.
        enum Frame<F: Scalar> {
            Enter(Tensor<F>),
            Exit(Tensor<F>),
        }
        let mut topo: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<*const Inner<F>> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.ptr()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in t.inner.op.parents() {
                        if p.inner.needs_grad && !visited.contains(&p.ptr()) {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
                Frame::Exit(t) => topo.push(t),
            }
        }

        let mut adjoint: HashMap<*const Inner<F>, Vec<F>> = HashMap::new();
        adjoint.insert(self.ptr(), vec![F::one()]);

        for node in topo.iter().rev() {
            let g = match adjoint.remove(&node.ptr()) {
                Some(g) => g,
                None => continue,
            };
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (b, &gi) in buf.iter_mut().zip(&g) {
                            *b = *b + gi;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            node.push_to_parents(&g, &mut adjoint);
        }
    }

    fn add_adjoint(
        adjoint: &mut HashMap<*const Inner<F>, Vec<F>>,
        t: &Tensor<F>,
        contrib: impl FnOnce(&mut [F]),
    ) {
        if !t.inner.needs_grad {
            return;
        }
        let buf = adjoint
            .entry(t.ptr())
            .or_insert_with(|| vec![F::zero(); t.len()]);
        contrib(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn push_to_parents(&self, g: &[F], adjoint: &mut HashMap<*const Inner<F>, Vec<F>>) {
        match &self.inner.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_adjoint(adjoint, a, |buf| {
                    for (x, &gi) in buf.iter_mut().zip(g) {
                        *x = *x + gi;
                    }
                });
                Self::add_adjoint(adjoint, b, |buf| {
                    for (x, &gi) in buf.iter_mut().zip(g) {
                        *x = *x + gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::add_adjoint(adjoint, a, |buf| {
                    for (x, &gi) in buf.iter_mut().zip(g) {
                        *x = *x + gi;
                    }
                });
                Self::add_adjoint(adjoint, b, |buf| {
                    for (x, &gi) in buf.iter_mut().zip(g) {
                        *x = *x - gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                Self::add_adjoint(adjoint, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * bd[i];
                    }
                });
                Self::add_adjoint(adjoint, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let d = row.len();
                Self::add_adjoint(adjoint, x, |buf| {
                    for (v, &gi) in buf.iter_mut().zip(g) {
                        *v = *v + gi;
                    }
                });
                Self::add_adjoint(adjoint, row, |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % d] = buf[i % d] + gi;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let d = row.len();
                let (xd, rd) = (x.data(), row.data());
                Self::add_adjoint(adjoint, x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * rd[i % d];
                    }
                });
                Self::add_adjoint(adjoint, row, |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % d] = buf[i % d] + gi * xd[i];
                    }
                });
            }
            Op::AddScalar(x, _) => {
                Self::add_adjoint(adjoint, x, |buf| {
                    for (v, &gi) in buf.iter_mut().zip(g) {
                        *v = *v + gi;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                Self::add_adjoint(adjoint, x, |buf| {
                    for (v, &gi) in buf.iter_mut().zip(g) {
                        *v = *v + c * gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.inner.needs_grad {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt(g, &b.data(), &mut da, m, n, k);
                    Self::add_adjoint(adjoint, a, |buf| {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + da[i];
                        }
                    });
                }
                if b.inner.needs_grad {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn(&a.data(), g, &mut db, k, m, n);
                    Self::add_adjoint(adjoint, b, |buf| {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + db[i];
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let xd = x.data();
                let scale = F::of(GELU_SCALE);
                let coef = F::of(GELU_COEF);
                let half = F::of(0.5);
                let one = F::one();
                let three = F::of(3.0);
                Self::add_adjoint(adjoint, x, |buf| {
                    for i in 0..buf.len() {
                        let xi = xd[i];
                        let inner = scale * (xi + coef * xi * xi * xi);
                        let t = inner.tanh();
                        let dt = (one - t * t) * scale * (one + three * coef * xi * xi);
                        let dgelu = half * (one + t) + half * xi * dt;
                        buf[i] = buf[i] + g[i] * dgelu;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.data();
                let d = *self.shape().last().expect("rank");
                Self::add_adjoint(adjoint, x, |buf| {
                    for r in 0..buf.len() / d {
                        let row = r * d;
                        let mut dot = F::zero();
                        for j in 0..d {
                            dot = dot + g[row + j] * y[row + j];
                        }
                        for j in 0..d {
                            buf[row + j] = buf[row + j] + y[row + j] * (g[row + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(x) => {
                let y = self.data();
                let xd = x.data();
                let d = *self.shape().last().expect("rank");
                let eps = F::of(LAYER_NORM_EPS);
                let inv_d = F::one() / F::of(d as f64);
                Self::add_adjoint(adjoint, x, |buf| {
                    for r in 0..buf.len() / d {
                        let row = r * d;
                        let mut mean = F::zero();
                        for j in 0..d {
                            mean = mean + xd[row + j];
                        }
                        mean = mean * inv_d;
                        let mut var = F::zero();
                        for j in 0..d {
                            let c = xd[row + j] - mean;
                            var = var + c * c;
                        }
                        var = var * inv_d;
                        let inv_std = F::one() / (var + eps).sqrt();
                        let mut g_mean = F::zero();
                        let mut gy_mean = F::zero();
                        for j in 0..d {
                            g_mean = g_mean + g[row + j];
                            gy_mean = gy_mean + g[row + j] * y[row + j];
                        }
                        g_mean = g_mean * inv_d;
                        gy_mean = gy_mean * inv_d;
                        for j in 0..d {
                            let dy = g[row + j] - g_mean - y[row + j] * gy_mean;
                            buf[row + j] = buf[row + j] + dy * inv_std;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total_axis, inner) = axis_split(self.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let pa = p.shape()[*axis];
                    let off = offset;
                    Self::add_adjoint(adjoint, p, |buf| {
                        for o in 0..outer {
                            for a in 0..pa {
                                let dst = (o * pa + a) * inner;
                                let src = (o * total_axis + off + a) * inner;
                                for i in 0..inner {
                                    buf[dst + i] = buf[dst + i] + g[src + i];
                                }
                            }
                        }
                    });
                    offset += pa;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (outer, axis_len, inner) = axis_split(x.shape(), *axis);
                let (start, len) = (*start, *len);
                Self::add_adjoint(adjoint, x, |buf| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = (o * axis_len + start + a) * inner;
                            let src = (o * len + a) * inner;
                            for i in 0..inner {
                                buf[dst + i] = buf[dst + i] + g[src + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                Self::add_adjoint(adjoint, x, |buf| {
                    for (v, &gi) in buf.iter_mut().zip(g) {
                        *v = *v + gi;
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape()[0], self.shape()[1]);
                Self::add_adjoint(adjoint, x, |buf| {
                    // self is [r, c]; parent is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] = buf[j * r + i] + g[i * c + j];
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = table.shape()[1];
                Self::add_adjoint(adjoint, table, |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] = buf[id * d + j] + g[i * d + j];
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let n = F::of(ad.len() as f64);
                let two = F::of(2.0);
                let g0 = g[0];
                Self::add_adjoint(adjoint, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g0 * two * (ad[i] - bd[i]) / n;
                    }
                });
                Self::add_adjoint(adjoint, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] - g0 * two * (ad[i] - bd[i]) / n;
                    }
                });
            }
        }
    }
}
