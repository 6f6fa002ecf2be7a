//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! are appended in execution order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. Graphs are
//! single-threaded; independent graphs can live on separate threads.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::Arc;

use super::tensor::{check_finite, check_shape, numel, strides};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Roll {
        input: usize,
        axis: usize,
        shift: isize,
    },
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    GatherRows(usize, Vec<usize>),
    Select(usize, usize),
    SumAll(usize),
    MeanAxis(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to one value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep, indexed by leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `var` out of the store.
    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_values<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src[rank - 1];
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..total / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn roll_values<T: Copy>(data: &[T], shape: &[usize], axis: usize, shift: isize) -> Vec<T> {
    let (outer, n, inner) = outer_inner(shape, axis);
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        let block = &data[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let src = (i + n - s) % n;
            out.extend_from_slice(&block[src * inner..(src + 1) * inner]);
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
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

    fn push(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>, name: &str) -> Result<Var<'_, T>> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(&value, name)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Binds a tensor as a leaf. Its `requires_grad` flag decides whether
    /// the backward sweep reports a gradient for it.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Result<Var<'_, T>> {
        check_finite(tensor.data(), "leaf tensor")?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared(),
            requires_grad: tensor.is_trainable(),
            op: Op::Leaf,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    pub fn constant(&self, shape: Vec<usize>, values: Vec<T>) -> Result<Var<'_, T>> {
        check_shape(&shape)?;
        if numel(&shape) != values.len() {
            return Err(Error::Shape(format!(
                "constant of shape {shape:?} given {} values",
                values.len()
            )));
        }
        self.push(shape, values, false, Op::Leaf, "constant")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Returns the zero-initialized gradient buffer for `id`, or `None` when the
/// node does not need one.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn backward_op<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v);
            }
        }
        Op::Mul(a, b) => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, &gv), &x) in s.iter_mut().zip(g).zip(bv.iter()) {
                    *d = *d + gv * x;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av.iter()) {
                    *d = *d + gv * x;
                }
            }
        }
        Op::AddSuffix(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                let m = s.len();
                for chunk in g.chunks_exact(m) {
                    add_into(s, chunk);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let av = Arc::clone(&nodes[a].value);
            let bv = Arc::clone(&nodes[b].value);
            let b_batched = nodes[b].shape.len() == 3;
            if let Some(s) = slot(nodes, grads, a) {
                // dA = dY · Bᵀ
                for i in 0..batch {
                    let gy = &g[i * m * n..(i + 1) * m * n];
                    let bb = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { &bv[..] };
                    // B as [k, n] (or [n, k] when transposed); Bᵀ as [n, k].
                    let bt_strides = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gy,
                        (n as isize, 1),
                        bb,
                        bt_strides,
                        T::one(),
                        &mut s[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if let Some(s) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let gy = &g[i * m * n..(i + 1) * m * n];
                    let aa = &av[i * m * k..(i + 1) * m * k];
                    let out = if b_batched { &mut s[i * k * n..(i + 1) * k * n] } else { &mut s[..] };
                    if trans_b {
                        // B is [n, k]: dB = dYᵀ · A
                        T::gemm(n, m, k, T::one(), gy, (1, n as isize), aa, (k as isize, 1), T::one(), out, (k as isize, 1));
                    } else {
                        // dB = Aᵀ · dY
                        T::gemm(k, m, n, T::one(), aa, (1, k as isize), gy, (n as isize, 1), T::one(), out, (n as isize, 1));
                    }
                }
            }
        }
        Op::Permute(a, axes) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_values(g, &node.shape, &inverse);
                add_into(s, &back);
            }
        }
        &Op::Roll { input, axis, shift } => {
            if let Some(s) = slot(nodes, grads, input) {
                let back = roll_values(g, &node.shape, axis, -shift);
                add_into(s, &back);
            }
        }
        &Op::Softmax(a, axis) => {
            let y = Arc::clone(&node.value);
            if let Some(s) = slot(nodes, grads, a) {
                let (outer, n, inner) = outer_inner(&node.shape, axis);
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut dot = T::zero();
                        for i in 0..n {
                            let p = base + i * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for i in 0..n {
                            let p = base + i * inner;
                            s[p] = s[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = Arc::clone(&nodes[*x].value);
            let gv = Arc::clone(&nodes[*gamma].value);
            let d = gv.len();
            let rows = xv.len() / d;
            let dn = T::from_usize(d).unwrap();
            if let Some(s) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for c in 0..d {
                        let p = r * d + c;
                        s[c] = s[c] + g[p] * (xv[p] - mean[r]) * rstd[r];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    add_into(s, &g[r * d..(r + 1) * d]);
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let row = r * d;
                    let mut sum_dh = T::zero();
                    let mut sum_dh_xh = T::zero();
                    for c in 0..d {
                        let xh = (xv[row + c] - mean[r]) * rstd[r];
                        let dh = g[row + c] * gv[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_xh = sum_dh_xh + dh * xh;
                    }
                    let m1 = sum_dh / dn;
                    let m2 = sum_dh_xh / dn;
                    for c in 0..d {
                        let xh = (xv[row + c] - mean[r]) * rstd[r];
                        let dh = g[row + c] * gv[c];
                        s[row + c] = s[row + c] + rstd[r] * (dh - m1 - xh * m2);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let xv = Arc::clone(&nodes[*a].value);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, &gv), &x) in s.iter_mut().zip(g).zip(xv.iter()) {
                    *d = *d + gv * gelu_derivative(x);
                }
            }
        }
        Op::GatherRows(table, indices) => {
            if let Some(s) = slot(nodes, grads, *table) {
                let c = nodes[*table].shape[1];
                for (r, &ix) in indices.iter().enumerate() {
                    add_into(&mut s[ix * c..(ix + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
        }
        &Op::Select(a, index) => {
            if let Some(s) = slot(nodes, grads, a) {
                let chunk = g.len();
                add_into(&mut s[index * chunk..(index + 1) * chunk], g);
            }
        }
        Op::SumAll(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        &Op::MeanAxis(a, axis) => {
            if let Some(s) = slot(nodes, grads, a) {
                let (outer, n, inner) = outer_inner(&nodes[a].shape, axis);
                let scale = T::one() / T::from_usize(n).unwrap();
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            let p = (o * n + i) * inner + j;
                            s[p] = s[p] + g[o * inner + j] * scale;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(s) = slot(nodes, grads, *logits) {
                let rows = labels.len();
                let c = probs.len() / rows;
                let scale = g[0] / T::from_usize(rows).unwrap();
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == label { T::one() } else { T::zero() };
                        let p = r * c + j;
                        s[p] = s[p] + (probs[p] - y) * scale;
                    }
                }
            }
        }
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.node(self.id).value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.graph.node(self.id).value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let node = self.graph.node(self.id);
        Tensor::from_shared(node.shape.clone(), Arc::clone(&node.value))
    }

    pub fn item(&self) -> Result<T> {
        let node = self.graph.node(self.id);
        if node.value.len() != 1 {
            return Err(Error::Contract(format!("item() on shape {:?}", node.shape)));
        }
        Ok(node.value[0])
    }

    fn requires_grad(&self) -> bool {
        self.graph.node(self.id).requires_grad
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different graphs".into()))
        }
    }

    fn elementwise(
        self,
        other: Var<'g, T>,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let (shape, value) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            if a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "{name}: shapes {:?} and {:?} differ",
                    a.shape, b.shape
                )));
            }
            let v = a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(shape, value, rg, op(self.id, other.id), name)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds `bias` whose shape equals the trailing axes of `self`
    /// (the usual per-channel bias is the rank-1 case).
    pub fn add_suffix(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&bias)?;
        let (shape, value) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(bias.id);
            let r = b.shape.len();
            if r > a.shape.len() || a.shape[a.shape.len() - r..] != b.shape[..] {
                return Err(Error::Shape(format!(
                    "add_suffix: {:?} is not a trailing suffix of {:?}",
                    b.shape, a.shape
                )));
            }
            let m = b.value.len();
            let mut v = a.value.as_ref().clone();
            for chunk in v.chunks_exact_mut(m) {
                add_into(chunk, &b.value);
            }
            (a.shape.clone(), v)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        self.graph
            .push(shape, value, rg, Op::AddSuffix(self.id, bias.id), "add_suffix")
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            (a.shape.clone(), a.value.iter().map(|&x| x * c).collect())
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::Scale(self.id, c), "scale")
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            (a.shape.clone(), a.value.iter().map(|&x| x + c).collect())
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::AddScalar(self.id), "add_scalar")
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        self.matmul_impl(other, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched product `[B, m, k] × [B, k, n] → [B, m, n]`; with `trans_b`
    /// the right operand is `[B, n, k]` and is used transposed.
    pub fn bmm(self, other: Var<'g, T>, trans_b: bool) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let sa = self.shape();
        let sb = other.shape();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (k_b, n) = if trans_b { (sb.get(2), sb.get(1)) } else { (sb.get(1), sb.get(2)) };
        if !ok || k_b != Some(&sa[2]) {
            return Err(Error::Shape(format!(
                "bmm{}: cannot multiply {sa:?} by {sb:?}",
                if trans_b { " (transposed rhs)" } else { "" }
            )));
        }
        let n = *n.unwrap();
        self.matmul_impl(other, sa[0], sa[1], sa[2], n, trans_b, vec![sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        self,
        other: Var<'g, T>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var<'g, T>> {
        let value = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            let b_batched = b.shape.len() == 3;
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let bb = if b_batched { &b.value[i * k * n..(i + 1) * k * n] } else { &b.value[..] };
                let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &a.value[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    bb,
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            out_shape,
            value,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            "matmul",
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g, T>> {
        check_shape(&shape)?;
        let value = {
            let a = self.graph.node(self.id);
            if numel(&shape) != a.value.len() {
                return Err(Error::Shape(format!(
                    "cannot reshape {:?} into {shape:?}",
                    a.shape
                )));
            }
            Arc::clone(&a.value)
        };
        let mut nodes = self.graph.nodes.borrow_mut();
        let rg = nodes[self.id].requires_grad;
        nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            op: Op::Reshape(self.id),
        });
        Ok(Var {
            graph: self.graph,
            id: nodes.len() - 1,
        })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            let rank = a.shape.len();
            let mut seen = vec![false; rank];
            if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
                return Err(Error::Shape(format!(
                    "permute: {axes:?} is not a permutation of the axes of {:?}",
                    a.shape
                )));
            }
            let shape = axes.iter().map(|&x| a.shape[x]).collect();
            (shape, permute_values(&a.value, &a.shape, axes))
        };
        self.graph.push(
            shape,
            value,
            self.requires_grad(),
            Op::Permute(self.id, axes.to_vec()),
            "permute",
        )
    }

    /// Cyclic shift along `axis`: element `i` moves to `i + shift (mod n)`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            if axis >= a.shape.len() {
                return Err(Error::Shape(format!("roll: axis {axis} out of range for {:?}", a.shape)));
            }
            (a.shape.clone(), roll_values(&a.value, &a.shape, axis, shift))
        };
        self.graph.push(
            shape,
            value,
            self.requires_grad(),
            Op::Roll {
                input: self.id,
                axis,
                shift,
            },
            "roll",
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            if axis >= a.shape.len() {
                return Err(Error::Shape(format!("softmax: axis {axis} out of range for {:?}", a.shape)));
            }
            let (outer, n, inner) = outer_inner(&a.shape, axis);
            let mut out = vec![T::zero(); a.value.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let base = o * n * inner + j;
                    let mut max = T::neg_infinity();
                    for i in 0..n {
                        max = max.max(a.value[base + i * inner]);
                    }
                    let mut sum = T::zero();
                    for i in 0..n {
                        let e = (a.value[base + i * inner] - max).exp();
                        out[base + i * inner] = e;
                        sum = sum + e;
                    }
                    for i in 0..n {
                        out[base + i * inner] = out[base + i * inner] / sum;
                    }
                }
            }
            (a.shape.clone(), out)
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::Softmax(self.id, axis), "softmax")
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let (shape, value, mean, rstd) = {
            let x = self.graph.node(self.id);
            let gm = self.graph.node(gamma.id);
            let bt = self.graph.node(beta.id);
            let d = *x.shape.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
            if gm.shape != [d] || bt.shape != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm: gamma {:?} / beta {:?} must be [{d}] for input {:?}",
                    gm.shape, bt.shape, x.shape
                )));
            }
            let dn = T::from_usize(d).unwrap();
            let rows = x.value.len() / d;
            let mut out = vec![T::zero(); x.value.len()];
            let mut means = Vec::with_capacity(rows);
            let mut rstds = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                for c in 0..d {
                    out[r * d + c] = (row[c] - mean) * rstd * gm.value[c] + bt.value[c];
                }
                means.push(mean);
                rstds.push(rstd);
            }
            (x.shape.clone(), out, means, rstds)
        };
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.graph.push(
            shape,
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            (a.shape.clone(), a.value.iter().map(|&x| gelu_value(x)).collect())
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::Gelu(self.id), "gelu")
    }

    /// Row lookup: `table[R, C]` indexed by `indices` gives `[len, C]`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let t = self.graph.node(self.id);
            if t.shape.len() != 2 {
                return Err(Error::Shape(format!("gather_rows needs a matrix, got {:?}", t.shape)));
            }
            let (r, c) = (t.shape[0], t.shape[1]);
            let mut out = Vec::with_capacity(indices.len() * c);
            for &ix in indices {
                if ix >= r {
                    return Err(Error::Shape(format!("gather_rows: index {ix} out of {r} rows")));
                }
                out.extend_from_slice(&t.value[ix * c..(ix + 1) * c]);
            }
            (vec![indices.len(), c], out)
        };
        self.graph.push(
            shape,
            value,
            self.requires_grad(),
            Op::GatherRows(self.id, indices.to_vec()),
            "gather_rows",
        )
    }

    /// `self[index]` along the leading axis.
    pub fn select(self, index: usize) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            if a.shape.is_empty() || index >= a.shape[0] {
                return Err(Error::Shape(format!("select: index {index} out of range for {:?}", a.shape)));
            }
            let chunk = a.value.len() / a.shape[0];
            (
                a.shape[1..].to_vec(),
                a.value[index * chunk..(index + 1) * chunk].to_vec(),
            )
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::Select(self.id, index), "select")
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let value = self.graph.node(self.id).value.iter().copied().sum::<T>();
        self.graph
            .push(Vec::new(), vec![value], self.requires_grad(), Op::SumAll(self.id), "sum")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (shape, value) = {
            let a = self.graph.node(self.id);
            if axis >= a.shape.len() {
                return Err(Error::Shape(format!("mean_axis: axis {axis} out of range for {:?}", a.shape)));
            }
            let (outer, n, inner) = outer_inner(&a.shape, axis);
            let scale = T::one() / T::from_usize(n).unwrap();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    for j in 0..inner {
                        out[o * inner + j] = out[o * inner + j] + a.value[(o * n + i) * inner + j];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = *v * scale);
            let mut shape = a.shape.clone();
            shape.remove(axis);
            (shape, out)
        };
        self.graph
            .push(shape, value, self.requires_grad(), Op::MeanAxis(self.id, axis), "mean_axis")
    }

    /// Mean negative log-likelihood of `labels` under softmax(`self`),
    /// evaluated in log-sum-exp form. `self` is `[N, C]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let (loss, probs) = {
            let a = self.graph.node(self.id);
            if a.shape.len() != 2 || a.shape[0] != labels.len() {
                return Err(Error::Shape(format!(
                    "cross_entropy: logits {:?} with {} labels",
                    a.shape,
                    labels.len()
                )));
            }
            let c = a.shape[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Label(format!("label {bad} outside [0, {c})")));
            }
            let mut probs = vec![T::zero(); a.value.len()];
            let mut total = T::zero();
            for (r, &label) in labels.iter().enumerate() {
                let row = &a.value[r * c..(r + 1) * c];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total = total + (lse - row[label]);
                for j in 0..c {
                    probs[r * c + j] = (row[j] - lse).exp();
                }
            }
            (total / T::from_usize(labels.len()).unwrap(), probs)
        };
        self.graph.push(
            Vec::new(),
            vec![loss],
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// `x · W + b` over the last axis of a rank-2 input.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_suffix(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.leaf(&t(&[2, 1], &[0., 1.])).unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().as_slice(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 3], &[0.; 6])).unwrap();
        let b = g.leaf(&t(&[2, 3], &[0.; 6])).unwrap();
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3], &[0., 0., 0.])).unwrap();
        let y = x.softmax(0).unwrap().value();
        for v in y.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.leaf(&t(&[2], &[1000., 0.])).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1] >= 0.0 && y[1] < 1e-300);
    }

    #[test]
    fn softmax_inner_axis() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 2], &[0., 5., 0., 5.])).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 4], &[3.; 4])).unwrap();
        let gm = g.leaf(&t(&[4], &[1.; 4])).unwrap();
        let bt = g.leaf(&t(&[4], &[0.; 4])).unwrap();
        let y = x.layer_norm(gm, bt, 1e-5).unwrap().value();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_pair() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 2], &[1., -1.])).unwrap();
        let gm = g.leaf(&t(&[2], &[1.; 2])).unwrap();
        let bt = g.leaf(&t(&[2], &[0.; 2])).unwrap();
        let y = x.layer_norm(gm, bt, 1e-5).unwrap().value();
        assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_anchors() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[0., 10.])).unwrap();
        let y = x.gelu().unwrap().value();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::<f64>::new();
        let w = g.leaf(&t(&[2], &[1., 2.]).requires_grad(true)).unwrap();
        let loss = w.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1., 1.]);

        let loss = w.mul(w).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let w = g.leaf(&t(&[2], &[1., 2.]).requires_grad(true)).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let w = g.leaf(&t(&[2], &[1., 2.]).requires_grad(true)).unwrap();
        let c = g.leaf(&t(&[2], &[3., 4.])).unwrap();
        let loss = w.mul(c).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3., 4.]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let g = Graph::<f64>::new();
        let w = g.leaf(&t(&[1], &[1e300])).unwrap();
        assert!(matches!(w.mul(w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn roll_and_permute_roundtrip() {
        let g = Graph::<f64>::new();
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.leaf(&t(&[2, 3, 4], &v)).unwrap();
        let r = x.roll(1, 1).unwrap();
        assert_eq!(&r.value()[..4], &[8., 9., 10., 11.]);
        let back = r.roll(1, -1).unwrap();
        assert_eq!(back.value().as_slice(), v.as_slice());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value()[1], 4.0);
        let q = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(q.value().as_slice(), v.as_slice());
    }

    #[test]
    fn cross_entropy_label_error() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 2], &[0., 0.])).unwrap();
        assert!(matches!(x.cross_entropy(&[2]), Err(Error::Label(_))));
    }
}
