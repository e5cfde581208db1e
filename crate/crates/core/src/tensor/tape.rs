use super::{axis_split, kernels, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Borrowed view of a recorded value.
#[derive(Clone, Copy)]
pub struct TensorRef<'a, T> {
    pub shape: &'a Shape,
    pub data: &'a [T],
}

impl<T: Real> TensorRef<'_, T> {
    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.to_vec())
    }
}

/// A recorded operation with its vector-Jacobian product.
pub trait Op<T: Real> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each of [`Op::inputs`], in order. `None` means the
    /// input receives no gradient from this op.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, out: Var, grad: &[T])
        -> Result<Vec<Option<Vec<T>>>>;
}

pub struct BackwardCtx<'a, T> {
    tape: &'a Tape<T>,
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> TensorRef<'a, T> {
        self.tape.value(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tape.requires_grad(v)
    }
}

enum Storage<T> {
    Owned(Tensor<T>),
    /// Zero-copy reshape of an owned node.
    View { base: usize, shape: Shape },
}

struct Node<T> {
    storage: Storage<T>,
    requires_grad: bool,
    op: Option<Box<dyn Op<T>>>,
}

/// Wengert list of forward values. Nodes are appended in execution order, so
/// every op's inputs precede it and a reverse sweep is a valid topological
/// traversal.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that keeps values but records no backward rules.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            storage: Storage::Owned(t),
            requires_grad: requires_grad && self.recording,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> TensorRef<'_, T> {
        match &self.nodes[v.0].storage {
            Storage::Owned(t) => TensorRef {
                shape: &t.shape,
                data: &t.data,
            },
            Storage::View { base, shape } => match &self.nodes[*base].storage {
                Storage::Owned(t) => TensorRef {
                    shape,
                    data: &t.data,
                },
                Storage::View { .. } => unreachable!("views always point at owned storage"),
            },
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).to_tensor()
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.value(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Record the result of an op. Non-finite outputs abort with the op named.
    pub fn push(&mut self, out: Tensor<T>, op: Box<dyn Op<T>>) -> Result<Var> {
        if let Some(i) = out.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                op.name(),
                format!("non-finite output {} at flat index {i}", out.data[i]),
            ));
        }
        let requires_grad = self.recording && op.inputs().iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            storage: Storage::Owned(out),
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reshape without copying the buffer.
    pub fn view(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = Shape::new(dims)?;
        let src = self.value(x);
        if shape.numel() != src.data.len() {
            return Err(Error::dim(format!(
                "cannot view {:?} as {shape:?}",
                src.shape
            )));
        }
        let base = match &self.nodes[x.0].storage {
            Storage::Owned(_) => x.0,
            Storage::View { base, .. } => *base,
        };
        let requires_grad = self.requires_grad(x);
        self.nodes.push(Node {
            storage: Storage::View { base, shape },
            requires_grad,
            op: requires_grad.then(|| Box::new(ViewOp { x }) as Box<dyn Op<T>>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. The tape is consumed afterwards;
    /// leaf gradients stay readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let numel = self.value(loss).data.len();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {} elements",
                numel
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let ctx = BackwardCtx { tape: self };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                grads[i] = Some(g);
                continue;
            };
            let inputs = op.inputs();
            let input_grads = op.backward(&ctx, Var(i), &g)?;
            debug_assert_eq!(inputs.len(), input_grads.len());
            for (v, gi) in inputs.into_iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(j) = gi.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numeric(
                        op.name(),
                        format!("non-finite gradient at flat index {j} (backward)"),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gi) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "add")?;
        let (x, y) = (self.value(a).data, self.value(b).data);
        let data = x.iter().zip(y).map(|(&p, &q)| p + q).collect();
        self.push(Tensor::from_parts(shape, data), Box::new(AddOp { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let (x, y) = (self.value(a).data, self.value(b).data);
        let data = x.iter().zip(y).map(|(&p, &q)| p * q).collect();
        self.push(Tensor::from_parts(shape, data), Box::new(MulOp { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&p| p * factor).collect();
        let out = Tensor::from_parts(v.shape.clone(), data);
        self.push(out, Box::new(ScaleOp { x, factor }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&p| p.max(T::zero())).collect();
        let out = Tensor::from_parts(v.shape.clone(), data);
        self.push(out, Box::new(ReluOp { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data.iter().map(|&p| sigmoid(p)).collect();
        let out = Tensor::from_parts(v.shape.clone(), data);
        self.push(out, Box::new(SigmoidOp { x }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Box::new(SumOp { x, scale: T::one() }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data;
        let scale = T::one() / T::lit(v.len() as f64);
        let s: T = v.iter().copied().sum::<T>() * scale;
        self.push(Tensor::scalar(s), Box::new(SumOp { x, scale }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        let (&[m, k], &[k2, p]) = (sa.dims(), sb.dims()) else {
            return Err(Error::dim(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * p];
        kernels::gemm(m, k, p, self.value(a).data, false, self.value(b).data, false, &mut out);
        let op = MatMulOp {
            a,
            b,
            trans_a: false,
            trans_b: false,
            batch: 1,
            m,
            k,
            p,
        };
        self.push(Tensor::from_vec(vec![m, p], out)?, Box::new(op))
    }

    /// Batched product of rank-3 operands `[B, ., .]`, with optional
    /// transposition of the trailing two axes of either side.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        let (&[ba, a1, a2], &[bb, b1, b2]) = (sa.dims(), sb.dims()) else {
            return Err(Error::dim(format!("bmm needs rank-3 operands, got {sa:?} and {sb:?}")));
        };
        if ba != bb {
            return Err(Error::dim(format!("bmm batch sizes differ: {sa:?} x {sb:?}")));
        }
        let (m, k) = if trans_a { (a2, a1) } else { (a1, a2) };
        let (k2, p) = if trans_b { (b2, b1) } else { (b1, b2) };
        if k != k2 {
            return Err(Error::dim(format!(
                "bmm inner dimensions differ: {sa:?} (t={trans_a}) x {sb:?} (t={trans_b})"
            )));
        }
        let mut out = vec![T::zero(); ba * m * p];
        {
            let (xa, xb) = (self.value(a).data, self.value(b).data);
            for i in 0..ba {
                kernels::gemm(
                    m,
                    k,
                    p,
                    &xa[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &xb[i * k * p..(i + 1) * k * p],
                    trans_b,
                    &mut out[i * m * p..(i + 1) * m * p],
                );
            }
        }
        let op = MatMulOp {
            a,
            b,
            trans_a,
            trans_b,
            batch: ba,
            m,
            k,
            p,
        };
        self.push(Tensor::from_vec(vec![ba, m, p], out)?, Box::new(op))
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).to_tensor().softmax_axis(axis)?;
        self.push(out, Box::new(SoftmaxOp { x, axis }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .clone();
        if axis >= first.rank() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut dims = first.dims().to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        dims[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.rank() == first.rank()
                && (0..s.rank()).all(|i| i == axis || s.dim(i) == first.dim(i));
            if !same_rest {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {first:?}")));
            }
            widths.push(s.dim(axis));
            dims[axis] += s.dim(axis);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total = dims[axis];
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let src = self.value(v).data;
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + w * inner].copy_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
            offset += w;
        }
        let op = ConcatOp {
            inputs: inputs.to_vec(),
            widths,
            outer,
            inner,
        };
        self.push(Tensor::from_vec(dims, out)?, Box::new(op))
    }
}

#[inline]
/// Logistic function, kept strictly inside (0, 1) where it would round to
/// an endpoint.
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}

struct ViewOp {
    x: Var,
}

impl<T: Real> Op<T> for ViewOp {
    fn name(&self) -> &'static str {
        "view"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

struct AddOp {
    a: Var,
    b: Var,
}

impl<T: Real> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec()), Some(g.to_vec())])
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<T: Real> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, y) = (ctx.value(self.a).data, ctx.value(self.b).data);
        let ga = g.iter().zip(y).map(|(&d, &q)| d * q).collect();
        let gb = g.iter().zip(x).map(|(&d, &p)| d * p).collect();
        Ok(vec![Some(ga), Some(gb)])
    }
}

struct ScaleOp<T> {
    x: Var,
    factor: T,
}

impl<T: Real> Op<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.iter().map(|&d| d * self.factor).collect())])
    }
}

struct ReluOp {
    x: Var,
}

impl<T: Real> Op<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = ctx.value(self.x).data;
        let gx = g
            .iter()
            .zip(x)
            .map(|(&d, &p)| if p > T::zero() { d } else { T::zero() })
            .collect();
        Ok(vec![Some(gx)])
    }
}

struct SigmoidOp {
    x: Var,
}

impl<T: Real> Op<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, out: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let y = ctx.value(out).data;
        let gx = g
            .iter()
            .zip(y)
            .map(|(&d, &s)| d * s * (T::one() - s))
            .collect();
        Ok(vec![Some(gx)])
    }
}

struct SumOp<T> {
    x: Var,
    scale: T,
}

impl<T: Real> Op<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let n = ctx.value(self.x).data.len();
        Ok(vec![Some(vec![g[0] * self.scale; n])])
    }
}

struct MatMulOp {
    a: Var,
    b: Var,
    trans_a: bool,
    trans_b: bool,
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
}

impl<T: Real> Op<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (m, k, p) = (self.m, self.k, self.p);
        let (xa, xb) = (ctx.value(self.a).data, ctx.value(self.b).data);
        let want_a = ctx.requires_grad(self.a);
        let want_b = ctx.requires_grad(self.b);
        let mut ga = want_a.then(|| vec![T::zero(); xa.len()]);
        let mut gb = want_b.then(|| vec![T::zero(); xb.len()]);
        for i in 0..self.batch {
            let a = &xa[i * m * k..(i + 1) * m * k];
            let b = &xb[i * k * p..(i + 1) * k * p];
            let dc = &g[i * m * p..(i + 1) * m * p];
            if let Some(ga) = ga.as_mut() {
                let dst = &mut ga[i * m * k..(i + 1) * m * k];
                if self.trans_a {
                    // stored k x m: op(B) . dC^T
                    kernels::gemm(k, p, m, b, self.trans_b, dc, true, dst);
                } else {
                    kernels::gemm(m, p, k, dc, false, b, !self.trans_b, dst);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[i * k * p..(i + 1) * k * p];
                if self.trans_b {
                    // stored p x k: dC^T . op(A)
                    kernels::gemm(p, m, k, dc, true, a, self.trans_a, dst);
                } else {
                    kernels::gemm(k, m, p, a, !self.trans_a, dc, false, dst);
                }
            }
        }
        Ok(vec![ga, gb])
    }
}

struct SoftmaxOp {
    x: Var,
    axis: usize,
}

impl<T: Real> Op<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, out: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let y = ctx.value(out);
        let (outer, len, inner) = axis_split(y.shape, self.axis);
        let mut gx = vec![T::zero(); g.len()];
        kernels::softmax_backward(y.data, g, &mut gx, outer, len, inner);
        Ok(vec![Some(gx)])
    }
}

struct ConcatOp {
    inputs: Vec<Var>,
    widths: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl<T: Real> Op<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.inputs.len());
        for (&v, &w) in self.inputs.iter().zip(&self.widths) {
            if !ctx.requires_grad(v) {
                grads.push(None);
                offset += w;
                continue;
            }
            let mut gi = vec![T::zero(); self.outer * w * self.inner];
            for o in 0..self.outer {
                let src = (o * total + offset) * self.inner;
                gi[o * w * self.inner..(o + 1) * w * self.inner]
                    .copy_from_slice(&g[src..src + w * self.inner]);
            }
            grads.push(Some(gi));
            offset += w;
        }
        Ok(grads)
    }
}
