use std::rc::Rc;

use super::{GradBuffer, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an externally defined op sees during the backward pass.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// Whether each input needs a gradient; ops may skip work for the rest.
    pub needs_grad: &'a [bool],
    pub params: &'a ParamStore,
    pub param_grads: &'a mut GradBuffer,
}

/// A differentiable operation defined outside this module.
///
/// The forward value is computed by the caller before the op is pushed.
/// `backward` returns one optional gradient per input node, and may also
/// scatter directly into parameter slots (sparse lookups do this).
pub trait TapeOp {
    fn name(&self) -> &'static str;

    /// True when the op writes parameter gradients itself.
    fn has_param_sink(&self) -> bool {
        false
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>>;

    /// Number of elements where the backward rule is a surrogate that differs
    /// from the derivative of the forward map.
    fn surrogate_sites(&self, _inputs: &[&Tensor], _output: &Tensor) -> usize {
        0
    }
}

type ScalarFn = Rc<dyn Fn(f64) -> f64>;
type GradFn = Rc<dyn Fn(f64, f64) -> f64>;

enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    Linear(NodeId, NodeId, NodeId),
    MulColumn(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    RowNorm(NodeId),
    RowSum(NodeId),
    GroupSum(NodeId, usize),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Custom {
        input: NodeId,
        forward: ScalarFn,
        grad: GradFn,
    },
    Extern(Box<dyn TapeOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Recip(_) => "recip",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::MulColumn(..) => "mul_column",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dot(..) => "dot",
            Op::RowNorm(_) => "row_norm",
            Op::RowSum(_) => "row_sum",
            Op::GroupSum(..) => "group_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Custom { .. } => "custom_grad",
            Op::Extern(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::MulColumn(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorm(a)
            | Op::RowSum(a)
            | Op::GroupSum(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Custom { input, .. } => vec![*input],
            Op::Extern(_, v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A define-by-run record of tensor operations.
///
/// Node ids are handed out in creation order, so inputs always precede the
/// nodes that consume them.
pub struct Tape<'p> {
    params: &'p ParamStore,
    frozen: Vec<bool>,
    nodes: Vec<Node>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            frozen: vec![false; params.entries().len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Excludes a parameter from the gradient buffer. Its leaf stays on the
    /// tape with the same value, so forward results do not change. Must be
    /// called before the parameter's leaf is recorded.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.nodes[id.0].value.as_scalar()
    }

    /// Names of all recorded operations, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn contains_op(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n.op.name() == name)
    }

    /// Elements across the tape whose backward rule is a surrogate rather
    /// than the derivative of the forward map.
    pub fn surrogate_sites(&self) -> usize {
        let mut total = 0;
        for node in &self.nodes {
            match &node.op {
                Op::Custom {
                    input,
                    forward,
                    grad,
                } => {
                    let x = &self.nodes[input.0].value;
                    for (&u, &o) in x.data().iter().zip(node.value.data()) {
                        let h = 1e-6 * u.abs().max(1.0);
                        let fd = (forward(u + h) - forward(u - h)) / (2.0 * h);
                        if (fd - grad(u, o)).abs() > 1e-4 * fd.abs().max(1.0) {
                            total += 1;
                        }
                    }
                }
                Op::Extern(op, inputs) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    total += op.surrogate_sites(&vals, &node.value);
                }
                _ => {}
            }
        }
        total
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(id) => !self.frozen[id.0],
            Op::Extern(ext, inputs) => {
                ext.has_param_sink() || inputs.iter().any(|i| self.nodes[i.0].needs_grad)
            }
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf holding a parameter tensor as `rows × cols` (scalars and vectors
    /// become a single row; rank-2 tensors keep their shape).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let e = self.params.entry(id);
        let (rows, cols) = match e.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        };
        let value = Tensor::new(rows, cols, self.params.get(id).to_vec());
        self.push(Op::Param(id), value)
    }

    /// Leaf for a parameter tensor viewed as an N×1 column.
    pub fn param_column(&mut self, id: ParamId) -> NodeId {
        let value = Tensor::column(self.params.get(id).to_vec());
        self.push(Op::Param(id), value)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |p, q| p + q, "add");
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |p, q| p - q, "sub");
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |p, q| p * q, "mul");
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.val(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.val(a).map(|x| x + c);
        self.push(Op::Offset(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.val(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, w) = (self.val(a), self.val(b));
        assert_eq!(x.cols(), w.rows(), "matmul: inner dimension mismatch");
        let mut out = Tensor::zeros(x.rows(), w.cols());
        matmul_into(x, w, &mut out);
        self.push(Op::MatMul(a, b), out)
    }

    /// `x · w + b` with `b` a 1×out row broadcast over the batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        assert_eq!(xv.cols(), wv.rows(), "linear: inner dimension mismatch");
        assert_eq!(bv.len(), wv.cols(), "linear: bias length mismatch");
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        matmul_into(xv, wv, &mut out);
        self.push(Op::Linear(x, w, b), out)
    }

    /// Scales row `r` of `a` by `s[r]` where `s` is N×1.
    pub fn mul_column(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (x, c) = (self.val(a), self.val(s));
        assert_eq!(c.shape(), (x.rows(), 1), "mul_column: scale must be N×1");
        let mut out = x.clone();
        for r in 0..x.rows() {
            let k = c.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        self.push(Op::MulColumn(a, s), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let v = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(v))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "dot: shape mismatch");
        let v = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(v))
    }

    /// Euclidean norm of every row, as N×1.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let data = (0..x.rows())
            .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Op::RowNorm(a), Tensor::column(data))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor::column(data))
    }

    /// Sums consecutive blocks of `group` rows: (G·group)×k → G×k.
    pub fn group_sum(&mut self, a: NodeId, group: usize) -> NodeId {
        let x = self.val(a);
        assert!(group > 0 && x.rows() % group == 0, "group_sum: rows not divisible");
        let g = x.rows() / group;
        let mut out = Tensor::zeros(g, x.cols());
        for r in 0..x.rows() {
            let src = x.row(r);
            for (o, s) in out.row_mut(r / group).iter_mut().zip(src) {
                *o += *s;
            }
        }
        self.push(Op::GroupSum(a, group), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.val(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::new(x.rows(), len, data);
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.val(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let v = Tensor::new(len, c, x.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.val(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.val(*p);
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(rows, cols, data))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(*p);
            assert_eq!(t.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(rows, cols, data))
    }

    /// Elementwise op whose backward multiplies the upstream gradient by
    /// `grad(input, output)` instead of the derivative of `forward`.
    pub fn custom_grad(
        &mut self,
        input: NodeId,
        forward: impl Fn(f64) -> f64 + 'static,
        grad: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let v = self.val(input).map(&forward);
        self.push(
            Op::Custom {
                input,
                forward: Rc::new(forward),
                grad: Rc::new(grad),
            },
            v,
        )
    }

    /// Records an externally defined op whose forward value is `value`.
    pub fn push_extern(&mut self, op: Box<dyn TapeOp>, inputs: &[NodeId], value: Tensor) -> NodeId {
        self.push(Op::Extern(op, inputs.to_vec()), value)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<GradBuffer> {
        let lv = &self.nodes[loss.0].value;
        if lv.as_scalar().is_none() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, node {} is {}x{}",
                loss.0,
                lv.rows(),
                lv.cols()
            )));
        }
        let mut buf = GradBuffer::zeros(self.params.len());
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut buf);
        }
        Ok(buf)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], buf: &mut GradBuffer) {
        let out = &node.value;
        let unary = |a: NodeId, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = self.val(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &oi), &gi)| f(xi, oi, gi))
                .collect();
            Tensor::new(x.rows(), x.cols(), data)
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                if !self.frozen[id.0] {
                    let e = self.params.entry(*id);
                    for (slot, gi) in buf.as_mut_slice()[e.offset..e.offset + e.len]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *slot += *gi;
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if self.needs_grad(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d));
                }
                if self.needs_grad(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, *b, Tensor::new(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, unary(*a, &|_, o, gi| gi * o)),
            Op::Log(a) => self.acc(grads, *a, unary(*a, &|x, _, gi| gi / x)),
            Op::Relu(a) => self.acc(
                grads,
                *a,
                unary(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            ),
            Op::Softplus(a) => self.acc(grads, *a, unary(*a, &|x, _, gi| gi * sigmoid(x))),
            Op::Sigmoid(a) => self.acc(grads, *a, unary(*a, &|_, o, gi| gi * o * (1.0 - o))),
            Op::Abs(a) => self.acc(grads, *a, unary(*a, &|x, _, gi| gi * x.signum())),
            Op::Square(a) => self.acc(grads, *a, unary(*a, &|x, _, gi| 2.0 * gi * x)),
            Op::Recip(a) => self.acc(grads, *a, unary(*a, &|_, o, gi| -gi * o * o)),
            Op::Clamp(a, lo, hi) => self.acc(
                grads,
                *a,
                unary(*a, &|x, _, gi| if x >= *lo && x <= *hi { gi } else { 0.0 }),
            ),
            Op::MatMul(a, b) => {
                let (x, w) = (self.val(*a), self.val(*b));
                if self.needs_grad(*a) {
                    self.acc(grads, *a, matmul_grad_input(g, w));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, matmul_grad_weight(x, g));
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                if self.needs_grad(*x) {
                    self.acc(grads, *x, matmul_grad_input(g, wv));
                }
                if self.needs_grad(*w) {
                    self.acc(grads, *w, matmul_grad_weight(xv, g));
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    let bv = self.val(*b);
                    self.acc(grads, *b, Tensor::new(bv.rows(), bv.cols(), gb));
                }
            }
            Op::MulColumn(a, s) => {
                let (x, c) = (self.val(*a), self.val(*s));
                if self.needs_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..x.rows() {
                        let k = c.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.needs_grad(*s) {
                    let d = (0..x.rows())
                        .map(|r| x.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::column(d));
                }
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::new(x.rows(), x.cols(), vec![gv; x.len()]));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let gv = g.data()[0] / x.len() as f64;
                self.acc(grads, *a, Tensor::new(x.rows(), x.cols(), vec![gv; x.len()]));
            }
            Op::Dot(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let gv = g.data()[0];
                if self.needs_grad(*a) {
                    self.acc(grads, *a, y.map(|v| v * gv));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, x.map(|v| v * gv));
                }
            }
            Op::RowNorm(a) => {
                let x = self.val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        let k = g.data()[r] / n;
                        for (o, xi) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = k * xi;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let x = self.val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let k = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = k);
                }
                self.acc(grads, *a, ga);
            }
            Op::GroupSum(a, group) => {
                let x = self.val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    ga.row_mut(r).copy_from_slice(g.row(r / group));
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = self.val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let len = g.cols();
                for r in 0..x.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let x = self.val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let t = self.val(*p);
                    if self.needs_grad(*p) {
                        let mut data = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            data.extend_from_slice(&g.row(r)[col..col + t.cols()]);
                        }
                        self.acc(grads, *p, Tensor::new(t.rows(), t.cols(), data));
                    }
                    col += t.cols();
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.val(*p);
                    if self.needs_grad(*p) {
                        let data = g.data()[off..off + t.len()].to_vec();
                        self.acc(grads, *p, Tensor::new(t.rows(), t.cols(), data));
                    }
                    off += t.len();
                }
            }
            Op::Custom { input, grad, .. } => {
                let gi = unary(*input, &|x, o, gi| gi * grad(x, o));
                self.acc(grads, *input, gi);
            }
            Op::Extern(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|i| self.val(*i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|i| self.needs_grad(*i)).collect();
                let mut sink = GradBuffer::zeros(0);
                let param_grads = if op.has_param_sink() { &mut *buf } else { &mut sink };
                let results = op.backward(BackwardCtx {
                    grad_out: g,
                    output: out,
                    inputs: &vals,
                    needs_grad: &needs,
                    params: self.params,
                    param_grads,
                });
                for (i, r) in inputs.iter().zip(results) {
                    if let Some(t) = r {
                        self.acc(grads, *i, t);
                    }
                }
            }
        }
    }
}

/// `out += x · w`, skipping zero activations.
fn matmul_into(x: &Tensor, w: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (x.rows(), x.cols(), w.cols());
    let wd = w.data();
    for r in 0..n {
        let xr = x.row(r);
        let orow = &mut out.data_mut()[r * m..(r + 1) * m];
        for (kk, &a) in xr.iter().enumerate().take(k) {
            if a == 0.0 {
                continue;
            }
            let wrow = &wd[kk * m..(kk + 1) * m];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    }
}

/// `g · wᵀ`
fn matmul_grad_input(g: &Tensor, w: &Tensor) -> Tensor {
    let (n, m, k) = (g.rows(), g.cols(), w.rows());
    let mut out = Tensor::zeros(n, k);
    let wd = w.data();
    for r in 0..n {
        let gr = g.row(r);
        let orow = out.row_mut(r);
        for (kk, o) in orow.iter_mut().enumerate() {
            let wrow = &wd[kk * m..(kk + 1) * m];
            *o = gr.iter().zip(wrow).map(|(p, q)| p * q).sum();
        }
    }
    out
}

/// `xᵀ · g`
fn matmul_grad_weight(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, k, m) = (x.rows(), x.cols(), g.cols());
    let mut out = Tensor::zeros(k, m);
    for r in 0..n {
        let xr = x.row(r);
        let gr = g.row(r);
        for (kk, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[kk * m..(kk + 1) * m];
            for (o, gv) in orow.iter_mut().zip(gr) {
                *o += a * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(vals: &[f64]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = vals
            .iter()
            .enumerate()
            .map(|(i, v)| s.add(&format!("p{i}"), &[], vec![*v]))
            .collect();
        (s, ids)
    }

    #[test]
    fn square_of_three() {
        let (s, ids) = scalar_store(&[3.0]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.as_slice(), &[6.0]);
    }

    #[test]
    fn identity_grad_is_one() {
        let (s, ids) = scalar_store(&[5.0]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let g = t.backward(x).unwrap();
        assert_eq!(g.as_slice(), &[1.0]);
    }

    #[test]
    fn product_plus_x() {
        let (s, ids) = scalar_store(&[2.0, 3.0]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let y = t.param(ids[1]);
        let xy = t.mul(x, y);
        let f = t.add(xy, x);
        let g = t.backward(f).unwrap();
        assert_eq!(g.as_slice(), &[4.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut s = ParamStore::new();
        let id = s.add("v", &[3], vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new(&s);
        let v = t.param(id);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let (s, ids) = scalar_store(&[2.0, 7.0]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let _unused = t.param(ids[1]);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.as_slice(), &[4.0, 0.0]);
    }

    #[test]
    fn custom_grad_replaces_derivative() {
        // forward u·H(u−1), backward uses H(u−1)
        let theta = 1.0;
        for (u, expect) in [(2.0, 1.0), (0.5, 0.0)] {
            let (s, ids) = scalar_store(&[u]);
            let mut t = Tape::new(&s);
            let x = t.param(ids[0]);
            let y = t.custom_grad(
                x,
                move |v| if v >= theta { v } else { 0.0 },
                move |v, _| if v >= theta { 1.0 } else { 0.0 },
            );
            let g = t.backward(y).unwrap();
            assert_eq!(g.as_slice(), &[expect]);
        }
        let (s, ids) = scalar_store(&[-1.0]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let y = t.custom_grad(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 });
        assert_eq!(t.backward(y).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn frozen_leaf_keeps_forward_value_but_no_grad() {
        let (s, ids) = scalar_store(&[2.0, 3.0]);
        let mut t = Tape::new(&s);
        t.freeze(ids[1]);
        let x = t.param(ids[0]);
        let y = t.param(ids[1]);
        let f = t.mul(x, y);
        assert_eq!(t.scalar(f), Some(6.0));
        assert_eq!(t.backward(f).unwrap().as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let mut s = ParamStore::new();
        let w = s.add("w", &[3, 2], vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.9]);
        let b = s.add("b", &[2], vec![0.05, -0.02]);
        let run = || {
            let mut t = Tape::new(&s);
            let x = t.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]));
            let wn = t.param(w);
            let bn = t.param(b);
            let h = t.linear(x, wn, bn);
            let h = t.softplus(h);
            let l = t.mean(h);
            t.backward(l).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shard_reduction_order_is_fixed() {
        let a = GradBuffer { data: vec![1e16, 1.0] };
        let b = GradBuffer { data: vec![-1e16, 1.0] };
        let c = GradBuffer { data: vec![1.0, 1.0] };
        let r1 = GradBuffer::reduce_in_order([&a, &b, &c]).unwrap();
        let r2 = GradBuffer::reduce_in_order([&a, &b, &c]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.as_slice(), &[1.0, 3.0]);
    }
}
