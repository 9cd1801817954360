use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and gradient-check fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softmax,
    LogSoftmax,
    L2Normalize,
    MeanPool,
    Sum,
    SumN,
    Dot,
    Concat,
    SliceRows,
    GatherRows,
    Row,
    Pick,
}

impl OpKind {
    /// Kinds with a backward rule (everything but leaves and parameters).
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::L2Normalize,
        OpKind::MeanPool,
        OpKind::Sum,
        OpKind::SumN,
        OpKind::Dot,
        OpKind::Concat,
        OpKind::SliceRows,
        OpKind::GatherRows,
        OpKind::Row,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::MeanPool => "mean_pool",
            OpKind::Sum => "sum",
            OpKind::SumN => "sum_n",
            OpKind::Dot => "dot",
            OpKind::Concat => "concat",
            OpKind::SliceRows => "slice_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::Row => "row",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, f64),
    MeanPool(Var),
    Sum(Var),
    SumN(Vec<Var>),
    Dot(Var, Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Row(Var, usize),
    Pick(Var, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::MeanPool(..) => OpKind::MeanPool,
            Op::Sum(..) => OpKind::Sum,
            Op::SumN(..) => OpKind::SumN,
            Op::Dot(..) => OpKind::Dot,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Row(..) => OpKind::Row,
            Op::Pick(..) => OpKind::Pick,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order and `backward` walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    fault: Option<OpKind>,
    bound: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() < a.len() && a[a.len() - b.len()..] == *b)
}

/// Inner product with four fixed accumulation lanes.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sums a gradient of `full` shape down to the broadcast operand's length.
fn reduce_broadcast(g: &[f64], small_len: usize) -> Vec<f64> {
    if g.len() == small_len {
        return g.to_vec();
    }
    let mut out = vec![0.0; small_len];
    for chunk in g.chunks(small_len) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            fault: None,
            bound: Vec::new(),
        }
    }

    /// Tape whose dropout layers are active.
    pub fn training() -> Self {
        Self {
            train: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn set_training(&mut self, train: bool) {
        self.train = train;
    }

    /// Deliberately corrupts the backward rule of one op kind. Only used to
    /// prove that the gradient checker detects broken derivatives.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects a gradient on `backward` (readable via [`Tape::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Frozen parameters enter as constants.
    /// A parameter is bound once per tape; later calls reuse the node, so the
    /// store must not change while the tape is alive.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.index()) {
            return *v;
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.constant(p.value.clone())
        } else {
            self.push(p.value.clone(), Op::Param(id), true)
        };
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        self.bound[id.index()] = Some(v);
        v
    }

    /// Binds a parameter as a constant regardless of its frozen flag.
    pub fn param_detached(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).value.clone())
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Matrix product. `a` may be `[k]` or `[m, k]`; `b` may be `[k, n]` or `[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::Dimension(format!("matmul lhs shape {sa:?}"))),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => return Err(Error::Dimension(format!("matmul rhs shape {sb:?}"))),
        };
        if k != k2 || (a_vec && b_vec) {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        if b_vec {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot4(&ad[i * k..(i + 1) * k], bd);
            }
        }
        for i in (0..m).filter(|_| !b_vec) {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
        let shape = match (a_vec, b_vec) {
            (true, false) => vec![n],
            (false, true) => vec![m],
            _ => vec![m, n],
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Dimension(format!(
                "cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let shape = sa.to_vec();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let nb = bd.len();
        let out = if nb == 0 {
            Vec::new()
        } else {
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |e| e * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |e| e + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| if e <= 0.0 { 0.0 } else { e }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    fn require_vector(&self, x: Var, what: &str) -> Result<usize> {
        match self.shape(x) {
            [n] if *n >= 1 => Ok(*n),
            s => Err(Error::Dimension(format!(
                "{what} expects a non-empty vector, got shape {s:?}"
            ))),
        }
    }

    /// Softmax over a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.require_vector(x, "softmax")?;
        let out = softmax_values(self.value(x).data());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.require_vector(x, "log_softmax")?;
        let d = self.value(x).data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = d.iter().map(|v| v - lse).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax(x), rg))
    }

    /// `x / ||x||`; the zero vector maps to zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 1 {
            return Err(Error::Dimension(format!(
                "l2_normalize expects a vector, got {:?}",
                self.shape(x)
            )));
        }
        let d = self.value(x).data();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = if norm == 0.0 {
            vec![0.0; d.len()]
        } else {
            d.iter().map(|v| v / norm).collect()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::L2Normalize(x, norm), rg))
    }

    /// Column mean of an `[M, d]` matrix. `M = 0` yields the zero vector.
    pub fn mean_pool(&mut self, rows: Var) -> Result<Var> {
        let (m, d) = match self.shape(rows) {
            [m, d] => (*m, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "mean_pool expects a matrix, got {s:?}"
                )))
            }
        };
        let mut out = vec![0.0; d];
        if m > 0 {
            let data = self.value(rows).data();
            for row in data.chunks(d) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / m as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[rows]) && m > 0;
        Ok(self.push(Tensor::vector(out), Op::MeanPool(rows), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of equally-shaped tensors.
    pub fn sum_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("sum_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "sum_n shape {:?} vs {shape:?}",
                    self.shape(x)
                )));
            }
            out.iter_mut()
                .zip(self.value(x).data())
                .for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumN(xs.to_vec()), rg))
    }

    /// Inner product of two equal-length vectors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.value(a).rank() != 1 {
            return Err(Error::Dimension(format!(
                "dot of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &x in xs {
            if self.value(x).rank() != 1 {
                return Err(Error::Dimension(format!(
                    "concat expects vectors, got {:?}",
                    self.shape(x)
                )));
            }
            out.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::vector(out), Op::Concat(xs.to_vec()), rg))
    }

    /// Rows `[start, end)` of a matrix; an empty range gives a `[0, d]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, d) = match self.shape(x) {
            [m, d] => (*m, *d),
            s => return Err(Error::Dimension(format!("slice_rows of {s:?}"))),
        };
        if start > end || end > m {
            return Err(Error::Contract(format!(
                "row range [{start}, {end}) outside matrix with {m} rows"
            )));
        }
        let data = self.value(x).data()[start * d..end * d].to_vec();
        let rg = self.rg(&[x]) && end > start;
        Ok(self.push(
            Tensor::matrix(end - start, d, data)?,
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Row lookup by index list (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, d) = match self.shape(table) {
            [m, d] => (*m, *d),
            s => return Err(Error::Dimension(format!("gather_rows of {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= m {
                return Err(Error::Validation(format!(
                    "row index {i} out of range for table with {m} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let m = match self.shape(x) {
            [m, _] => *m,
            s => return Err(Error::Dimension(format!("row of {s:?}"))),
        };
        if i >= m {
            return Err(Error::Contract(format!("row {i} of matrix with {m} rows")));
        }
        let data = self.value(x).row(i).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Row(x, i), rg))
    }

    /// Element `i` of a tensor (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(i)
            .ok_or_else(|| Error::Contract(format!("pick index {i} out of range")))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, i), rg))
    }

    /// Affine map `x W + b` for `x` of shape `[in]` or `[M, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add(y, bias)
    }

    /// Inverted dropout. Identity when the tape is not in training mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, mask)
    }

    /// `[x]_+ = max(0, x)`; the subgradient at 0 is 0.
    pub fn hinge(&mut self, x: Var) -> Var {
        self.relu(x)
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients accumulate into
    /// `store`; other gradients are readable through [`Tape::grad`] until the
    /// next call.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // every delta is linear in g, so corrupting g corrupts them all
        let corrupted: Vec<f64>;
        let g = if self.fault == Some(node.op.kind()) {
            corrupted = g.iter().map(|d| d * 1.1).collect();
            &corrupted[..]
        } else {
            g
        };
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(d) => d.iter_mut().zip(&delta).for_each(|(d, s)| *d += s),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = match av.shape() {
                    [k] => (1, *k),
                    [m, k] => (*m, *k),
                    _ => unreachable!(),
                };
                let n = match bv.shape() {
                    [_, n] => *n,
                    _ => 1,
                };
                let (ad, bd) = (av.data(), bv.data());
                if self.nodes[a.0].requires_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = dot4(grow, brow);
                        }
                    }
                    send(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T G, accumulated in place
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    debug_assert_eq!(db.len(), k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += av * gv);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.to_vec());
                let nb = self.value(*b).len();
                send(grads, *b, reduce_broadcast(g, nb));
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.to_vec());
                let nb = self.value(*b).len();
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(grads, *b, reduce_broadcast(&neg, nb));
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let nb = bd.len();
                if self.nodes[a.0].requires_grad {
                    let da = g.iter().enumerate().map(|(j, gv)| gv * bd[j % nb]).collect();
                    send(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    send(grads, *b, reduce_broadcast(&full, nb));
                }
            }
            Op::Scale(x, c) => send(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(grads, *x, g.to_vec()),
            Op::Sigmoid(x) => send(
                grads,
                *x,
                g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(x) => send(
                grads,
                *x,
                g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
            ),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                send(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
            }
            Op::Exp(x) => send(grads, *x, g.iter().zip(out).map(|(gv, y)| gv * y).collect()),
            Op::Softmax(x) => {
                let gy: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                send(
                    grads,
                    *x,
                    g.iter().zip(out).map(|(gv, y)| y * (gv - gy)).collect(),
                )
            }
            Op::LogSoftmax(x) => {
                let total: f64 = g.iter().sum();
                send(
                    grads,
                    *x,
                    g.iter()
                        .zip(out)
                        .map(|(gv, ly)| gv - ly.exp() * total)
                        .collect(),
                )
            }
            Op::L2Normalize(x, norm) => {
                if *norm != 0.0 {
                    let gy: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                    send(
                        grads,
                        *x,
                        g.iter()
                            .zip(out)
                            .map(|(gv, y)| (gv - y * gy) / norm)
                            .collect(),
                    )
                }
            }
            Op::MeanPool(x) => {
                let m = self.value(*x).rows();
                let inv = 1.0 / m as f64;
                let mut dx = Vec::with_capacity(m * g.len());
                for _ in 0..m {
                    dx.extend(g.iter().map(|v| v * inv));
                }
                send(grads, *x, dx)
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                send(grads, *x, vec![g[0]; len])
            }
            Op::SumN(xs) => {
                for &x in xs {
                    send(grads, x, g.to_vec());
                }
            }
            Op::Dot(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    send(grads, *a, bd.iter().map(|v| v * g[0]).collect());
                }
                if self.nodes[b.0].requires_grad {
                    send(grads, *b, ad.iter().map(|v| v * g[0]).collect());
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    send(grads, x, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(dx) = self.accumulator(grads, *x) {
                    let d = self.value(*x).cols();
                    dx[start * d..start * d + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherRows(table, ids) => {
                if let Some(dx) = self.accumulator(grads, *table) {
                    let d = self.value(*table).cols();
                    for (r, &id) in ids.iter().enumerate() {
                        dx[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Row(x, r) => {
                if let Some(dx) = self.accumulator(grads, *x) {
                    let d = self.value(*x).cols();
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Pick(x, idx) => {
                if let Some(dx) = self.accumulator(grads, *x) {
                    dx[*idx] += g[0];
                }
            }
        }
    }

    /// Gradient buffer of `v`, created zeroed on first use; `None` when `v`
    /// does not need a gradient.
    fn accumulator<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
