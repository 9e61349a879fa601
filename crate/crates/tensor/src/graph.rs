use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Normalization epsilon for `l2_normalize` and `cosine_similarity`.
pub const NORM_EPS: f64 = 1e-12;
/// Variance epsilon for layer and batch normalization.
pub const VAR_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Elu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
    Recip,
    Softplus,
    /// Huber with transition point 1: `0.5x²` inside, `|x| − 0.5` outside.
    SmoothL1,
    MulScalar(f64),
    AddScalar(f64),
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Softplus => softplus(x),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            }
            Unary::MulScalar(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Softplus => sigmoid(x),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    x
                } else {
                    x.signum()
                }
            }
            Unary::MulScalar(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Gelu => "gelu",
            Unary::Elu => "elu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Neg => "neg",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Recip => "recip",
            Unary::Softplus => "softplus",
            Unary::SmoothL1 => "smooth_l1",
            Unary::MulScalar(_) => "mul_scalar",
            Unary::AddScalar(_) => "add_scalar",
        }
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

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax { x: Var, axis: usize, temperature: f64 },
    LogSoftmax(Var),
    LogSumExp(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: BTreeMap<(u64, ParamId), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, bound: BTreeMap::new() }
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, bound: BTreeMap::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_need_grad: bool) -> Var {
        let needs_grad = self.grad_enabled && inputs_need_grad;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf whose gradient is tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same
    /// node so gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let tracked = store.is_tracked(id);
        let v = self.push(store.value(id).clone().with_requires_grad(false), Op::Leaf, tracked);
        self.bound.insert(key, v);
        v
    }

    pub(crate) fn bound_params(&self, store_uid: u64) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .filter(move |((uid, _), _)| *uid == store_uid)
            .map(|((_, id), v)| (*id, *v))
    }

    /// Same value, severed from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            Unary::Log if xv.data().iter().any(|&v| v <= 0.0) => {
                return Err(TensorError::Domain { op: "log", msg: "non-positive input".into() })
            }
            Unary::Sqrt if xv.data().iter().any(|&v| v < 0.0) => {
                return Err(TensorError::Domain { op: "sqrt", msg: "negative input".into() })
            }
            Unary::Recip if xv.data().iter().any(|&v| v == 0.0) => {
                return Err(TensorError::Domain { op: "recip", msg: "zero input".into() })
            }
            _ => {}
        }
        let out = xv.map(|v| kind.forward(v));
        if !out.all_finite() && xv.all_finite() {
            return Err(TensorError::NonFinite(kind.name().into()));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Unary(x, kind), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Elu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::SmoothL1)
    }
    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::MulScalar(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "div")?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain { op: "div", msg: "division by zero".into() });
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    /// `a[i, j] + r[j]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(r).numel() != n {
            return Err(mismatch("add_row", self.value(a), self.value(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(a).clone().with_requires_grad(false);
        for i in 0..m {
            for (o, &b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(out, Op::AddRow(a, r), ng))
    }

    /// `a[i, j] · r[j]`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(r).numel() != n {
            return Err(mismatch("mul_row", self.value(a), self.value(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(a).clone().with_requires_grad(false);
        for i in 0..m {
            for (o, &b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(out, Op::MulRow(a, r), ng))
    }

    /// `a[i, j] · c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(c).numel() != m {
            return Err(mismatch("mul_col", self.value(a), self.value(c)));
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).clone().with_requires_grad(false);
        for i in 0..m {
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o *= cv[i];
            }
        }
        let ng = self.ng(a) || self.ng(c);
        Ok(self.push(out, Op::MulCol(a, c), ng))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(mismatch("scale", self.value(a), self.value(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    /// Divides every entry of `a` by the one-element tensor `s`.
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let inv = self.recip(s)?;
        self.scale(a, inv)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumAll(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over axis 0 of the matrix view, giving `1×n`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![1, n], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumRows(x), ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims2();
        let s = self.sum_rows(x)?;
        self.mul_scalar(s, 1.0 / m as f64)
    }

    /// Sum over axis 1 of the matrix view, giving `m×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..m).map(|i| xv[i * n..(i + 1) * n].iter().sum()).collect();
        let out = Tensor::new(vec![m, 1], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumCols(x), ng))
    }

    // ---- normalized exponentials -------------------------------------

    /// Max-subtracted softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("temperature must be positive, got {temperature}"),
            });
        }
        let xv = self.value(x);
        let shape = if xv.rank() == 0 { vec![1] } else { xv.shape().to_vec() };
        if axis >= shape.len() {
            return Err(TensorError::OutOfRange { op: "softmax", index: axis, extent: shape.len() });
        }
        let out = softmax_axis(xv.data(), &shape, axis, temperature);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, axis, temperature }, ng))
    }

    /// Row-wise log-softmax (last axis of the matrix view).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = xv.clone().with_requires_grad(false);
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSoftmax(x), ng))
    }

    /// Row-wise log-sum-exp, giving `m×1`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let out: Vec<f64> = (0..m).map(|i| logsumexp(&xv.data()[i * n..(i + 1) * n])).collect();
        let out = Tensor::new(vec![m, 1], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSumExp(x), ng))
    }

    // ---- normalization -----------------------------------------------

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`NORM_EPS`] are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = xv.clone().with_requires_grad(false);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nr > NORM_EPS) {
                return Err(TensorError::Domain {
                    op: "l2_normalize",
                    msg: format!("row {i} has norm {nr:e} below {NORM_EPS:e}"),
                });
            }
            for v in row.iter_mut() {
                *v /= nr;
            }
            norms.push(nr);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, ng))
    }

    /// Row-wise standardization (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = xv.clone().with_requires_grad(false);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + VAR_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            inv_std.push(r);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, ng))
    }

    /// Column-wise standardization over the batch (rows), biased variance.
    /// Returns the normalized node plus per-column batch mean and biased
    /// variance for running-statistics bookkeeping.
    pub fn batch_norm(&mut self, x: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = xv.clone().with_requires_grad(false);
        let mut means = vec![0.0; n];
        let mut vars = vec![0.0; n];
        let d = out.data_mut();
        for j in 0..n {
            let mu = (0..m).map(|i| d[i * n + j]).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (d[i * n + j] - mu).powi(2)).sum::<f64>() / m as f64;
            means[j] = mu;
            vars[j] = var;
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + VAR_EPS).sqrt()).collect();
        for i in 0..m {
            for j in 0..n {
                d[i * n + j] = (d[i * n + j] - means[j]) * inv_std[j];
            }
        }
        let ng = self.ng(x);
        let v = self.push(out, Op::BatchNorm { x, inv_std }, ng);
        Ok((v, means, vars))
    }

    // ---- shape -------------------------------------------------------

    /// Concatenates matrix views along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() });
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let out = match axis {
            0 => {
                let n = dims[0].1;
                if let Some(i) = dims.iter().position(|d| d.1 != n) {
                    return Err(mismatch("concat", self.value(parts[0]), self.value(parts[i])));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(m * n);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![m, n], data)?
            }
            1 => {
                let m = dims[0].0;
                if let Some(i) = dims.iter().position(|d| d.0 != m) {
                    return Err(mismatch("concat", self.value(parts[0]), self.value(parts[i])));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            _ => return Err(TensorError::OutOfRange { op: "concat", index: axis, extent: 2 }),
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if range.start >= range.end || range.end > m {
            return Err(TensorError::OutOfRange { op: "slice_rows", index: range.end, extent: m });
        }
        let data = self.value(x).data()[range.start * n..range.end * n].to_vec();
        let out = Tensor::new(vec![range.len(), n], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows(x, range.start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if range.start >= range.end || range.end > n {
            return Err(TensorError::OutOfRange { op: "slice_cols", index: range.end, extent: n });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * range.len());
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[range.clone()]);
        }
        let out = Tensor::new(vec![m, range.len()], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, range.start), ng))
    }

    /// Selects rows of the matrix view; rank-1 input gathers scalars.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank1 = xv.rank() == 1;
        let (m, n) = if rank1 { (xv.numel(), 1) } else { xv.dims2() };
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument { op: "gather", msg: "no indices".into() });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::OutOfRange { op: "gather", index: i, extent: m });
            }
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let shape = if rank1 { vec![indices.len()] } else { vec![indices.len(), n] };
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Forward value `forced`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, forced: Tensor) -> Result<Var> {
        if forced.shape() != self.shape(x) {
            return Err(mismatch("straight_through", self.value(x), &forced));
        }
        let ng = self.ng(x);
        Ok(self.push(forced.with_requires_grad(false), Op::StraightThrough(x), ng))
    }

    // ---- composites --------------------------------------------------

    /// Cosine similarity of two equally-shaped tensors as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "cosine_similarity")?;
        let n = self.value(a).numel();
        let ar = self.reshape(a, &[1, n])?;
        let br = self.reshape(b, &[1, n])?;
        let an = self.l2_normalize(ar)?;
        let bn = self.l2_normalize(br)?;
        let p = self.mul(an, bn)?;
        self.sum(p)
    }

    /// `x · W + b` with `W: in×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let h = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(h, b),
            None => Ok(h),
        }
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Every node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            for (v, contrib) in self.node_backward(i, g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut lo[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                out.push((*x, like(xv, data)));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2();
                let (_, n) = bv.dims2();
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    out.push((*a, like(av, ga)));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, m, k, n);
                    out.push((*b, like(bv, gb)));
                }
            }
            Op::Transpose(x) => {
                let t = g.transpose();
                out.push((*x, like(val(*x), t.into_data())));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(val(*b), |gi, bi| gi * bi)));
                out.push((*b, g.zip_map(val(*a), |gi, ai| gi * ai)));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                out.push((*a, g.zip_map(bv, |gi, bi| gi / bi)));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(bv.data())
                    .map(|((&gi, &yi), &bi)| -gi * yi / bi)
                    .collect();
                out.push((*b, like(bv, gb)));
            }
            Op::AddRow(a, r) => {
                out.push((*a, g.clone()));
                if self.ng(*r) {
                    let cs = col_sums(g.data(), g.dims2());
                    out.push((*r, like(val(*r), cs)));
                }
            }
            Op::MulRow(a, r) => {
                let (m, n) = g.dims2();
                let rv = val(*r).data();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..m {
                        for (x, &b) in ga.data_mut()[i * n..(i + 1) * n].iter_mut().zip(rv) {
                            *x *= b;
                        }
                    }
                    out.push((*a, like(val(*a), ga.into_data())));
                }
                if self.ng(*r) {
                    let prod = g.zip_map(val(*a), |gi, ai| gi * ai);
                    out.push((*r, like(val(*r), col_sums(prod.data(), (m, n)))));
                }
            }
            Op::MulCol(a, c) => {
                let (m, n) = g.dims2();
                let cv = val(*c).data();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..m {
                        for x in &mut ga.data_mut()[i * n..(i + 1) * n] {
                            *x *= cv[i];
                        }
                    }
                    out.push((*a, like(val(*a), ga.into_data())));
                }
                if self.ng(*c) {
                    let prod = g.zip_map(val(*a), |gi, ai| gi * ai);
                    let rs: Vec<f64> =
                        (0..m).map(|i| prod.data()[i * n..(i + 1) * n].iter().sum()).collect();
                    out.push((*c, like(val(*c), rs)));
                }
            }
            Op::Scale(a, s) => {
                let sv = val(*s).item();
                out.push((*a, g.map(|v| v * sv)));
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    out.push((*s, like(val(*s), vec![d])));
                }
            }
            Op::SumAll(x) => {
                let gi = g.item();
                out.push((*x, Tensor::full(val(*x).shape(), gi)));
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(g.data());
                }
                out.push((*x, like(xv, data)));
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    data.extend(std::iter::repeat(g.data()[i]).take(n));
                }
                out.push((*x, like(xv, data)));
            }
            Op::Softmax { x, axis, temperature } => {
                let xv = val(*x);
                let shape = if xv.rank() == 0 { vec![1] } else { xv.shape().to_vec() };
                let (outer, len, inner) = axis_split(&shape, *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + q;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot) / temperature;
                        }
                    }
                }
                out.push((*x, like(xv, gx)));
            }
            Op::LogSoftmax(x) => {
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = g.row(i)[j] - y.row(i)[j].exp() * gs;
                    }
                }
                out.push((*x, like(val(*x), gx)));
            }
            Op::LogSumExp(x) => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let lse = y.data()[i];
                    for j in 0..n {
                        gx[i * n + j] = g.data()[i] * (xv.row(i)[j] - lse).exp();
                    }
                }
                out.push((*x, like(xv, gx)));
            }
            Op::L2Normalize { x, norms } => {
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                out.push((*x, like(val(*x), gx)));
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gr[j] - gm - yr[j] * gym);
                    }
                }
                out.push((*x, like(val(*x), gx)));
            }
            Op::BatchNorm { x, inv_std } => {
                let (m, n) = y.dims2();
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; m * n];
                for j in 0..n {
                    let gm = (0..m).map(|i| gd[i * n + j]).sum::<f64>() / m as f64;
                    let gym = (0..m).map(|i| gd[i * n + j] * yd[i * n + j]).sum::<f64>() / m as f64;
                    for i in 0..m {
                        gx[i * n + j] = inv_std[j] * (gd[i * n + j] - gm - yd[i * n + j] * gym);
                    }
                }
                out.push((*x, like(val(*x), gx)));
            }
            Op::Concat { parts, axis } => {
                let (_, total_n) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let (pm, pn) = pv.dims2();
                    let data = if *axis == 0 {
                        let d = g.data()[offset * pn..(offset + pm) * pn].to_vec();
                        offset += pm;
                        d
                    } else {
                        let mut d = Vec::with_capacity(pm * pn);
                        for i in 0..pm {
                            d.extend_from_slice(&g.data()[i * total_n + offset..i * total_n + offset + pn]);
                        }
                        offset += pn;
                        d
                    };
                    if self.ng(p) {
                        out.push((p, like(pv, data)));
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let (_, n) = xv.dims2();
                let mut gx = vec![0.0; xv.numel()];
                gx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                out.push((*x, like(xv, gx)));
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let (_, w) = g.dims2();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                out.push((*x, like(xv, gx)));
            }
            Op::GatherRows(x, indices) => {
                let xv = val(*x);
                let n = if xv.rank() == 1 { 1 } else { xv.dims2().1 };
                let mut gx = vec![0.0; xv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g.data()[r * n + j];
                    }
                }
                out.push((*x, like(xv, gx)));
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                out.push((*x, like(val(*x), g.data().to_vec())));
            }
        }
        out
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient matches input shape")
}

fn col_sums(d: &[f64], (m, n): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, temperature: f64) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + q;
            let mx = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = ((x[idx(j)] - mx) / temperature).exp();
                out[idx(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[idx(j)] /= s;
            }
        }
    }
    out
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
