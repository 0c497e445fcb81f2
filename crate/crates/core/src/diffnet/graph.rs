//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to an arena. [`Graph::grad`] walks the
//! tape backwards and expresses each adjoint with the same operations, so
//! gradients are themselves graph nodes and can be differentiated again.
//! The gradient penalty relies on this: the input gradient of the
//! discriminator is built as a subgraph that still depends on the
//! parameters.

use super::tensor::{self, Shape, Tensor};
use crate::error::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumTo(Var),
    Expand(Var),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    MaskMul(Var, Tensor),
    Softmax(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SumTo(..) => "sum_to",
            Op::Expand(..) => "expand",
            Op::Powf(..) => "powf",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::MaskMul(..) => "mask_mul",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumTo(a)
            | Op::Expand(a)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::MaskMul(a, _)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<(&'static str, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Masks of every piecewise-linear node (relu, leaky_relu, clamp) in
    /// creation order. Two evaluations of the same graph construction with
    /// equal patterns lie on the same smooth piece.
    pub fn mask_pattern(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaskMul(_, m) => Some(m.data()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    /// Error for the first node of an operation that turns finite inputs
    /// into NaN or infinity (leaves, `log`, `powf`, `exp`).
    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.first_non_finite {
            Some((op, node)) => Err(DiffError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Like [`Graph::check_finite`], and additionally requires `outputs` to
    /// be finite. When one is not, the tape is scanned for the first node
    /// holding a non-finite value, which catches overflow in any operation.
    pub fn check_outputs(&self, outputs: &[Var]) -> Result<(), DiffError> {
        self.check_finite()?;
        if outputs.iter().all(|v| self.value(*v).is_finite()) {
            return Ok(());
        }
        let (i, node) = self
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .expect("a non-finite output is itself a node");
        Err(DiffError::NonFinite {
            op: node.op.name(),
            node: i,
        })
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        let can_originate = matches!(op, Op::Leaf | Op::Log(..) | Op::Powf(..) | Op::Exp(..));
        if can_originate && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((op.name(), id));
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = tensor::broadcast_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = tensor::broadcast_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = tensor::broadcast_map("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = tensor::map(self.value(a), |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = tensor::map(self.value(a), |x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Var {
        let v = tensor::transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var, DiffError> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Sums down to `shape`; a no-op when the shape already matches.
    pub fn sum_to(&mut self, a: Var, shape: Shape) -> Result<Var, DiffError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = tensor::sum_to(self.value(a), shape)?;
        Ok(self.push(v, Op::SumTo(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, [1, 1, 1]).expect("any shape reduces to a scalar")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn expand(&mut self, a: Var, shape: Shape) -> Result<Var, DiffError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = tensor::expand(self.value(a), shape)?;
        Ok(self.push(v, Op::Expand(a)))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = tensor::map(self.value(a), |x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var, DiffError> {
        if mask.shape() != self.shape(a) {
            return Err(DiffError::Shape {
                op: "mask_mul",
                lhs: self.shape(a),
                rhs: mask.shape(),
            });
        }
        let v = tensor::broadcast_map("mask_mul", self.value(a), &mask, |x, m| x * m)?;
        Ok(self.push(v, Op::MaskMul(a, mask)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask = tensor::map(self.value(a), |x| if x > 0.0 { 1.0 } else { slope });
        self.mask_mul(a, mask).expect("mask built from the input shape")
    }

    /// Clamps into `[lo, hi]`; the derivative is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let mask = tensor::map(x, |v| if v < lo || v > hi { 0.0 } else { 1.0 });
        let offset = tensor::map(x, |v| v.clamp(lo, hi) - if v < lo || v > hi { 0.0 } else { v });
        let masked = self.mask_mul(a, mask).expect("mask built from the input shape");
        if offset.data().iter().all(|&o| o == 0.0) {
            return masked;
        }
        let off = self.leaf(offset);
        self.add(masked, off).expect("same shape")
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&ts)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, DiffError> {
        let v = tensor::slice_cols(self.value(a), start, width)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, DiffError> {
        let v = tensor::pad_cols(self.value(a), start, total)?;
        Ok(self.push(v, Op::PadCols(a, start)))
    }

    /// Gradients of `sum(y)` with respect to each of `wrt`.
    ///
    /// The returned handles are ordinary nodes: they can enter further
    /// computations and be differentiated again.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        let n = y.0 + 1;
        let mut needed = vec![false; n];
        for w in wrt {
            if w.0 < n {
                needed[w.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] {
                needed[i] = self.nodes[i].op.inputs().iter().any(|v| needed[v.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed = self.leaf(Tensor::full(self.shape(y), 1.0));
        if needed[y.0] {
            adj[y.0] = Some(seed);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward(Var(i), &op, g, &needed)? {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w);
                    self.leaf(Tensor::zeros(shape))
                }
            })
            .collect())
    }

    fn backward(&mut self, out: Var, op: &Op, g: Var, needed: &[bool]) -> Result<Vec<(Var, Var)>, DiffError> {
        let need = |v: &Var| needed[v.0];
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if need(a) {
                    let s = self.shape(*a);
                    res.push((*a, self.sum_to(g, s)?));
                }
                if need(b) {
                    let s = self.shape(*b);
                    let gb = if matches!(op, Op::Sub(..)) { self.neg(g) } else { g };
                    res.push((*b, self.sum_to(gb, s)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let s = self.shape(*a);
                    let t = self.mul(g, *b)?;
                    res.push((*a, self.sum_to(t, s)?));
                }
                if need(b) {
                    let s = self.shape(*b);
                    let t = self.mul(g, *a)?;
                    res.push((*b, self.sum_to(t, s)?));
                }
            }
            Op::Scale(a, k) => {
                if need(a) {
                    res.push((*a, self.scale(g, *k)));
                }
            }
            Op::AddScalar(a) => {
                if need(a) {
                    res.push((*a, g));
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let sg = self.shape(g);
                if need(a) {
                    let bt = self.transpose(*b);
                    let ga = self.matmul(g, bt)?;
                    res.push((*a, self.sum_to(ga, sa)?));
                }
                if need(b) {
                    let gb = if sb[0] == 1 && sg[0] > 1 {
                        // fold the batch into rows so one product suffices
                        let ae = if sa[0] == 1 {
                            self.expand(*a, [sg[0], sa[1], sa[2]])?
                        } else {
                            *a
                        };
                        let af = self.reshape(ae, [1, sg[0] * sa[1], sa[2]])?;
                        let gf = self.reshape(g, [1, sg[0] * sg[1], sg[2]])?;
                        let at = self.transpose(af);
                        self.matmul(at, gf)?
                    } else {
                        let at = self.transpose(*a);
                        let p = self.matmul(at, g)?;
                        self.sum_to(p, sb)?
                    };
                    res.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                if need(a) {
                    res.push((*a, self.transpose(g)));
                }
            }
            Op::Reshape(a) => {
                if need(a) {
                    let s = self.shape(*a);
                    res.push((*a, self.reshape(g, s)?));
                }
            }
            Op::SumTo(a) => {
                if need(a) {
                    let s = self.shape(*a);
                    res.push((*a, self.expand(g, s)?));
                }
            }
            Op::Expand(a) => {
                if need(a) {
                    let s = self.shape(*a);
                    res.push((*a, self.sum_to(g, s)?));
                }
            }
            Op::Powf(a, p) => {
                if need(a) {
                    let d = self.powf(*a, p - 1.0);
                    let d = self.scale(d, *p);
                    res.push((*a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => {
                if need(a) {
                    res.push((*a, self.mul(g, out)?));
                }
            }
            Op::Log(a) => {
                if need(a) {
                    let inv = self.powf(*a, -1.0);
                    res.push((*a, self.mul(g, inv)?));
                }
            }
            Op::Sigmoid(a) => {
                if need(a) {
                    let one_minus = self.scale(out, -1.0);
                    let one_minus = self.add_scalar(one_minus, 1.0);
                    let d = self.mul(out, one_minus)?;
                    res.push((*a, self.mul(g, d)?));
                }
            }
            Op::MaskMul(a, m) => {
                if need(a) {
                    res.push((*a, self.mask_mul(g, m.clone())?));
                }
            }
            Op::Softmax(a) => {
                if need(a) {
                    let [b, r, _] = self.shape(out);
                    let gy = self.mul(g, out)?;
                    let s = self.sum_to(gy, [b, r, 1])?;
                    let centered = self.sub(g, s)?;
                    res.push((*a, self.mul(out, centered)?));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p)[2];
                    if need(p) {
                        res.push((*p, self.slice_cols(g, start, w)?));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                if need(a) {
                    let total = self.shape(*a)[2];
                    res.push((*a, self.pad_cols(g, *start, total)?));
                }
            }
            Op::PadCols(a, start) => {
                if need(a) {
                    let w = self.shape(*a)[2];
                    res.push((*a, self.slice_cols(g, *start, w)?));
                }
            }
        }
        Ok(res)
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
