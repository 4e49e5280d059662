//! Wengert tape: operations are recorded in execution order and replayed in
//! reverse to accumulate gradients.
//!
//! A [`Var`] is an index into the tape. Inputs of a node always have smaller
//! indices than the node, so recording order is a topological order and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{broadcast_index, broadcast_shape, reduce_to_shape, Conv2dGeom, MatmulPlan, PadMode};
use crate::rng;
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    /// tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    Silu,
    Tanh,
}

/// Selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Gelu,
    Silu,
    Relu,
}

pub const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
        eps: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    Index {
        x: Var,
        index: Vec<usize>,
        name: &'static str,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    SumAll {
        x: Var,
    },
    MeanLast {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { op, .. } => match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::Unary { op, .. } => match op {
                UnaryOp::Relu => "relu",
                UnaryOp::Gelu => "gelu",
                UnaryOp::Silu => "silu",
                UnaryOp::Tanh => "tanh",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Index { name, .. } => name,
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Dropout { .. } => "dropout",
            Op::SumAll { .. } => "sum",
            Op::MeanLast { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Index { x, .. }
            | Op::Reshape { x }
            | Op::Dropout { x, .. }
            | Op::SumAll { x }
            | Op::MeanLast { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Per-channel statistics measured by a batch-norm in batch-statistics mode.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel the statistics were measured on.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<(&'static str, f64)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn normalize_axis(axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::dim(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

/// (outer, axis length, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Index map for permuting the axes of `shape`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim(format!("invalid permutation {axes:?} for rank {rank}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_str = strides(shape);
    let src_str: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        index.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= src_str[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, index))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Turns the per-op NaN/Inf check on or off (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Test hook: scales every gradient that `op` passes to its inputs by
    /// `factor`, so gradient checks can prove they detect a broken backward.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    /// Records a leaf. Gradients are accumulated only for leaves with
    /// `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ------------------------------------------------

    /// `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = plan.forward(self.data(a), self.data(b));
        self.push(plan.out_shape.clone(), out, Op::MatMul { a, b, plan })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::dim("transpose needs rank >= 2".to_string()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, index) = permute_index(self.shape(x), axes)?;
        self.gather(x, shape, index, "permute")
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatters-adds.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>, name: &'static str) -> Result<Var> {
        let src = self.data(x);
        if numel(&shape) != index.len() {
            return Err(Error::dim(format!(
                "{name}: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!("{name}: index {bad} out of range {}", src.len())));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        self.push(shape, out, Op::Index { x, index, name })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let data = v.into_data();
        self.push(shape.to_vec(), data, Op::Reshape { x })
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                let base = (o * n + j) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, out_shape, index, "narrow")
    }

    /// Rows `ids` of a `[n, d]` table, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("embedding table must be rank 2, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for table of {n} rows"
            )));
        }
        let index = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(table, vec![ids.len(), d], index, "embedding")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::dim("concat of nothing".to_string()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(format!("concat shape mismatch: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let (ia, ib) = (broadcast_index(&sa, &shape), broadcast_index(&sb, &shape));
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        self.push(shape, out, Op::Binary { op, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c })
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| {
                let f = v.as_f64();
                T::from_f64(match op {
                    UnaryOp::Relu => f.max(0.0),
                    UnaryOp::Gelu => gelu_fwd(f),
                    UnaryOp::Silu => f * sigmoid(f),
                    UnaryOp::Tanh => f.tanh(),
                })
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Unary { op, x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    /// Dispatch over the elementwise family. Binary ops fold left over the
    /// operands; activations take exactly one.
    pub fn elementwise(&mut self, op: Elementwise, xs: &[Var]) -> Result<Var> {
        let arity_err = || Error::Contract(format!("{op:?} got {} operands", xs.len()));
        match op {
            Elementwise::Add | Elementwise::Mul => {
                let (&first, rest) = xs.split_first().ok_or_else(arity_err)?;
                if rest.is_empty() {
                    return Err(arity_err());
                }
                let kind = if op == Elementwise::Add {
                    BinaryOp::Add
                } else {
                    BinaryOp::Mul
                };
                rest.iter().try_fold(first, |acc, &v| self.binary(kind, acc, v))
            }
            Elementwise::Gelu | Elementwise::Silu | Elementwise::Relu => {
                let [x] = xs else { return Err(arity_err()) };
                let kind = match op {
                    Elementwise::Gelu => UnaryOp::Gelu,
                    Elementwise::Silu => UnaryOp::Silu,
                    _ => UnaryOp::Relu,
                };
                self.unary(kind, *x)
            }
        }
    }

    // ---- normalization -------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the last axis where `key_valid[b * n + j]` says whether
    /// key `j` of batch item `b` (the leading axis) takes part. Masked keys
    /// get probability 0, the same result as adding `-inf` to their logits.
    pub fn masked_softmax(&mut self, x: Var, key_valid: &[bool]) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar".to_string()))?;
        if shape.len() < 2 || shape[0] * n != key_valid.len() {
            return Err(Error::dim(format!(
                "mask of length {} does not match {:?}",
                key_valid.len(),
                shape
            )));
        }
        self.softmax_impl(x, -1, Some(key_valid.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, axis: isize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let rows_per_batch = numel(&shape) / shape[0] / n;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let valid = |j: usize| match &mask {
                    None => true,
                    Some(m) => m[(o / rows_per_batch) * n + j],
                };
                let mut mx = T::neg_infinity();
                for j in (0..n).filter(|&j| valid(j)) {
                    mx = mx.max(src[at(j)]);
                }
                if mx == T::neg_infinity() {
                    return Err(Error::dim("softmax row has no unmasked entries".to_string()));
                }
                let mut sum = T::zero();
                for j in (0..n).filter(|&j| valid(j)) {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in (0..n).filter(|&j| valid(j)) {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis })
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm of a scalar".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let dn = T::from_usize(d);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Batch norm over axis 1 of `[b, c, ...]`.
    ///
    /// With `running = None` the statistics are measured on the batch and
    /// returned alongside the output; with `Some((mean, var))` the stored
    /// statistics are used (inference mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs [b, c, ...], got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("batch_norm affine shape mismatch for {c} channels")));
        }
        let (b, inner) = (shape[0], numel(&shape[2..]));
        let src = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let count = T::from_usize(b * inner);
        let eps = T::from_f64(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("running statistics length mismatch".to_string()));
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
            None => {
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s = s + src[(bi * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let mu = s / count;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        sq = sq
                            + src[(bi * c + ch) * inner..][..inner]
                                .iter()
                                .map(|&v| (v - mu) * (v - mu))
                                .sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
            }
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for k in 0..inner {
                    let h = (src[base + k] - mean[ch]) * rstd[ch];
                    xhat[base + k] = h;
                    out[base + k] = h * g[ch] + bt[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
            },
        )?;
        Ok((
            v,
            batch_stats.then_some(BatchStats {
                mean,
                var,
                count: b * inner,
            }),
        ))
    }

    /// `x / max(||x||, eps)` for every slice along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: isize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let epsv = T::from_f64(eps);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let nrm = (0..n).map(|j| src[at(j)] * src[at(j)]).sum::<T>().sqrt();
                norms[o * inner + i] = nrm;
                let denom = nrm.max(epsv);
                for j in 0..n {
                    out[at(j)] = src[at(j)] / denom;
                }
            }
        }
        self.push(
            shape,
            out,
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps: epsv,
            },
        )
    }

    // ---- convolution ---------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let geom = Conv2dGeom::new(self.shape(x), self.shape(w), stride, padding, groups, pad_mode)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let out = geom.forward(self.data(x), self.data(w), bias.map(|b| self.data(b)));
        self.push(geom.out_shape(), out, Op::Conv2d { x, w, bias, geom })
    }

    // ---- stochastic ----------------------------------------------------

    /// Inverted dropout. The keep decision for element `i` is
    /// `draw_unit(seed, i) >= p`, so a seed fixes the mask.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..self.data(x).len())
            .map(|i| {
                if rng::draw_unit(seed, i as u64) >= p {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = self.data(x).iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Dropout { x, scale })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(vec![], vec![s], Op::SumAll { x })
    }

    /// Mean over the last axis (the axis is dropped).
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("mean of a scalar".to_string()))?;
        let dn = T::from_usize(n);
        let out = self
            .data(x)
            .chunks(n)
            .map(|c| c.iter().copied().sum::<T>() / dn)
            .collect();
        self.push(shape[..shape.len() - 1].to_vec(), out, Op::MeanLast { x })
    }

    /// Mean over the batch of `-log softmax(logits[b])[targets[b]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (b, n) = match shape.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            _ => {
                return Err(Error::dim(format!(
                    "cross_entropy logits must be [n] or [b, n], got {shape:?}"
                )))
            }
        };
        if targets.len() != b {
            return Err(Error::dim(format!("{} targets for batch of {b}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target class {t} out of range for {n} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&v| (v - mx).exp()).sum::<T>();
            let lse = mx + sum.ln();
            loss = loss + (lse - row[t]);
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / T::from_usize(b);
        self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Afterwards [`Tape::grad`]
    /// returns gradients for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for input in self.nodes[idx].op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Internal(format!(
                        "tape node {idx} depends on later node {}",
                        input.0
                    )));
                }
            }
            let mut contributions = self.local_grads(idx, &g)?;
            if let Some((name, factor)) = self.fault {
                if self.nodes[idx].op.name() == name {
                    let f = T::from_f64(factor);
                    for (_, cg) in contributions.iter_mut() {
                        cg.iter_mut().for_each(|v| *v = *v * f);
                    }
                }
            }
            for (input, cg) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(cg).for_each(|(a, c)| *a = *a + c),
                    slot => *slot = Some(cg),
                }
            }
            let shape = self.nodes[idx].value.shape().to_vec();
            self.nodes[idx].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, plan } => {
                let (ga, gb) = plan.backward(self.data(*a), self.data(*b), g, rg(*a), rg(*b));
                let mut v = Vec::new();
                if rg(*a) {
                    v.push((*a, ga));
                }
                if rg(*b) {
                    v.push((*b, gb));
                }
                v
            }
            Op::Binary { op, a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let oshape = node.value.shape();
                let (ia, ib) = (broadcast_index(sa, oshape), broadcast_index(sb, oshape));
                let (da, db) = (self.data(*a), self.data(*b));
                let mut v = Vec::new();
                if rg(*a) {
                    let full: Vec<T> = (0..g.len())
                        .map(|i| match op {
                            BinaryOp::Add | BinaryOp::Sub => g[i],
                            BinaryOp::Mul => g[i] * db[ib[i]],
                            BinaryOp::Div => g[i] / db[ib[i]],
                        })
                        .collect();
                    v.push((*a, reduce_to_shape(&full, oshape, sa)));
                }
                if rg(*b) {
                    let full: Vec<T> = (0..g.len())
                        .map(|i| match op {
                            BinaryOp::Add => g[i],
                            BinaryOp::Sub => -g[i],
                            BinaryOp::Mul => g[i] * da[ia[i]],
                            BinaryOp::Div => -g[i] * out[i] / db[ib[i]],
                        })
                        .collect();
                    v.push((*b, reduce_to_shape(&full, oshape, sb)));
                }
                v
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Unary { op, x } => {
                let src = self.data(*x);
                let gx = (0..g.len())
                    .map(|i| {
                        let d = match op {
                            UnaryOp::Relu => {
                                if src[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Gelu => T::from_f64(gelu_grad(src[i].as_f64())),
                            UnaryOp::Silu => {
                                let s = sigmoid(src[i].as_f64());
                                T::from_f64(s * (1.0 + src[i].as_f64() * (1.0 - s)))
                            }
                            UnaryOp::Tanh => T::one() - out[i] * out[i],
                        };
                        g[i] * d
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis, .. } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).map(|j| g[at(j)] * out[at(j)]).sum::<T>();
                        for j in 0..n {
                            gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.data(*gamma);
                let d = gm.len();
                let dn = T::from_usize(d);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..g.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        s1 = s1 + gh;
                        s2 = s2 + gh * hr[j];
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        gx[r * d + j] = rstd[r] * (gh - s1 / dn - hr[j] * s2 / dn);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (b, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
                let gm = self.data(*gamma);
                let count = T::from_usize(b * inner);
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for k in 0..inner {
                            gg[ch] = gg[ch] + g[base + k] * xhat[base + k];
                            gb[ch] = gb[ch] + g[base + k];
                        }
                    }
                }
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for k in 0..inner {
                            let i = base + k;
                            gx[i] = if *batch_stats {
                                gm[ch] * rstd[ch] * (g[i] - gb[ch] / count - xhat[i] * gg[ch] / count)
                            } else {
                                gm[ch] * rstd[ch] * g[i]
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::L2Normalize { x, axis, norms, eps } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let nrm = norms[o * inner + i];
                        if nrm > *eps {
                            let dot = (0..n).map(|j| g[at(j)] * out[at(j)]).sum::<T>();
                            for j in 0..n {
                                gx[at(j)] = (g[at(j)] - out[at(j)] * dot) / nrm;
                            }
                        } else {
                            for j in 0..n {
                                gx[at(j)] = g[at(j)] / *eps;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (gx, gw, gb) = geom.backward(self.data(*x), self.data(*w), g);
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Index { x, index, .. } => {
                let mut gx = vec![T::zero(); self.data(*x).len()];
                for (gv, &i) in g.iter().zip(index) {
                    gx[i] = gx[i] + *gv;
                }
                vec![(*x, gx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis];
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &inp in inputs {
                    let n = self.shape(inp)[*axis];
                    let mut gi = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + n * inner]);
                    }
                    offset += n;
                    v.push((inp, gi));
                }
                v
            }
            Op::Dropout { x, scale } => vec![(*x, g.iter().zip(scale).map(|(&a, &s)| a * s).collect())],
            Op::SumAll { x } => vec![(*x, vec![g[0]; self.data(*x).len()])],
            Op::MeanLast { x } => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                let dn = T::from_usize(n);
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / dn, n)).collect();
                vec![(*x, gx)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = probs.len() / targets.len();
                let scale = g[0] / T::from_usize(targets.len());
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * n + t] = gx[r * n + t] - scale;
                }
                vec![(*logits, gx)]
            }
        })
    }
}
