//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Operations allocate a fresh contiguous row-major buffer and record
//! the inputs plus whatever context their backward rule needs. Node ids are
//! handed out in creation order, so every input has a smaller id than the
//! node consuming it and sorting by id is a valid topological order.
//!
//! Only leaves keep a `grad` buffer; intermediate gradients live in a map
//! for the duration of one [`Tensor::backward`] call.

mod backward;
mod kernels;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use kernels::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast,
    gemm_nn, numel, permute_data,
};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Large negative value used where attention logits are masked out.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Exp(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Matmul(Tensor, Tensor),
    SumAxis(Tensor, usize),
    SumAll(Tensor),
    Permute(Tensor, Vec<usize>),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice(Tensor, usize, usize),
    MaskedFill(Tensor, Rc<Vec<bool>>),
    Softmax(Tensor),
    LayerNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs_need_grad: bool) -> Self {
        if inputs_need_grad {
            Self::from_parts(shape, data, Some(op), true)
        } else {
            Self::from_parts(shape, data, None, false)
        }
    }

    /// Constant tensor; fails when `data` does not fill `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, None, false))
    }

    /// Leaf that accumulates a gradient during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_parts(t.0.shape.clone(), t.0.data.clone(), None, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)], None, false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], None, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value], None, false)
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, None, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), None, false)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::Dimension {
            op: name,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let (a, b) = (self.data(), other.data());
        let data = if self.shape() == other.shape() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(a[ia], b[ib]));
            out
        };
        let need = self.requires_grad() || other.requires_grad();
        Ok(Self::derived(out_shape, data, op(self.clone(), other.clone()), need))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Self::derived(self.shape().to_vec(), data, op, self.requires_grad())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.unary(|x| x * factor, Op::Scale(self.clone(), factor))
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        self.unary(|x| x + value, Op::AddScalar(self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs(self.clone()))
    }

    /// Elementwise `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.clone()))
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product over the last two axes. Leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (batch_a, batch_b) = (&self.shape()[..ra - 2], &other.shape()[..rb - 2]);
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
        let sa = broadcast_strides(batch_a, &batch);
        let sb = broadcast_strides(batch_b, &batch);
        let mut out = vec![0.0; numel(&batch) * m * n];
        let (a, b) = (self.data(), other.data());
        for_each_broadcast(&batch, &sa, &sb, |i, ia, ib| {
            gemm_nn(
                &a[ia * m * k..(ia + 1) * m * k],
                &b[ib * k * n..(ib + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        });
        let mut shape = batch;
        shape.extend([m, n]);
        let need = self.requires_grad() || other.requires_grad();
        Ok(Self::derived(shape, out, Op::Matmul(self.clone(), other.clone()), need))
    }

    // ---- reductions ----------------------------------------------------

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Self::derived(shape, out, Op::SumAxis(self.clone(), axis), self.requires_grad()))
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "mean_axis")?;
        let len = self.shape()[axis];
        if len == 0 {
            return Err(Error::EmptyAxis("mean_axis"));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Self::derived(vec![], vec![total], Op::SumAll(self.clone()), self.requires_grad())
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::EmptyAxis("mean"));
        }
        Ok(self.sum().scale(1.0 / self.numel() as f64))
    }

    // ---- layout --------------------------------------------------------

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        if axes.len() != self.rank()
            || axes.iter().any(|&a| a >= self.rank() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Dimension {
                op: "permute",
                lhs: self.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let (shape, data) = permute_data(self.data(), self.shape(), axes);
        Ok(Self::derived(
            shape,
            data,
            Op::Permute(self.clone(), axes.to_vec()),
            self.requires_grad(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::derived(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        first.check_axis(axis, "concat")?;
        for x in &xs[1..] {
            let ok = x.rank() == first.rank()
                && x.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        if xs.len() == 1 {
            return Ok(first.clone());
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total_len: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        let need = xs.iter().any(Tensor::requires_grad);
        Ok(Self::derived(shape, data, Op::Concat(xs.to_vec(), axis), need))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(xs: &[Tensor]) -> Result<Tensor> {
        let rank = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?
            .rank();
        if rank == 0 {
            return Err(Error::EmptyAxis("concat_last"));
        }
        Self::concat(xs, rank - 1)
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        if axis > first.rank() {
            return Err(Error::Dimension {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let expanded = xs
            .iter()
            .map(|x| {
                if x.shape() != first.shape() {
                    return Err(Error::Dimension {
                        op: "stack",
                        lhs: first.shape().to_vec(),
                        rhs: x.shape().to_vec(),
                    });
                }
                let mut shape = x.shape().to_vec();
                shape.insert(axis, 1);
                x.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        if expanded.len() == 1 {
            return Ok(expanded[0].clone());
        }
        Self::concat(&expanded, axis)
    }

    /// Range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.check_axis(axis, "slice")?;
        if start > end || end > self.shape()[axis] {
            return Err(Error::Range {
                what: "slice end",
                index: end,
                len: self.shape()[axis] + 1,
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&self.data()[base..base + width]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Self::derived(
            shape,
            data,
            Op::Slice(self.clone(), axis, start),
            self.requires_grad(),
        ))
    }

    // ---- attention helpers --------------------------------------------

    /// Sets positions where `mask` is true to `value`. `mask` covers the
    /// trailing `mask_shape` axes and repeats over the leading ones.
    pub fn masked_fill(&self, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Tensor> {
        let r = self.rank();
        let suffix_ok = mask_shape.len() <= r
            && self.shape()[r - mask_shape.len()..] == *mask_shape
            && numel(mask_shape) == mask.len();
        if !suffix_ok {
            return Err(Error::Dimension {
                op: "masked_fill",
                lhs: self.shape().to_vec(),
                rhs: mask_shape.to_vec(),
            });
        }
        let period = mask.len().max(1);
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % period] { value } else { x })
            .collect();
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            Op::MaskedFill(self.clone(), Rc::new(mask.to_vec())),
            self.requires_grad(),
        ))
    }

    /// Softmax over the last axis (max-shifted exponentials).
    pub fn softmax_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r == 0 || self.shape()[r - 1] == 0 {
            return Err(Error::EmptyAxis("softmax_last"));
        }
        let width = self.shape()[r - 1];
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            Op::Softmax(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Standardizes over the last axis then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let r = self.rank();
        let d = if r == 0 { 0 } else { self.shape()[r - 1] };
        if d == 0 {
            return Err(Error::EmptyAxis("layer_norm"));
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (g, b) = (gamma.data(), beta.data());
        for (row, x) in self.data().chunks(d).enumerate() {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[row] = s;
            for j in 0..d {
                let h = (x[j] - mean) * s;
                xhat[row * d + j] = h;
                out[row * d + j] = h * g[j] + b[j];
            }
        }
        let need = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Self::derived(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
            need,
        ))
    }
}
