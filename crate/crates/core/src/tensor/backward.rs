use std::collections::{HashMap, HashSet};

use super::kernels::{
    axis_split, broadcast_strides, for_each_broadcast, gemm_nt, gemm_tn, numel, permute_data,
};
use super::{Op, Tensor};
use crate::error::{Error, Result};

type GradMap = HashMap<usize, Vec<f64>>;

fn push(grads: &mut GradMap, t: &Tensor, g: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

/// Reduces an output-shaped gradient onto a (possibly broadcast) operand,
/// scaling each term by `weight(out_index, operand_offset, other_offset)`.
fn reduce_to(
    out_shape: &[usize],
    target: &Tensor,
    other: &Tensor,
    g: &[f64],
    weight: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let mut acc = vec![0.0; target.numel()];
    if target.shape() == out_shape && other.shape() == out_shape {
        for (i, a) in acc.iter_mut().enumerate() {
            *a = g[i] * weight(i, i, i);
        }
        return acc;
    }
    let st = broadcast_strides(target.shape(), out_shape);
    let so = broadcast_strides(other.shape(), out_shape);
    for_each_broadcast(out_shape, &st, &so, |i, it, io| acc[it] += g[i] * weight(i, it, io));
    acc
}

impl Tensor {
    /// Back-propagates from a one-element tensor into every reachable leaf
    /// with `requires_grad`. Gradients accumulate across calls until
    /// [`Tensor::zero_grad`] resets them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a one-element loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                stack.extend(op.inputs().into_iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads = GradMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in &nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => node.accumulate_grad(&g),
                Some(op) => op.propagate(node, &g, &mut grads),
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Slice(x, _, _)
            | Op::MaskedFill(x, _)
            | Op::Softmax(x) => vec![x],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
        }
    }

    fn propagate(&self, out: &Tensor, g: &[f64], grads: &mut GradMap) {
        let out_shape = out.shape();
        match self {
            Op::Add(a, b) => {
                push(grads, a, reduce_to(out_shape, a, b, g, |_, _, _| 1.0));
                push(grads, b, reduce_to(out_shape, b, a, g, |_, _, _| 1.0));
            }
            Op::Sub(a, b) => {
                push(grads, a, reduce_to(out_shape, a, b, g, |_, _, _| 1.0));
                push(grads, b, reduce_to(out_shape, b, a, g, |_, _, _| -1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    push(grads, a, reduce_to(out_shape, a, b, g, |_, _, ib| bd[ib]));
                }
                if b.requires_grad() {
                    push(grads, b, reduce_to(out_shape, b, a, g, |_, _, ia| ad[ia]));
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    push(grads, a, reduce_to(out_shape, a, b, g, |_, _, ib| 1.0 / bd[ib]));
                }
                if b.requires_grad() {
                    let gb = reduce_to(out_shape, b, a, g, |_, ib, ia| -ad[ia] / (bd[ib] * bd[ib]));
                    push(grads, b, gb);
                }
            }
            Op::Scale(x, factor) => push(grads, x, g.iter().map(|v| v * factor).collect()),
            Op::AddScalar(x) => push(grads, x, g.to_vec()),
            Op::Exp(x) => push(grads, x, g.iter().zip(out.data()).map(|(a, y)| a * y).collect()),
            Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(a, &v)| if v > 0.0 { *a } else if v < 0.0 { -a } else { 0.0 })
                    .collect();
                push(grads, x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(a, &v)| if v > 0.0 { *a } else { 0.0 })
                    .collect();
                push(grads, x, gx);
            }
            Op::Matmul(a, b) => matmul_backward(a, b, out_shape, g, grads),
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                push(grads, x, gx);
            }
            Op::SumAll(x) => push(grads, x, vec![g[0]; x.numel()]),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, gx) = permute_data(g, out_shape, &inverse);
                push(grads, x, gx);
            }
            Op::Reshape(x) => push(grads, x, g.to_vec()),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for x in xs {
                    let chunk = x.shape()[*axis] * inner;
                    if x.requires_grad() {
                        let mut gx = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            let base = o * total + offset;
                            gx.extend_from_slice(&g[base..base + chunk]);
                        }
                        push(grads, x, gx);
                    }
                    offset += chunk;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let width = out_shape[*axis] * inner;
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                push(grads, x, gx);
            }
            Op::MaskedFill(x, mask) => {
                let period = mask.len().max(1);
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if mask[i % period] { 0.0 } else { *v })
                    .collect();
                push(grads, x, gx);
            }
            Op::Softmax(x) => {
                let width = out_shape[out_shape.len() - 1];
                let mut gx = vec![0.0; x.numel()];
                for ((gr, yr), dst) in g
                    .chunks(width)
                    .zip(out.data().chunks(width))
                    .zip(gx.chunks_mut(width))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                push(grads, x, gx);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = gamma.numel();
                let gm = gamma.data();
                let mut gx = vec![0.0; input.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (row, s) in inv_std.iter().enumerate() {
                    let r = row * d..(row + 1) * d;
                    let (grow, hrow) = (&g[r.clone()], &xhat[r.clone()]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = grow[j] * gm[j];
                        gx[r.start + j] = s * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                push(grads, input, gx);
                push(grads, gamma, gg);
                push(grads, beta, gb);
            }
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, out_shape: &[usize], g: &[f64], grads: &mut GradMap) {
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[rb - 1];
    let batch = &out_shape[..out_shape.len() - 2];
    let sa = broadcast_strides(&a.shape()[..ra - 2], batch);
    let sb = broadcast_strides(&b.shape()[..rb - 2], batch);
    let (ad, bd) = (a.data(), b.data());
    let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
    let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
    debug_assert_eq!(numel(batch) * m * n, g.len());
    for_each_broadcast(batch, &sa, &sb, |i, ia, ib| {
        let gc = &g[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm_nt(gc, &bd[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(&ad[ia * m * k..(ia + 1) * m * k], gc, &mut gb[ib * k * n..(ib + 1) * k * n], m, k, n);
        }
    });
    if let Some(ga) = ga {
        push(grads, a, ga);
    }
    if let Some(gb) = gb {
        push(grads, b, gb);
    }
}
