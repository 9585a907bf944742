//! Structural invariants of the attention blocks. Each check returns a
//! one-line summary on success and a description of the violation otherwise.

use cdgnet::attention::{
    cdgcn, cdgcn_original, dgcn, mhdgcn, temporal_self_attention, AttentionConfig, AttnParams, CdgcnParams,
};
use cdgnet::params::ParamStore;
use cdgnet::Tensor;

use super::{cdgcn_store, max_abs_diff, normal_tensor, rng};

pub type Check = std::result::Result<String, String>;

pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
pub const CAUSAL_TOLERANCE: f64 = 1e-12;
pub const COLLAPSE_TOLERANCE: f64 = 1e-12;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Rows of every normalized adjacency sum to one; the gated matrix has a
/// diagonal of at least one before normalization.
pub fn row_stochastic_with_self_loops() -> Check {
    let mut worst_row: f64 = 0.0;
    let mut min_diag = f64::INFINITY;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let n = 1 + seed as usize % 6;
        let q = normal_tensor(&mut r, &[3, n, 4]).scale(3.0);
        let k = normal_tensor(&mut r, &[3, n, 4]).scale(3.0);
        let v = normal_tensor(&mut r, &[3, n, 2]);
        let g = dgcn(&q, &k, &v, seed % 2 == 0).map_err(|e| e.to_string())?;
        for row in g.adjacency.data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for block in g.gated.data().chunks(n * n) {
            for i in 0..n {
                min_diag = min_diag.min(block[i * n + i]);
            }
        }
    }
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let s = cdgcn_store(3, &cfg, 77);
    let x = normal_tensor(&mut rng(78), &[2, 5, 4, 3]);
    let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
    let out = cdgcn(&x, &p, &cfg, true).map_err(|e| e.to_string())?;
    for row in out.adjacency.data().chunks(4) {
        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    for row in out.temporal.data().chunks(5) {
        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(
        worst_row <= ROW_SUM_TOLERANCE && min_diag >= 1.0,
        format!("max |row sum - 1| = {worst_row:.1e}, min diagonal = {min_diag}"),
    )
}

/// Fraction of off-diagonal edges zeroed by the gate on Gaussian logits.
pub fn gating_sparsity() -> Check {
    let (b, n) = (4, 51);
    // With an identity key the logits are the query entries themselves, so
    // the gate sees i.i.d. standard normal logits.
    let q = normal_tensor(&mut rng(4242), &[b, n, n]);
    let k = Tensor::eye(n);
    let v = Tensor::zeros(&[n, 1]);
    let gated = dgcn(&q, &k, &v, false).map_err(|e| e.to_string())?.gated;
    let (mut zeros, mut total) = (0usize, 0usize);
    for block in gated.data().chunks(n * n) {
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                total += 1;
                zeros += usize::from(block[i * n + j] == 0.0);
            }
        }
    }
    let fraction = zeros as f64 / total as f64;
    ensure(
        total >= 10_000 && (fraction - 0.5).abs() <= 0.05,
        format!("{zeros}/{total} edges gated off (fraction {fraction:.4})"),
    )
}

fn perturbed_at(x: &Tensor, t_axis: usize, t: usize, delta: f64) -> Tensor {
    let shape = x.shape().to_vec();
    let inner: usize = shape[t_axis + 1..].iter().product();
    let t_len = shape[t_axis];
    let mut data = x.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        if (i / inner) % t_len == t {
            *v += delta;
        }
    }
    Tensor::new(&shape, data).unwrap()
}

/// Largest change in outputs at times before `t` and largest change at `t`
/// or later when the input at `t` is perturbed.
pub fn causal_effect(before: &Tensor, after: &Tensor, t_axis: usize, t: usize) -> (f64, f64) {
    let shape = before.shape();
    let inner: usize = shape[t_axis + 1..].iter().product();
    let t_len = shape[t_axis];
    let (mut past, mut future) = (0.0f64, 0.0f64);
    for (i, (a, b)) in before.data().iter().zip(after.data()).enumerate() {
        let d = (a - b).abs();
        if (i / inner) % t_len < t {
            past = past.max(d);
        } else {
            future = future.max(d);
        }
    }
    (past, future)
}

/// Causal temporal attention and the cross-time block ignore the future.
pub fn causal_perturbation() -> Check {
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let s = cdgcn_store(3, &cfg, 90);
    let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
    let x = normal_tensor(&mut rng(91), &[2, 5, 3, 3]);
    let (mut leak, mut reach): (f64, f64) = (0.0, f64::INFINITY);
    for t in 1..5 {
        let xp = perturbed_at(&x, 1, t, 0.7);
        let tatt = |x: &Tensor| temporal_self_attention(x, &p.temporal, &cfg, true).unwrap().output;
        let block = |x: &Tensor| cdgcn(x, &p, &cfg, true).unwrap().output;
        for f in [&tatt as &dyn Fn(&Tensor) -> Tensor, &block] {
            let (past, future) = causal_effect(&f(&x), &f(&xp), 1, t);
            leak = leak.max(past);
            reach = reach.min(future);
        }
    }
    ensure(
        leak <= CAUSAL_TOLERANCE && reach > 1e-6,
        format!("max change before the perturbed time {leak:.1e}, min change after {reach:.1e}"),
    )
}

/// One head with identity projections reduces to the plain graph convolution.
pub fn head_collapse() -> Check {
    let d = 3;
    let eye = Tensor::eye(d).data().to_vec();
    let mut s = ParamStore::new();
    for w in ["w_q", "w_k", "w_v", "w_o"] {
        s.insert(&format!("blk.{w}"), &[d, d], eye.clone()).unwrap();
    }
    let p = AttnParams::bind(&s.bind_frozen(), "blk").unwrap();
    let cfg = AttentionConfig::new(d, 1, true).unwrap();
    let x = normal_tensor(&mut rng(5), &[4, 5, d]);
    let multi = mhdgcn(&x, &x, &p, &cfg).map_err(|e| e.to_string())?.output;
    let single = dgcn(&x, &x, &x, true).map_err(|e| e.to_string())?.output;
    let diff = max_abs_diff(multi.data(), single.data());
    ensure(diff == 0.0, format!("max |mhdgcn - dgcn| = {diff:e}"))
}

/// The loop form and the compressed form coincide on single-slice inputs.
pub fn single_slice_equality() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let cfg = AttentionConfig::new(4, 2, seed % 2 == 0).unwrap();
        let s = cdgcn_store(4, &cfg, 100 + seed);
        let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
        let x = normal_tensor(&mut rng(200 + seed), &[2, 1, 5, 4]);
        let a = cdgcn(&x, &p, &cfg, true).map_err(|e| e.to_string())?.output;
        let b = cdgcn_original(&x, &p, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(a.data(), b.data()));
    }
    ensure(
        worst <= COLLAPSE_TOLERANCE,
        format!("max |final - original| at T = 1 is {worst:.1e}"),
    )
}

/// With a zero query every off-diagonal edge is gated off and the output is
/// the value matrix itself.
pub fn zero_query_identity() -> Check {
    let mut r = rng(6);
    let q = Tensor::zeros(&[2, 5, 3]);
    let k = normal_tensor(&mut r, &[2, 5, 3]);
    let v = normal_tensor(&mut r, &[2, 5, 4]);
    let g = dgcn(&q, &k, &v, true).map_err(|e| e.to_string())?;
    ensure(g.output.data() == v.data(), "output equals v bit for bit".to_string())
}

pub type InvariantCase = (&'static str, fn() -> Check);

pub const INVARIANT_CASES: [InvariantCase; 6] = [
    ("row_stochastic_with_self_loops", row_stochastic_with_self_loops),
    ("gating_sparsity", gating_sparsity),
    ("causal_perturbation", causal_perturbation),
    ("head_collapse", head_collapse),
    ("single_slice_equality", single_slice_equality),
    ("zero_query_identity", zero_query_identity),
];
