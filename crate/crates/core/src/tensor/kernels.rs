//! Index arithmetic and dense kernels shared by the forward and backward rules.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed through the broadcast `out` shape; broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `out` in row-major order, calling `f(out_flat, a_off, b_off)`.
pub(crate) fn for_each_broadcast<F>(out: &[usize], sa: &[usize], sb: &[usize], mut f: F)
where
    F: FnMut(usize, usize, usize),
{
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer_rank = rank - 1;
    let mut counter = vec![0usize; outer_rank];
    let (mut a0, mut b0) = (0usize, 0usize);
    let mut flat = 0;
    for _ in 0..total / inner {
        let (mut ia, mut ib) = (a0, b0);
        for _ in 0..inner {
            f(flat, ia, ib);
            flat += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for k in (0..outer_rank).rev() {
            counter[k] += 1;
            a0 += sa[k];
            b0 += sb[k];
            if counter[k] < out[k] {
                break;
            }
            a0 -= sa[k] * out[k];
            b0 -= sb[k] * out[k];
            counter[k] = 0;
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Gathers `src` (with `shape`) into the permuted layout.
pub(crate) fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = contiguous_strides(shape);
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![0.0; src.len()];
    for_each_broadcast(&out_shape, &gather, &zeros, |flat, ia, _| out[flat] = src[ia]);
    (out_shape, out)
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
