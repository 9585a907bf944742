//! Straight-line loop implementations of the attention blocks, written
//! against plain nested vectors so they share no code with the tensor path.

use cdgnet::params::ParamStore;

/// Row-major matrix copied out of a parameter store.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_store(store: &ParamStore, name: &str) -> Mat {
        let p = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
        assert_eq!(p.shape.len(), 2, "{name} is not a matrix");
        Mat {
            rows: p.shape[0],
            cols: p.shape[1],
            data: p.data.clone(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `x · W` for a single row vector.
pub fn row_times(x: &[f64], w: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for c in 0..w.cols {
        let mut acc = 0.0;
        for r in 0..w.rows {
            acc += x[r] * w.at(r, c);
        }
        out[c] = acc;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Block {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl Block {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Block {
        Block {
            w_q: Mat::from_store(store, &format!("{prefix}.w_q")),
            w_k: Mat::from_store(store, &format!("{prefix}.w_k")),
            w_v: Mat::from_store(store, &format!("{prefix}.w_v")),
            w_o: Mat::from_store(store, &format!("{prefix}.w_o")),
        }
    }
}

/// Single-head graph convolution on `N × dh` rows; returns the output and
/// the normalized adjacency.
pub fn dgcn(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = q.len();
    let dh = q[0].len();
    let mut adj = vec![vec![0.0; n]; n];
    for a in 0..n {
        let mut degree = 0.0;
        for b in 0..n {
            let mut logit = 0.0;
            for j in 0..dh {
                logit += q[a][j] * k[b][j];
            }
            if scale {
                logit /= (dh as f64).sqrt();
            }
            let mut g = if logit > 0.0 { logit } else { 0.0 };
            if a == b {
                g += 1.0;
            }
            adj[a][b] = g;
            degree += g;
        }
        for b in 0..n {
            adj[a][b] /= degree;
        }
    }
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for a in 0..n {
        for b in 0..n {
            for j in 0..v[0].len() {
                out[a][j] += adj[a][b] * v[b][j];
            }
        }
    }
    (out, adj)
}

/// Per-head graph convolutions between query rows and key/value rows,
/// returned before merging: `[head][node][dh]`.
pub fn mhdgcn_heads(xq: &[Vec<f64>], xkv: &[Vec<f64>], p: &Block, heads: usize, scale: bool) -> Vec<Vec<Vec<f64>>> {
    let d = p.w_q.cols;
    let dh = d / heads;
    let q: Vec<Vec<f64>> = xq.iter().map(|r| row_times(r, &p.w_q)).collect();
    let k: Vec<Vec<f64>> = xkv.iter().map(|r| row_times(r, &p.w_k)).collect();
    let v: Vec<Vec<f64>> = xkv.iter().map(|r| row_times(r, &p.w_v)).collect();
    let cols = |m: &Vec<Vec<f64>>, i: usize| -> Vec<Vec<f64>> { m.iter().map(|r| r[i * dh..(i + 1) * dh].to_vec()).collect() };
    (0..heads).map(|i| dgcn(&cols(&q, i), &cols(&k, i), &cols(&v, i), scale).0).collect()
}

fn merge_and_project(heads: &[Vec<Vec<f64>>], w_o: &Mat) -> Vec<Vec<f64>> {
    let n = heads[0].len();
    (0..n)
        .map(|a| {
            let concat: Vec<f64> = heads.iter().flat_map(|h| h[a].iter().copied()).collect();
            row_times(&concat, w_o)
        })
        .collect()
}

pub fn mhdgcn(xq: &[Vec<f64>], xkv: &[Vec<f64>], p: &Block, heads: usize, scale: bool) -> Vec<Vec<f64>> {
    merge_and_project(&mhdgcn_heads(xq, xkv, p, heads, scale), &p.w_o)
}

/// Temporal attention on `x[t][n][c]`; returns the output `[t][n][d]` and
/// weights `[n][head][t][s]`.
pub fn tatt(x: &[Vec<Vec<f64>>], p: &Block, heads: usize, causal: bool) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let t_len = x.len();
    let n = x[0].len();
    let d = p.w_q.cols;
    let dh = d / heads;
    let mut out = vec![vec![vec![0.0; d]; n]; t_len];
    let mut alpha = vec![vec![vec![vec![0.0; t_len]; t_len]; heads]; n];
    for node in 0..n {
        let q: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(&x[t][node], &p.w_q)).collect();
        let k: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(&x[t][node], &p.w_k)).collect();
        let v: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(&x[t][node], &p.w_v)).collect();
        let mut mixed = vec![vec![0.0; d]; t_len];
        for h in 0..heads {
            for t in 0..t_len {
                let allowed = if causal { t + 1 } else { t_len };
                let logits: Vec<f64> = (0..allowed)
                    .map(|s| {
                        let mut acc = 0.0;
                        for j in h * dh..(h + 1) * dh {
                            acc += q[t][j] * k[s][j];
                        }
                        acc / (dh as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for s in 0..allowed {
                    let w = exps[s] / total;
                    alpha[node][h][t][s] = w;
                    for j in h * dh..(h + 1) * dh {
                        mixed[t][j] += w * v[s][j];
                    }
                }
            }
        }
        for t in 0..t_len {
            out[t][node] = row_times(&mixed[t], &p.w_o);
        }
    }
    (out, alpha)
}

pub fn cdgcn(x: &[Vec<Vec<f64>>], temporal: &Block, graph: &Block, heads: usize, scale: bool, causal: bool) -> Vec<Vec<Vec<f64>>> {
    let (c, _) = tatt(x, temporal, heads, causal);
    (0..x.len()).map(|t| mhdgcn(&x[t], &c[t], graph, heads, scale)).collect()
}

pub fn cdgcn_ed(x_de: &[Vec<Vec<f64>>], enc: &[Vec<Vec<f64>>], temporal: &Block, graph: &Block, heads: usize, scale: bool) -> Vec<Vec<Vec<f64>>> {
    let (c, _) = tatt(enc, temporal, heads, false);
    let last = &c[enc.len() - 1];
    x_de.iter().map(|slice| mhdgcn(slice, last, graph, heads, scale)).collect()
}

/// History-loop form: for each `t`, one graph convolution per earlier slice
/// `s` against that slice's temporal value projection, weighted by the
/// causal attention of the query node and head.
pub fn cdgcn_original(x: &[Vec<Vec<f64>>], temporal: &Block, graph: &Block, heads: usize, scale: bool) -> Vec<Vec<Vec<f64>>> {
    let t_len = x.len();
    let n = x[0].len();
    let (_, alpha) = tatt(x, temporal, heads, true);
    let projected: Vec<Vec<Vec<f64>>> = x
        .iter()
        .map(|slice| slice.iter().map(|r| row_times(&row_times(r, &temporal.w_v), &temporal.w_o)).collect())
        .collect();
    let dh = graph.w_q.cols / heads;
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut acc = vec![vec![vec![0.0; dh]; n]; heads];
        for s in 0..=t {
            let per = mhdgcn_heads(&x[t], &projected[s], graph, heads, scale);
            for h in 0..heads {
                for a in 0..n {
                    for j in 0..dh {
                        acc[h][a][j] += alpha[a][h][t][s] * per[h][a][j];
                    }
                }
            }
        }
        out.push(merge_and_project(&acc, &graph.w_o));
    }
    out
}

/// Flattens `[t][n][c]` row-major.
pub fn flatten3(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

/// Splits a row-major `[T, N, d]` buffer into nested vectors.
pub fn nest3(data: &[f64], t: usize, n: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    assert_eq!(data.len(), t * n * d);
    (0..t)
        .map(|i| (0..n).map(|j| data[(i * n + j) * d..(i * n + j + 1) * d].to_vec()).collect())
        .collect()
}
