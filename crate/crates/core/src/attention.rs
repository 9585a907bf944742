//! Gated sparse dynamic graph convolution and its cross-time compositions.
//!
//! All functions work on tensors with arbitrary leading batch axes. The
//! trailing layout is `[.., T, N, d]` for sequences of graph signals (time,
//! sensor, feature) and `[.., N, d]` for a single slice. Graph convolutions
//! act within a time index; mixing across time happens only in
//! [`temporal_self_attention`].

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, SeededRng};
use crate::tensor::{Tensor, MASKED_LOGIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Divide gating logits by `sqrt(head_dim)` before the ReLU.
    pub scale_logits: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize, scale_logits: bool) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("head count must be at least 1".into()));
        }
        if d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            heads,
            scale_logits,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Query/key/value/output projections of one multi-head block.
///
/// `w_q` is `d_query × d`, `w_k`/`w_v` are `d_kv × d` and `w_o` is `d × d`.
/// Column block `i` of the input projections (width `d / h`) belongs to head
/// `i`.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttnParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_query: usize,
        d_kv: usize,
        d_model: usize,
        rng: &mut SeededRng,
    ) -> Result<()> {
        store.insert_xavier(&format!("{prefix}.w_q"), d_query, d_model, rng)?;
        store.insert_xavier(&format!("{prefix}.w_k"), d_kv, d_model, rng)?;
        store.insert_xavier(&format!("{prefix}.w_v"), d_kv, d_model, rng)?;
        store.insert_xavier(&format!("{prefix}.w_o"), d_model, d_model, rng)
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: bound.get(&format!("{prefix}.w_q"))?,
            w_k: bound.get(&format!("{prefix}.w_k"))?,
            w_v: bound.get(&format!("{prefix}.w_v"))?,
            w_o: bound.get(&format!("{prefix}.w_o"))?,
        })
    }
}

/// Temporal attention followed by the per-slice graph convolution.
#[derive(Debug, Clone)]
pub struct CdgcnParams {
    pub temporal: AttnParams,
    pub graph: AttnParams,
}

impl CdgcnParams {
    /// `d_in` is the width of the stream fed to the block (queries and the
    /// temporal attention input).
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_model: usize, rng: &mut SeededRng) -> Result<()> {
        AttnParams::register(store, &format!("{prefix}.tatt"), d_in, d_in, d_model, rng)?;
        AttnParams::register(store, &format!("{prefix}.dgcn"), d_in, d_model, d_model, rng)
    }

    /// Encoder-decoder form: temporal attention runs over the encoder output
    /// (width `d_model`), queries come from the decoder stream.
    pub fn register_ed(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut SeededRng) -> Result<()> {
        Self::register(store, prefix, d_model, d_model, rng)
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            temporal: AttnParams::bind(bound, &format!("{prefix}.tatt"))?,
            graph: AttnParams::bind(bound, &format!("{prefix}.dgcn"))?,
        })
    }
}

/// Output of a graph convolution together with its adjacency.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub output: Tensor,
    /// `ReLU(q kᵀ) + I`, before degree normalization.
    pub gated: Tensor,
    /// Row-stochastic `D̃⁻¹ Ã`.
    pub adjacency: Tensor,
}

/// Output of an attention block plus the weights it used.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

/// Output of a cross-time block.
#[derive(Debug, Clone)]
pub struct CrossTime {
    pub output: Tensor,
    /// Temporal attention weights, `[.., N, h, T, T]`.
    pub temporal: Tensor,
    /// Normalized graph adjacency per time and head, `[.., T, h, N, N]`.
    pub adjacency: Tensor,
}

fn rank_at_least(x: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if x.rank() < rank {
        return Err(Error::Dimension {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![rank],
        });
    }
    Ok(())
}

/// `[.., N, h·dh]` → `[.., h, N, dh]`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let r = x.rank();
    let (n, d) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape()[..r - 2].to_vec();
    shape.extend([n, heads, d / heads]);
    let lead = r - 2;
    let mut axes: Vec<usize> = (0..lead).collect();
    axes.extend([lead + 1, lead, lead + 2]);
    x.reshape(&shape)?.permute(&axes)
}

/// `[.., h, N, dh]` → `[.., N, h·dh]`.
fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    let lead = r - 3;
    let (h, n, dh) = (x.shape()[lead], x.shape()[lead + 1], x.shape()[lead + 2]);
    let mut axes: Vec<usize> = (0..lead).collect();
    axes.extend([lead + 1, lead, lead + 2]);
    let mut shape = x.shape()[..lead].to_vec();
    shape.extend([n, h * dh]);
    x.permute(&axes)?.reshape(&shape)
}

/// Dynamic graph convolution `D̃⁻¹ Ã v` with `Ã = ReLU(q kᵀ) + I`.
///
/// `q`, `k`, `v` are `[.., N, dh]`; leading axes broadcast.
pub fn dgcn(q: &Tensor, k: &Tensor, v: &Tensor, scale_logits: bool) -> Result<GraphConv> {
    for t in [q, k, v] {
        rank_at_least(t, 2, "dgcn")?;
    }
    let (rq, rk) = (q.rank(), k.rank());
    let n = q.shape()[rq - 2];
    if k.shape()[rk - 2] != n || v.shape()[v.rank() - 2] != n || k.shape()[rk - 1] != q.shape()[rq - 1] {
        return Err(Error::Dimension {
            op: "dgcn",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut logits = q.matmul(&k.transpose()?)?;
    if scale_logits {
        logits = logits.scale(1.0 / (q.shape()[rq - 1] as f64).sqrt());
    }
    let gated = logits.relu().add(&Tensor::eye(n))?;
    let degree = gated.sum_axis(gated.rank() - 1)?;
    let adjacency = gated.div(&degree)?;
    let output = adjacency.matmul(v)?;
    Ok(GraphConv {
        output,
        gated,
        adjacency,
    })
}

/// Per-head graph convolutions before the output projection:
/// returns heads `[.., h, N, dh]` and adjacency `[.., h, N, N]`.
fn mhdgcn_heads(query_in: &Tensor, kv_in: &Tensor, params: &AttnParams, cfg: &AttentionConfig) -> Result<GraphConv> {
    rank_at_least(query_in, 2, "mhdgcn")?;
    rank_at_least(kv_in, 2, "mhdgcn")?;
    let q = split_heads(&query_in.matmul(&params.w_q)?, cfg.heads)?;
    let k = split_heads(&kv_in.matmul(&params.w_k)?, cfg.heads)?;
    let v = split_heads(&kv_in.matmul(&params.w_v)?, cfg.heads)?;
    dgcn(&q, &k, &v, cfg.scale_logits)
}

/// Multi-head dynamic graph convolution over `[.., N, d_q]` queries and
/// `[.., N, d_kv]` keys/values; leading axes broadcast, so a single key slice
/// can serve many query slices.
pub fn mhdgcn(query_in: &Tensor, kv_in: &Tensor, params: &AttnParams, cfg: &AttentionConfig) -> Result<Attended> {
    let heads = mhdgcn_heads(query_in, kv_in, params, cfg)?;
    let output = merge_heads(&heads.output)?.matmul(&params.w_o)?;
    Ok(Attended {
        output,
        weights: heads.adjacency,
    })
}

/// Causal mask over a `T × T` score matrix: `true` where key time > query time.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

/// Multi-head scaled dot-product attention along the time axis, applied to
/// each sensor independently. Input `[.., T, N, d_in]`, output `[.., T, N, d]`,
/// weights `[.., N, h, T, T]`.
pub fn temporal_self_attention(x: &Tensor, params: &AttnParams, cfg: &AttentionConfig, causal: bool) -> Result<Attended> {
    rank_at_least(x, 3, "temporal_self_attention")?;
    let r = x.rank();
    let t = x.shape()[r - 3];
    let lead = r - 3;
    // [.., T, N, h, dh] -> [.., N, h, T, dh]
    let to_heads = |proj: &Tensor| -> Result<Tensor> {
        let mut shape = proj.shape()[..r - 1].to_vec();
        shape.extend([cfg.heads, cfg.head_dim()]);
        let mut axes: Vec<usize> = (0..lead).collect();
        axes.extend([lead + 1, lead + 2, lead, lead + 3]);
        proj.reshape(&shape)?.permute(&axes)
    };
    let q = to_heads(&x.matmul(&params.w_q)?)?;
    let k = to_heads(&x.matmul(&params.w_k)?)?;
    let v = to_heads(&x.matmul(&params.w_v)?)?;
    let mut logits = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (cfg.head_dim() as f64).sqrt());
    if causal {
        logits = logits.masked_fill(&causal_mask(t), &[t, t], MASKED_LOGIT)?;
    }
    let weights = logits.softmax_last()?;
    let mixed = weights.matmul(&v)?;
    // [.., N, h, T, dh] -> [.., T, N, h, dh] -> [.., T, N, d]
    let mut axes: Vec<usize> = (0..lead).collect();
    axes.extend([lead + 2, lead, lead + 1, lead + 3]);
    let mut shape = x.shape()[..r - 1].to_vec();
    shape.push(cfg.d_model);
    let output = mixed.permute(&axes)?.reshape(&shape)?.matmul(&params.w_o)?;
    Ok(Attended { output, weights })
}

/// Spatial softmax self-attention within each slice (the `SAtt` ablation).
pub fn spatial_self_attention(query_in: &Tensor, kv_in: &Tensor, params: &AttnParams, cfg: &AttentionConfig) -> Result<Attended> {
    let q = split_heads(&query_in.matmul(&params.w_q)?, cfg.heads)?;
    let k = split_heads(&kv_in.matmul(&params.w_k)?, cfg.heads)?;
    let v = split_heads(&kv_in.matmul(&params.w_v)?, cfg.heads)?;
    let weights = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (cfg.head_dim() as f64).sqrt())
        .softmax_last()?;
    let output = merge_heads(&weights.matmul(&v)?)?.matmul(&params.w_o)?;
    Ok(Attended { output, weights })
}

/// Cross-time dynamic graph convolution: temporal attention compresses the
/// history into keys/values, then a graph convolution runs per time slice
/// between the stream and its compressed slice.
pub fn cdgcn(x: &Tensor, params: &CdgcnParams, cfg: &AttentionConfig, causal: bool) -> Result<CrossTime> {
    let compressed = temporal_self_attention(x, &params.temporal, cfg, causal)?;
    let graph = mhdgcn(x, &compressed.output, &params.graph, cfg)?;
    Ok(CrossTime {
        output: graph.output,
        temporal: compressed.weights,
        adjacency: graph.weights,
    })
}

/// Encoder-decoder form: unmasked temporal attention over the encoder output,
/// then every decoder slice convolves against the final compressed encoder
/// slice.
pub fn cdgcn_ed(x_de: &Tensor, enc_out: &Tensor, params: &CdgcnParams, cfg: &AttentionConfig) -> Result<CrossTime> {
    rank_at_least(enc_out, 3, "cdgcn_ed")?;
    let t_axis = enc_out.rank() - 3;
    let t_en = enc_out.shape()[t_axis];
    if t_en == 0 {
        return Err(Error::EmptyAxis("cdgcn_ed encoder time"));
    }
    let compressed = temporal_self_attention(enc_out, &params.temporal, cfg, false)?;
    let last = compressed.output.slice(t_axis, t_en - 1, t_en)?;
    let graph = mhdgcn(x_de, &last, &params.graph, cfg)?;
    Ok(CrossTime {
        output: graph.output,
        temporal: compressed.weights,
        adjacency: graph.weights,
    })
}

/// Reference cross-time convolution with explicit history loops.
///
/// For each time `t` and every earlier slice `s ≤ t`, a graph convolution
/// runs between `x_t` and the temporally projected slice `s`; the per-slice
/// head outputs are then summed with the causal temporal attention weights
/// `α[t, s]` of the matching head. Cost grows as `T²` graph convolutions
/// against `T` for [`cdgcn`], and the two agree exactly when `T = 1`.
pub fn cdgcn_original(x: &Tensor, params: &CdgcnParams, cfg: &AttentionConfig) -> Result<Tensor> {
    rank_at_least(x, 3, "cdgcn_original")?;
    let r = x.rank();
    let t_axis = r - 3;
    let t_len = x.shape()[t_axis];
    let weights = temporal_self_attention(x, &params.temporal, cfg, true)?.weights;
    let projected = x.matmul(&params.temporal.w_v)?.matmul(&params.temporal.w_o)?;
    let lead = t_axis;
    let wr = weights.rank();
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = x.slice(t_axis, t, t + 1)?;
        let mut acc: Option<Tensor> = None;
        for s in 0..=t {
            let heads = mhdgcn_heads(&x_t, &projected.slice(t_axis, s, s + 1)?, &params.graph, cfg)?.output;
            // α[.., n, h, t, s] -> [.., 1, h, n, 1]
            let alpha = weights
                .slice(wr - 2, t, t + 1)?
                .slice(wr - 1, s, s + 1)?;
            let mut axes: Vec<usize> = (0..lead).collect();
            axes.extend([lead + 2, lead + 1, lead, lead + 3]);
            let alpha = alpha.permute(&axes)?;
            let term = heads.mul(&alpha)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        let merged = merge_heads(&acc.expect("t >= 0 gives one term"))?;
        outputs.push(merged.matmul(&params.graph.w_o)?);
    }
    Tensor::concat(&outputs, t_axis)
}
