//! Exports of learned graphs: per-layer edge lists and cross-time weights.

use std::fmt::Write as _;

use crate::data::{LagEdge, Split, TrafficDataset};
use crate::error::{Error, Result};
use crate::model::{Cdgnet, LayerTrace};
use crate::tensor::Tensor;
use crate::training::make_batch;

/// Runs one window through the model and keeps every layer's weights.
pub fn trace_window(model: &Cdgnet, dataset: &TrafficDataset, split: Split, window_index: usize) -> Result<Vec<LayerTrace>> {
    let c = &model.config;
    if dataset.num_nodes() != c.num_nodes {
        return Err(Error::Config(format!(
            "model expects {} sensors, dataset has {}",
            c.num_nodes,
            dataset.num_nodes()
        )));
    }
    let starts = dataset.window_starts(split, c.history, c.horizon, 1);
    let &start = starts.get(window_index).ok_or(Error::Range {
        what: "window",
        index: window_index,
        len: starts.len(),
    })?;
    let window = dataset.window_at(start, c.history, c.horizon)?;
    let data = make_batch(&[window], dataset.stats)?;
    let mut trace = Vec::new();
    model.forward(&model.params.bind_frozen(), &data.batch, Some(&mut trace))?;
    Ok(trace)
}

fn dims<const R: usize>(t: &Tensor, what: &'static str) -> Result<[usize; R]> {
    t.shape().try_into().map_err(|_| Error::Dimension {
        op: what,
        lhs: t.shape().to_vec(),
        rhs: vec![R],
    })
}

/// Edge list `head,time,src_sensor,dst_sensor,weight` of a `[B, T, h, N, N]`
/// adjacency (rows are destinations) for window `b`; zero weights omitted.
pub fn adjacency_edges_csv(adjacency: &Tensor, b: usize, sensor_ids: &[String]) -> Result<String> {
    let [batch, t_len, heads, n, n2] = dims::<5>(adjacency, "adjacency export")?;
    if n != n2 || n != sensor_ids.len() || b >= batch {
        return Err(Error::Contract(format!(
            "adjacency {:?} does not fit window {b} of {} sensors",
            adjacency.shape(),
            sensor_ids.len()
        )));
    }
    let data = adjacency.data();
    let mut out = String::from("head,time,src_sensor,dst_sensor,weight\n");
    for h in 0..heads {
        for t in 0..t_len {
            for dst in 0..n {
                for src in 0..n {
                    let w = data[(((b * t_len + t) * heads + h) * n + dst) * n + src];
                    if w != 0.0 {
                        writeln!(out, "{h},{t},{},{},{w}", sensor_ids[src], sensor_ids[dst]).expect("writing to a String");
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cross-time influence of a layer with both temporal and graph weights
/// over the same time axis. Entry `[lag][dst · N + src]` is
///
/// ```text
/// mean over t ≥ lag and heads h of  A_h,t[dst, src] · α_h^src[t, t − lag]
/// ```
///
/// i.e. how strongly the output of `dst` at time `t` draws on the input of
/// `src` at `t − lag` through temporal compression followed by the graph.
pub fn cross_time_weights(trace: &LayerTrace, b: usize) -> Result<Vec<Vec<f64>>> {
    let (Some(adj), Some(temporal)) = (&trace.adjacency, &trace.temporal) else {
        return Err(Error::Contract(format!("layer {} has no cross-time weights", trace.name)));
    };
    let [_, t_len, heads, n, _] = dims::<5>(adj, "cross-time adjacency")?;
    let [_, n_t, heads_t, t1, t2] = dims::<5>(temporal, "cross-time temporal weights")?;
    if n_t != n || heads_t != heads || t1 != t_len || t2 != t_len {
        return Err(Error::Contract(format!(
            "layer {} mixes time axes ({:?} vs {:?})",
            trace.name,
            adj.shape(),
            temporal.shape()
        )));
    }
    let (a, alpha) = (adj.data(), temporal.data());
    let mut out = Vec::with_capacity(t_len);
    for lag in 0..t_len {
        let mut m = vec![0.0; n * n];
        let count = ((t_len - lag) * heads) as f64;
        for t in lag..t_len {
            for h in 0..heads {
                for dst in 0..n {
                    for src in 0..n {
                        let g = a[(((b * t_len + t) * heads + h) * n + dst) * n + src];
                        let w = alpha[(((b * n + src) * heads + h) * t_len + t) * t_len + t - lag];
                        m[dst * n + src] += g * w / count;
                    }
                }
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// `lag,src_sensor,dst_sensor,weight` for every lag and sensor pair.
pub fn cross_time_csv(weights: &[Vec<f64>], sensor_ids: &[String]) -> String {
    let n = sensor_ids.len();
    let mut out = String::from("lag,src_sensor,dst_sensor,weight\n");
    for (lag, m) in weights.iter().enumerate() {
        for dst in 0..n {
            for src in 0..n {
                writeln!(out, "{lag},{},{},{}", sensor_ids[src], sensor_ids[dst], m[dst * n + src]).expect("writing to a String");
            }
        }
    }
    out
}

/// Comparison of one known delayed edge against its lag's weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LagCheck {
    pub edge: LagEdge,
    pub weight: f64,
    /// Median of the off-diagonal entries at the same lag.
    pub median_off_diagonal: f64,
}

impl LagCheck {
    pub fn passed(&self) -> bool {
        self.weight > self.median_off_diagonal
    }
}

pub fn lag_checks(weights: &[Vec<f64>], n: usize, edges: &[LagEdge]) -> Result<Vec<LagCheck>> {
    edges
        .iter()
        .map(|e| {
            let m = weights.get(e.lag).ok_or(Error::Range {
                what: "lag",
                index: e.lag,
                len: weights.len(),
            })?;
            let mut off: Vec<f64> = (0..n * n).filter(|i| i / n != i % n).map(|i| m[i]).collect();
            off.sort_by(f64::total_cmp);
            let median = match off.len() {
                0 => f64::NAN,
                k if k % 2 == 1 => off[k / 2],
                k => 0.5 * (off[k / 2 - 1] + off[k / 2]),
            };
            Ok(LagCheck {
                edge: *e,
                weight: m[e.dst * n + e.src],
                median_off_diagonal: median,
            })
        })
        .collect()
}
