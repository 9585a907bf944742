//! Shared fixtures for the integration suites.
#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracle;
pub mod suites;

use cdgnet::attention::{AttentionConfig, CdgcnParams};
use cdgnet::model::{Batch, ModelConfig, TimeOfWeek, Variant};
use cdgnet::params::{ParamStore, SeededRng};
use cdgnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::new(shape, normal_vec(rng, shape.iter().product())).unwrap()
}

/// A cross-time block registered under `blk` with input width `d_in`.
pub fn cdgcn_store(d_in: usize, cfg: &AttentionConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    CdgcnParams::register(&mut s, "blk", d_in, cfg.d_model, &mut rng(seed)).unwrap();
    s
}

/// Random small attention shape with `T, N, d, h ≤ 4`.
pub struct SmallShape {
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub scale: bool,
}

pub fn small_shape(r: &mut SeededRng) -> SmallShape {
    let heads = r.random_range(1..=2);
    let d = heads * r.random_range(1..=4 / heads);
    SmallShape {
        t: r.random_range(1..=4),
        n: r.random_range(1..=4),
        d,
        heads,
        scale: r.random_bool(0.5),
    }
}

/// `P = 4, F = 2, N = 3, d = 8, h = 2, L = 1`.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        history: 4,
        horizon: 2,
        num_nodes: 3,
        d_model: 8,
        heads: 2,
        layers: 1,
        d_se: 4,
        slots_per_day: 6,
        scale_logits: true,
        variant,
        layer_norm_eps: 1e-5,
    }
}

pub fn toy_batch(c: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let times = (0..b)
        .map(|w| {
            (0..c.history + c.horizon)
                .map(|t| TimeOfWeek {
                    day_of_week: (w + t) / c.slots_per_day % 7,
                    slot_of_day: (w + t) % c.slots_per_day,
                })
                .collect()
        })
        .collect();
    Batch {
        history: normal_tensor(&mut r, &[b, c.history, c.num_nodes, 1]),
        times,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
