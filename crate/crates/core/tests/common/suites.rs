//! Case lists reused by the per-topic test files and the acceptance target.

use cdgnet::attention::{
    cdgcn, cdgcn_ed, cdgcn_original, dgcn, mhdgcn, temporal_self_attention, AttentionConfig, AttnParams, CdgcnParams,
};
use cdgnet::model::{Cdgnet, Variant};
use cdgnet::params::ParamStore;
use cdgnet::Tensor;
use rand::Rng;

use super::gradcheck::{self, GradReport};
use super::oracle::{self, Block};
use super::{cdgcn_store, max_abs_diff, normal_vec, rng, small_shape, toy_batch, toy_config};

fn with_inputs(store: &mut ParamStore, seed: u64, inputs: &[(&str, &[usize])]) {
    let mut r = rng(seed);
    for (name, shape) in inputs {
        store.insert(name, shape, normal_vec(&mut r, shape.iter().product())).unwrap();
    }
}

fn attn_store(d_q: usize, d_kv: usize, d: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    AttnParams::register(&mut s, "blk", d_q, d_kv, d, &mut rng(seed)).unwrap();
    s
}

pub fn grad_relu() -> GradReport {
    let mut s = ParamStore::new();
    with_inputs(&mut s, 1, &[("x", &[4, 5])]);
    gradcheck::check(&s, 2, 1, |b| b.get("x").unwrap().relu())
}

pub fn grad_layer_norm() -> GradReport {
    let mut s = ParamStore::new();
    with_inputs(&mut s, 3, &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])]);
    gradcheck::check(&s, 4, 1, |b| {
        b.get("x").unwrap().layer_norm(&b.get("gamma").unwrap(), &b.get("beta").unwrap(), 1e-5).unwrap()
    })
}

pub fn grad_dgcn() -> GradReport {
    let mut s = ParamStore::new();
    with_inputs(&mut s, 5, &[("q", &[2, 4, 3]), ("k", &[2, 4, 3]), ("v", &[2, 4, 3])]);
    gradcheck::check(&s, 6, 1, |b| {
        dgcn(&b.get("q").unwrap(), &b.get("k").unwrap(), &b.get("v").unwrap(), true).unwrap().output
    })
}

pub fn grad_mhdgcn() -> GradReport {
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let mut s = attn_store(6, 5, 4, 7);
    with_inputs(&mut s, 8, &[("xq", &[2, 3, 6]), ("xkv", &[2, 3, 5])]);
    gradcheck::check(&s, 9, 1, |b| {
        let p = AttnParams::bind(b, "blk").unwrap();
        mhdgcn(&b.get("xq").unwrap(), &b.get("xkv").unwrap(), &p, &cfg).unwrap().output
    })
}

pub fn grad_temporal_attention() -> GradReport {
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let mut s = attn_store(6, 6, 4, 10);
    with_inputs(&mut s, 11, &[("x", &[3, 2, 6])]);
    gradcheck::check(&s, 12, 1, |b| {
        let p = AttnParams::bind(b, "blk").unwrap();
        temporal_self_attention(&b.get("x").unwrap(), &p, &cfg, true).unwrap().output
    })
}

pub fn grad_cdgcn() -> GradReport {
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let mut s = cdgcn_store(6, &cfg, 13);
    with_inputs(&mut s, 14, &[("x", &[3, 3, 6])]);
    gradcheck::check(&s, 15, 1, |b| {
        let p = CdgcnParams::bind(b, "blk").unwrap();
        cdgcn(&b.get("x").unwrap(), &p, &cfg, true).unwrap().output
    })
}

pub fn grad_cdgcn_ed() -> GradReport {
    let cfg = AttentionConfig::new(4, 2, true).unwrap();
    let mut s = cdgcn_store(4, &cfg, 16);
    with_inputs(&mut s, 17, &[("x_de", &[3, 3, 4]), ("enc", &[4, 3, 4])]);
    gradcheck::check(&s, 18, 1, |b| {
        let p = CdgcnParams::bind(b, "blk").unwrap();
        cdgcn_ed(&b.get("x_de").unwrap(), &b.get("enc").unwrap(), &p, &cfg).unwrap().output
    })
}

pub fn grad_encoder_layer() -> GradReport {
    let model = Cdgnet::new(toy_config(Variant::Cdgnet), 19).unwrap();
    let mut s = model.params.clone();
    with_inputs(&mut s, 20, &[("x", &[1, 4, 3, 8]), ("ste", &[1, 4, 3, 8])]);
    gradcheck::check(&s, 21, 1, |b| {
        model.encoder_layer(b, 0, &b.get("x").unwrap(), &b.get("ste").unwrap(), None).unwrap()
    })
}

pub fn grad_decoder_layer() -> GradReport {
    let model = Cdgnet::new(toy_config(Variant::Cdgnet), 22).unwrap();
    let mut s = model.params.clone();
    with_inputs(&mut s, 23, &[("x", &[1, 4, 3, 8]), ("ste", &[1, 4, 3, 8]), ("enc", &[1, 4, 3, 8])]);
    gradcheck::check(&s, 24, 1, |b| {
        model
            .decoder_layer(b, 0, &b.get("x").unwrap(), &b.get("ste").unwrap(), &b.get("enc").unwrap(), None)
            .unwrap()
            .output
    })
}

pub fn grad_end_to_end() -> GradReport {
    let c = toy_config(Variant::Cdgnet);
    let model = Cdgnet::new(c.clone(), 25).unwrap();
    let batch = toy_batch(&c, 2, 26);
    gradcheck::check(&model.params, 27, 1, |b| model.forward(b, &batch, None).unwrap())
}

pub type GradCase = (&'static str, fn() -> GradReport);

pub const GRAD_CASES: [GradCase; 10] = [
    ("relu", grad_relu),
    ("layer_norm", grad_layer_norm),
    ("dgcn", grad_dgcn),
    ("mhdgcn", grad_mhdgcn),
    ("temporal_self_attention", grad_temporal_attention),
    ("cdgcn", grad_cdgcn),
    ("cdgcn_ed", grad_cdgcn_ed),
    ("encoder_layer", grad_encoder_layer),
    ("decoder_layer", grad_decoder_layer),
    ("end_to_end", grad_end_to_end),
];

/// Largest deviation between the tensor path and the loop oracle over
/// `instances` random shapes.
pub fn oracle_cdgcn(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(1000 + i);
        let sh = small_shape(&mut r);
        let causal = r.random_bool(0.5);
        let cfg = AttentionConfig::new(sh.d, sh.heads, sh.scale).unwrap();
        let d_in = r.random_range(1..=4);
        let s = cdgcn_store(d_in, &cfg, 2000 + i);
        let x = normal_vec(&mut r, sh.t * sh.n * d_in);
        let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
        let got = cdgcn(&Tensor::new(&[sh.t, sh.n, d_in], x.clone()).unwrap(), &p, &cfg, causal).unwrap().output;
        let want = oracle::cdgcn(
            &oracle::nest3(&x, sh.t, sh.n, d_in),
            &Block::from_store(&s, "blk.tatt"),
            &Block::from_store(&s, "blk.dgcn"),
            sh.heads,
            sh.scale,
            causal,
        );
        worst = worst.max(max_abs_diff(got.data(), &oracle::flatten3(&want)));
    }
    worst
}

pub fn oracle_cdgcn_original(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(3000 + i);
        let sh = small_shape(&mut r);
        let cfg = AttentionConfig::new(sh.d, sh.heads, sh.scale).unwrap();
        let s = cdgcn_store(sh.d, &cfg, 4000 + i);
        let x = normal_vec(&mut r, sh.t * sh.n * sh.d);
        let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
        let got = cdgcn_original(&Tensor::new(&[sh.t, sh.n, sh.d], x.clone()).unwrap(), &p, &cfg).unwrap();
        let want = oracle::cdgcn_original(
            &oracle::nest3(&x, sh.t, sh.n, sh.d),
            &Block::from_store(&s, "blk.tatt"),
            &Block::from_store(&s, "blk.dgcn"),
            sh.heads,
            sh.scale,
        );
        worst = worst.max(max_abs_diff(got.data(), &oracle::flatten3(&want)));
    }
    worst
}

pub fn oracle_cdgcn_ed(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(5000 + i);
        let sh = small_shape(&mut r);
        let t_en = r.random_range(1..=4);
        let cfg = AttentionConfig::new(sh.d, sh.heads, sh.scale).unwrap();
        let s = cdgcn_store(sh.d, &cfg, 6000 + i);
        let x_de = normal_vec(&mut r, sh.t * sh.n * sh.d);
        let enc = normal_vec(&mut r, t_en * sh.n * sh.d);
        let p = CdgcnParams::bind(&s.bind_frozen(), "blk").unwrap();
        let got = cdgcn_ed(
            &Tensor::new(&[sh.t, sh.n, sh.d], x_de.clone()).unwrap(),
            &Tensor::new(&[t_en, sh.n, sh.d], enc.clone()).unwrap(),
            &p,
            &cfg,
        )
        .unwrap()
        .output;
        let want = oracle::cdgcn_ed(
            &oracle::nest3(&x_de, sh.t, sh.n, sh.d),
            &oracle::nest3(&enc, t_en, sh.n, sh.d),
            &Block::from_store(&s, "blk.tatt"),
            &Block::from_store(&s, "blk.dgcn"),
            sh.heads,
            sh.scale,
        );
        worst = worst.max(max_abs_diff(got.data(), &oracle::flatten3(&want)));
    }
    worst
}

pub fn oracle_mhdgcn(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(7000 + i);
        let sh = small_shape(&mut r);
        let (d_q, d_kv) = (r.random_range(1..=4), r.random_range(1..=4));
        let cfg = AttentionConfig::new(sh.d, sh.heads, sh.scale).unwrap();
        let s = attn_store(d_q, d_kv, sh.d, 8000 + i);
        let xq = normal_vec(&mut r, sh.n * d_q);
        let xkv = normal_vec(&mut r, sh.n * d_kv);
        let p = AttnParams::bind(&s.bind_frozen(), "blk").unwrap();
        let got = mhdgcn(
            &Tensor::new(&[sh.n, d_q], xq.clone()).unwrap(),
            &Tensor::new(&[sh.n, d_kv], xkv.clone()).unwrap(),
            &p,
            &cfg,
        )
        .unwrap()
        .output;
        let want = oracle::mhdgcn(
            &oracle::nest3(&xq, 1, sh.n, d_q)[0],
            &oracle::nest3(&xkv, 1, sh.n, d_kv)[0],
            &Block::from_store(&s, "blk"),
            sh.heads,
            sh.scale,
        );
        worst = worst.max(max_abs_diff(got.data(), &want.concat()));
    }
    worst
}
