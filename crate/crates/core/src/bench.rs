//! Wall-clock comparison of the history-loop and compressed cross-time
//! convolutions.

use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{cdgcn, cdgcn_original, AttentionConfig, CdgcnParams};
use crate::error::Result;
use crate::params::{ParamStore, SeededRng};
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "T,N,d,original_ms,final_ms,ratio";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub original_ms: f64,
    pub final_ms: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.original_ms / self.final_ms
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4}",
            self.t,
            self.n,
            self.d,
            self.original_ms,
            self.final_ms,
            self.ratio()
        )
    }
}

/// Random block parameters and input `[T, N, d]`.
pub fn random_instance(t: usize, n: usize, cfg: &AttentionConfig, seed: u64) -> Result<(ParamStore, Tensor)> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    CdgcnParams::register(&mut store, "block", cfg.d_model, cfg.d_model, &mut rng)?;
    let x = (0..t * n * cfg.d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok((store, Tensor::new(&[t, n, cfg.d_model], x)?))
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let k = times.len();
    Ok(if k % 2 == 1 { times[k / 2] } else { 0.5 * (times[k / 2 - 1] + times[k / 2]) })
}

/// Median forward time of both forms over `reps` runs after one warm-up.
pub fn bench_point(t: usize, n: usize, cfg: &AttentionConfig, reps: usize, seed: u64) -> Result<BenchRow> {
    let (store, x) = random_instance(t, n, cfg, seed)?;
    let params = CdgcnParams::bind(&store.bind_frozen(), "block")?;
    let reps = reps.max(5);
    let original_ms = median_ms(reps, || cdgcn_original(&x, &params, cfg).map(drop))?;
    let final_ms = median_ms(reps, || cdgcn(&x, &params, cfg, true).map(drop))?;
    Ok(BenchRow {
        t,
        n,
        d: cfg.d_model,
        original_ms,
        final_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_formatting() {
        let r = BenchRow { t: 2, n: 3, d: 4, original_ms: 3.0, final_ms: 1.5 };
        assert_eq!(r.csv_line(), "2,3,4,3.0000,1.5000,2.0000");
    }

    #[test]
    fn single_step_forms_agree() {
        let cfg = AttentionConfig::new(4, 2, true).unwrap();
        let (store, x) = random_instance(1, 3, &cfg, 11).unwrap();
        let p = CdgcnParams::bind(&store.bind_frozen(), "block").unwrap();
        let a = cdgcn(&x, &p, &cfg, true).unwrap().output;
        let b = cdgcn_original(&x, &p, &cfg).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
