//! Central finite differences against reverse-mode gradients.

use cdgnet::params::{Bound, ParamStore, SeededRng};
use cdgnet::Tensor;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients this small are compared absolutely, since
/// round-off in the differenced loss dominates their relative error.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates where the one-sided slopes disagree (a ReLU kink lies
    /// within one step).
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE && self.skipped_kinks * 20 <= self.checked
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Checks `d Σ(f(θ) ⊙ R) / dθ` for every scalar of `store`, where `R` is a
/// fixed random tensor. `stride` > 1 checks every `stride`-th scalar of
/// each parameter.
pub fn check(store: &ParamStore, seed: u64, stride: usize, f: impl Fn(&Bound) -> Tensor) -> GradReport {
    let bound = store.bind();
    let out = f(&bound);
    let mut rng = SeededRng::seed_from_u64(seed);
    let r_data: Vec<f64> = (0..out.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = Tensor::new(out.shape(), r_data).unwrap();
    out.mul(&r).unwrap().sum().backward().unwrap();
    let analytic = bound.grads();

    let eval = |s: &ParamStore| -> f64 { f(&s.bind_frozen()).mul(&r).unwrap().sum().item().unwrap() };
    let mut report = GradReport::default();
    let mut probe = store.clone();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = store.get(name).unwrap().data.len();
        for i in (0..len).step_by(stride.max(1)) {
            let orig = store.get(name).unwrap().data[i];
            probe.get_mut(name).unwrap().data[i] = orig + STEP;
            let plus = eval(&probe);
            probe.get_mut(name).unwrap().data[i] = orig - STEP;
            let minus = eval(&probe);
            probe.get_mut(name).unwrap().data[i] = orig;
            let centre = eval(&probe);
            let forward = (plus - centre) / STEP;
            let backward = (centre - minus) / STEP;
            if (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()) + 1e-6 {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[pi][i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}
