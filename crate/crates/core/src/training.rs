//! Masked L1 loss, Adam, the learning-rate schedule and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{NormalizationStats, Split, TrafficDataset, WindowSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Averaging, Metrics};
use crate::kv::KeyValues;
use crate::model::{Batch, Cdgnet};
use crate::params::{ParamStore, SeededRng};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_mae,val_rmse,val_mape,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// The rate halves every epoch after this one.
    pub halve_after_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global gradient-norm limit; off by default.
    pub grad_clip: Option<f64>,
    /// Zero the wall-clock column so logs are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr0: 1e-3,
            halve_after_epoch: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate of 1-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(self.halve_after_epoch);
        self.lr0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr0);
        kv.set("halve_after_epoch", self.halve_after_epoch);
        kv.set("adam_beta1", self.adam_beta1);
        kv.set("adam_beta2", self.adam_beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("seed", self.seed);
        if let Some(c) = self.grad_clip {
            kv.set("grad_clip", c);
        }
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    self.$field = v;
                }
            };
        }
        take!(epochs, "epochs");
        take!(batch_size, "batch_size");
        take!(lr0, "lr");
        take!(halve_after_epoch, "halve_after_epoch");
        take!(adam_beta1, "adam_beta1");
        take!(adam_beta2, "adam_beta2");
        take!(adam_eps, "adam_eps");
        take!(seed, "seed");
        if let Some(c) = kv.get("grad_clip")? {
            self.grad_clip = Some(c);
        }
        Ok(())
    }
}

/// Result of [`l1_loss`].
#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub value: Tensor,
    /// Set when the mask selected nothing (the loss is then 0).
    pub empty_mask: bool,
}

/// `Σ |pred − target| · mask / max(1, Σ mask)`.
pub fn l1_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<MaskedLoss> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::Dimension {
            op: "l1_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let valid: f64 = mask.data().iter().sum();
    let value = pred.sub(target)?.abs().mul(mask)?.sum().scale(1.0 / valid.max(1.0));
    Ok(MaskedLoss {
        value,
        empty_mask: valid == 0.0,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Updates `params` in place from `grads` given in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.data.len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `limit`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], limit: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Stacked windows: normalized model input plus raw targets.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub batch: Batch,
    /// Raw readings `[B, F, N, 1]`.
    pub target: Tensor,
    /// 1 for valid targets, 0 otherwise, `[B, F, N, 1]`.
    pub mask: Tensor,
}

pub fn make_batch(windows: &[WindowSample], stats: NormalizationStats) -> Result<BatchData> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let per_time = (first.history.len() + first.target.len()) / first.times.len().max(1);
    if per_time == 0 {
        return Err(Error::Contract("window without sensors".into()));
    }
    let (p, f, n) = (first.history.len() / per_time, first.target.len() / per_time, per_time);
    let b = windows.len();
    let mut history = Vec::with_capacity(b * p * n);
    let mut target = Vec::with_capacity(b * f * n);
    let mut mask = Vec::with_capacity(b * f * n);
    for w in windows {
        if w.history.len() != p * n || w.target.len() != f * n {
            return Err(Error::Contract("windows of different sizes in one batch".into()));
        }
        history.extend(w.history.iter().map(|&v| stats.transform(v)));
        target.extend_from_slice(&w.target);
        mask.extend(w.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    Ok(BatchData {
        batch: Batch {
            history: Tensor::new(&[b, p, n, 1], history)?,
            times: windows.iter().map(|w| w.times.clone()).collect(),
        },
        target: Tensor::new(&[b, f, n, 1], target)?,
        mask: Tensor::new(&[b, f, n, 1], mask)?,
    })
}

/// Model plus optimizer state; one call to [`Trainer::step`] is one update.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Cdgnet,
    pub adam: Adam,
    pub stats: NormalizationStats,
    pub grad_clip: Option<f64>,
}

impl Trainer {
    pub fn new(model: Cdgnet, cfg: &TrainConfig, stats: NormalizationStats) -> Self {
        Self {
            model,
            adam: Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            stats,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Masked L1 loss in original units, without updating.
    pub fn loss(&self, data: &BatchData) -> Result<f64> {
        let pred = self.model.predict(&data.batch)?;
        let raw = pred.scale(self.stats.std).add_scalar(self.stats.mean);
        l1_loss(&raw, &data.target, &data.mask)?.value.item()
    }

    /// Forward, backward and one Adam update; returns the pre-update loss.
    pub fn step(&mut self, data: &BatchData, lr: f64) -> Result<f64> {
        let bound = self.model.params.bind();
        let pred = self.model.forward(&bound, &data.batch, None)?;
        let raw = pred.scale(self.stats.std).add_scalar(self.stats.mean);
        let loss = l1_loss(&raw, &data.target, &data.mask)?;
        if loss.empty_mask {
            log::warn!("batch has no valid targets; loss is 0");
        }
        let value = loss.value.item()?;
        if !value.is_finite() {
            return Ok(value);
        }
        loss.value.backward()?;
        let mut grads = bound.grads();
        if let Some(limit) = self.grad_clip {
            clip_grad_norm(&mut grads, limit);
        }
        self.adam.step(&mut self.model.params, &grads, lr)?;
        Ok(value)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let (mae, rmse, mape) = match self.val {
            Some(m) => (m.mae.to_string(), m.rmse.to_string(), m.mape.map(|v| v.to_string()).unwrap_or_default()),
            None => Default::default(),
        };
        format!(
            "{},{},{},{mae},{rmse},{mape},{:.3}",
            self.epoch, self.lr, self.train_loss, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-indexed epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.log {
            out.push_str(&e.csv_line());
            out.push('\n');
        }
        out
    }
}

/// Trains `model` on the training split and leaves it holding the
/// parameters of the epoch with the lowest validation MAE. `on_epoch` sees
/// each log row as soon as it is produced.
pub fn train(
    model: &mut Cdgnet,
    dataset: &TrafficDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let c = model.config.clone();
    if dataset.num_nodes() != c.num_nodes {
        return Err(Error::Config(format!(
            "model expects {} sensors, dataset has {}",
            c.num_nodes,
            dataset.num_nodes()
        )));
    }
    let mut starts = dataset.window_starts(Split::Train, c.history, c.horizon, 1);
    if starts.is_empty() {
        return Err(Error::Config("training split is too short for a single window".into()));
    }
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model.clone(), cfg, dataset.stats);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut last_finite = f64::NAN;
    let mut batch_index = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        starts.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for group in starts.chunks(cfg.batch_size) {
            let windows = group
                .iter()
                .map(|&s| dataset.window_at(s, c.history, c.horizon))
                .collect::<Result<Vec<_>>>()?;
            let data = make_batch(&windows, dataset.stats)?;
            let loss = trainer.step(&data, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_index,
                    last_finite,
                });
            }
            last_finite = loss;
            loss_sum += loss;
            batches += 1;
            batch_index += 1;
        }
        let val = evaluate(&trainer.model, dataset, Split::Val, cfg.batch_size, Averaging::Pooled)?.average();
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val,
            seconds: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        on_epoch(&entry);
        log.push(entry);
        // Without validation windows the last epoch wins.
        let improved = match (&best, val) {
            (Some((score, _, _)), Some(m)) => m.mae < *score,
            _ => true,
        };
        if improved {
            let score = val.map_or(f64::INFINITY, |m| m.mae);
            best = Some((score, epoch, trainer.model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome { log, best_epoch })
}
