//! Forecast accuracy: MAE, RMSE and MAPE per horizon and on average.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{Split, TrafficDataset, WindowSample};
use crate::error::{Error, Result};
use crate::model::Cdgnet;
use crate::training::make_batch;

/// Targets with a smaller magnitude are excluded from MAPE.
pub const MAPE_MIN_TARGET: f64 = 1e-3;

/// How the "average" row combines horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Metric over the valid points of all horizons together.
    #[default]
    Pooled,
    /// Unweighted mean of the per-horizon metrics that are present.
    PerHorizon,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Averaging::Pooled),
            "per-horizon" => Ok(Averaging::PerHorizon),
            other => Err(Error::Config(format!("unknown averaging {other:?} (pooled, per-horizon)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; absent when no target is large enough.
    pub mape: Option<f64>,
}

/// Running sums for one group of points.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub count: usize,
    pub ape: f64,
    pub ape_count: usize,
}

impl ErrorSums {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if target.abs() >= MAPE_MIN_TARGET {
            self.ape += (e / target).abs();
            self.ape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.count += other.count;
        self.ape += other.ape;
        self.ape_count += other.ape_count;
    }

    pub fn metrics(&self) -> Option<Metrics> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.ape_count > 0).then(|| 100.0 * self.ape / self.ape_count as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    /// Sums for horizons `1..=F`.
    pub horizons: Vec<ErrorSums>,
    pub averaging: Averaging,
}

impl ForecastReport {
    pub fn new(horizon: usize, averaging: Averaging) -> Self {
        Self {
            horizons: vec![ErrorSums::default(); horizon],
            averaging,
        }
    }

    /// Adds one `F × N` forecast; `mask` marks valid targets.
    pub fn push(&mut self, pred: &[f64], target: &[f64], mask: &[bool]) -> Result<()> {
        let f = self.horizons.len();
        if pred.len() != target.len() || pred.len() != mask.len() || f == 0 || pred.len() % f != 0 {
            return Err(Error::Dimension {
                op: "metrics",
                lhs: vec![pred.len()],
                rhs: vec![target.len(), mask.len()],
            });
        }
        let n = pred.len() / f;
        for (i, ((&p, &t), &m)) in pred.iter().zip(target).zip(mask).enumerate() {
            if m {
                self.horizons[i / n].push(p, t);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ForecastReport) {
        for (a, b) in self.horizons.iter_mut().zip(&other.horizons) {
            a.merge(b);
        }
    }

    pub fn horizon(&self, h: usize) -> Option<Metrics> {
        self.horizons.get(h.checked_sub(1)?)?.metrics()
    }

    pub fn pooled(&self) -> Option<Metrics> {
        let mut all = ErrorSums::default();
        self.horizons.iter().for_each(|h| all.merge(h));
        all.metrics()
    }

    pub fn per_horizon_mean(&self) -> Option<Metrics> {
        let present: Vec<Metrics> = self.horizons.iter().filter_map(ErrorSums::metrics).collect();
        if present.is_empty() {
            return None;
        }
        let k = present.len() as f64;
        let mapes: Vec<f64> = present.iter().filter_map(|m| m.mape).collect();
        Some(Metrics {
            mae: present.iter().map(|m| m.mae).sum::<f64>() / k,
            rmse: present.iter().map(|m| m.rmse).sum::<f64>() / k,
            mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
        })
    }

    pub fn average(&self) -> Option<Metrics> {
        match self.averaging {
            Averaging::Pooled => self.pooled(),
            Averaging::PerHorizon => self.per_horizon_mean(),
        }
    }

    /// `horizon,mae,rmse,mape,count` with rows `1..=F` and `average`;
    /// absent values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape,count\n");
        let row = |out: &mut String, label: &str, m: Option<Metrics>, count: usize| {
            let (mae, rmse, mape) = match m {
                Some(m) => (m.mae.to_string(), m.rmse.to_string(), m.mape.map(|v| v.to_string()).unwrap_or_default()),
                None => Default::default(),
            };
            writeln!(out, "{label},{mae},{rmse},{mape},{count}").expect("writing to a String");
        };
        for (i, h) in self.horizons.iter().enumerate() {
            row(&mut out, &(i + 1).to_string(), h.metrics(), h.count);
        }
        let total = self.horizons.iter().map(|h| h.count).sum();
        row(&mut out, "average", self.average(), total);
        out
    }
}

/// One-shot metrics for a single `F × N` forecast.
pub fn metrics(pred: &[f64], target: &[f64], mask: &[bool], horizon: usize) -> Result<ForecastReport> {
    let mut r = ForecastReport::new(horizon, Averaging::Pooled);
    r.push(pred, target, mask)?;
    Ok(r)
}

/// Forecasts in original units for a slice of windows.
pub fn predict_windows(model: &Cdgnet, windows: &[WindowSample], stats: crate::data::NormalizationStats) -> Result<Vec<f64>> {
    let bd = make_batch(windows, stats)?;
    let y = model.predict(&bd.batch)?;
    Ok(y.data().iter().map(|&z| stats.inverse_transform(z)).collect())
}

/// Scores `model` on every window of `split`. Windows are spread over the
/// available cores; results are merged in window order.
pub fn evaluate(
    model: &Cdgnet,
    dataset: &TrafficDataset,
    split: Split,
    batch_size: usize,
    averaging: Averaging,
) -> Result<ForecastReport> {
    let c = &model.config;
    if dataset.num_nodes() != c.num_nodes {
        return Err(Error::Config(format!(
            "model expects {} sensors, dataset has {}",
            c.num_nodes,
            dataset.num_nodes()
        )));
    }
    let starts = dataset.window_starts(split, c.history, c.horizon, 1);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(starts.len()).max(1);
    let chunk = starts.len().div_ceil(workers).max(1);
    let partials: Vec<Result<ForecastReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = starts
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<ForecastReport> {
                    let mut report = ForecastReport::new(c.horizon, averaging);
                    for group in part.chunks(batch_size.max(1)) {
                        let windows = group
                            .iter()
                            .map(|&s| dataset.window_at(s, c.history, c.horizon))
                            .collect::<Result<Vec<_>>>()?;
                        let pred = predict_windows(model, &windows, dataset.stats)?;
                        let per = c.horizon * c.num_nodes;
                        for (w, p) in windows.iter().zip(pred.chunks(per)) {
                            report.push(p, &w.target, &w.mask)?;
                        }
                    }
                    Ok(report)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut report = ForecastReport::new(c.horizon, averaging);
    for p in partials {
        report.merge(&p?);
    }
    Ok(report)
}
