//! Sensor readings, chronological splits, sliding windows and text loaders.

mod synth;

pub use synth::{parse_synth_spec, parse_truth, synth_lagged_diffusion, write_truth, LagEdge, SynthSpec};

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};
use crate::model::TimeOfWeek;

const SECONDS_PER_DAY: i64 = 86_400;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Z-score parameters computed on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Population mean and standard deviation; a zero spread is clamped to 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if !(std > 0.0) {
            log::warn!("training readings are constant ({mean}); using std = 1");
            std = 1.0;
        }
        Self { mean, std }
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse_transform(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Fractions of the timeline given to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    /// METR-LA / PEMS-BAY convention.
    pub const STANDARD: Self = Self {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    /// PEMSD4 convention.
    pub const EVEN: Self = Self {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Contiguous chronological ranges: train and val lengths are floored,
    /// test takes the remainder.
    pub fn ranges(&self, total: usize) -> [Range<usize>; 3] {
        // The small offset keeps products like 0.7 · 10 from flooring to 6.
        let floor = |f: f64| ((f * total as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(total);
        let val = floor(self.val).min(total - train);
        [0..train, train..train + val, train + val..total]
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    /// `0.7,0.1,0.2`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid split fractions {s:?}")))?;
        let [train, val, test] = parts[..] else {
            return Err(Error::Config(format!("expected three split fractions, got {s:?}")));
        };
        let fr = Self { train, val, test };
        fr.validate()?;
        Ok(fr)
    }
}

/// One training example: `P` history slices followed by `F` target slices.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Absolute row index of the first history slice.
    pub start: usize,
    /// Raw readings `P × N`.
    pub history: Vec<f64>,
    /// Raw readings `F × N`.
    pub target: Vec<f64>,
    /// `true` where the target is a valid (nonzero) reading.
    pub mask: Vec<bool>,
    /// Time of week for all `P + F` positions.
    pub times: Vec<TimeOfWeek>,
}

/// Readings of `N` sensors at a fixed sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficDataset {
    pub sensor_ids: Vec<String>,
    /// Unix seconds (UTC), strictly increasing with a constant step.
    pub timestamps: Vec<i64>,
    /// Row-major `T_total × N`.
    pub readings: Vec<f64>,
    pub interval_minutes: u32,
    pub fractions: SplitFractions,
    pub stats: NormalizationStats,
}

impl TrafficDataset {
    /// Builds a dataset and fits normalization on the training split.
    pub fn new(
        sensor_ids: Vec<String>,
        timestamps: Vec<i64>,
        readings: Vec<f64>,
        interval_minutes: u32,
        fractions: SplitFractions,
    ) -> Result<Self> {
        fractions.validate()?;
        if interval_minutes == 0 || 1440 % interval_minutes != 0 {
            return Err(Error::Config(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        let n = sensor_ids.len();
        if n == 0 {
            return Err(Error::Config("dataset has no sensors".into()));
        }
        if readings.len() != timestamps.len() * n {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: vec![timestamps.len(), n],
                rhs: vec![readings.len()],
            });
        }
        let step = i64::from(interval_minutes) * 60;
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Ordering {
                    line: i + 3,
                    msg: format!("timestamp {} does not follow {}", w[1], w[0]),
                });
            }
            if w[1] - w[0] != step {
                return Err(Error::Ordering {
                    line: i + 3,
                    msg: format!("step of {} s, expected {step} s", w[1] - w[0]),
                });
            }
        }
        let mut ds = Self {
            sensor_ids,
            timestamps,
            readings,
            interval_minutes,
            fractions,
            stats: NormalizationStats { mean: 0.0, std: 1.0 },
        };
        let train = ds.split_range(Split::Train);
        ds.stats = NormalizationStats::fit(&ds.readings[train.start * n..train.end * n]);
        Ok(ds)
    }

    pub fn num_nodes(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn slots_per_day(&self) -> usize {
        1440 / self.interval_minutes as usize
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        let [train, val, test] = self.fractions.ranges(self.len());
        match split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        }
    }

    /// Readings of one time slice.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.num_nodes();
        &self.readings[t * n..(t + 1) * n]
    }

    /// Day of week (Monday = 0) and slot of day for row `t`.
    pub fn time_of_week(&self, t: usize) -> TimeOfWeek {
        let secs = self.timestamps[t];
        let days = secs.div_euclid(SECONDS_PER_DAY);
        let in_day = secs.rem_euclid(SECONDS_PER_DAY);
        TimeOfWeek {
            // 1970-01-01 was a Thursday.
            day_of_week: (days + 3).rem_euclid(7) as usize,
            slot_of_day: (in_day / (i64::from(self.interval_minutes) * 60)) as usize,
        }
    }

    /// Absolute start rows of all windows inside `split`.
    pub fn window_starts(&self, split: Split, p: usize, f: usize, stride: usize) -> Vec<usize> {
        let range = self.split_range(split);
        let stride = stride.max(1);
        if range.len() < p + f {
            log::warn!(
                "{split} split has {} slices, fewer than P + F = {}; no windows",
                range.len(),
                p + f
            );
            return Vec::new();
        }
        (range.start..=range.end - p - f).step_by(stride).collect()
    }

    /// The window whose history begins at absolute row `start`.
    pub fn window_at(&self, start: usize, p: usize, f: usize) -> Result<WindowSample> {
        if start + p + f > self.len() {
            return Err(Error::Range {
                what: "window start",
                index: start,
                len: self.len().saturating_sub(p + f) + 1,
            });
        }
        let n = self.num_nodes();
        let history = self.readings[start * n..(start + p) * n].to_vec();
        let target = self.readings[(start + p) * n..(start + p + f) * n].to_vec();
        let mask = target.iter().map(|&v| v != 0.0).collect();
        let times = (start..start + p + f).map(|t| self.time_of_week(t)).collect();
        Ok(WindowSample {
            start,
            history,
            target,
            mask,
            times,
        })
    }

    /// All windows of `split`, never reaching outside it.
    pub fn windows(
        &self,
        split: Split,
        p: usize,
        f: usize,
        stride: usize,
    ) -> impl Iterator<Item = WindowSample> + '_ {
        self.window_starts(split, p, f, stride)
            .into_iter()
            .map(move |s| self.window_at(s, p, f).expect("start lies inside the split"))
    }

    /// Parses `timestamp,id1,…,idN` text.
    pub fn from_csv_str(text: &str, interval_minutes: u32, fractions: SplitFractions) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let sensor_ids: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let n = sensor_ids.len();
        let mut timestamps = Vec::new();
        let mut readings = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != n + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, found {}", n + 1, fields.len()),
                });
            }
            timestamps.push(parse_timestamp(fields[0]).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("unrecognized timestamp {:?}", fields[0]),
            })?);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("invalid reading {f:?}"),
                })?;
                readings.push(v);
            }
        }
        Self::new(sensor_ids, timestamps, readings, interval_minutes, fractions)
    }

    pub fn load_csv(path: &Path, interval_minutes: u32, fractions: SplitFractions) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?, interval_minutes, fractions)
    }

    /// Text form accepted by [`TrafficDataset::from_csv_str`]; readings use
    /// shortest round-trip formatting so a reload is bit-exact.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("timestamp");
        for id in &self.sensor_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for t in 0..self.len() {
            out.push_str(&format_timestamp(self.timestamps[t]));
            for v in self.row(t) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_csv_string())?)
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(dt) = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT) {
        return Some(dt.and_utc().timestamp());
    }
    s.parse::<i64>().ok()
}

fn format_timestamp(secs: i64) -> String {
    match DateTime::from_timestamp(secs, 0) {
        Some(dt) => dt.format(TIMESTAMP_FORMAT).to_string(),
        None => secs.to_string(),
    }
}

/// Dense `N × N` weights (row = destination) from `src,dst,weight` lines.
/// Endpoints are sensor ids or zero-based indices.
pub fn parse_edge_list(text: &str, sensor_ids: &[String]) -> Result<Vec<f64>> {
    let n = sensor_ids.len();
    let resolve = |s: &str, line: usize| -> Result<usize> {
        if let Some(i) = sensor_ids.iter().position(|id| id == s) {
            return Ok(i);
        }
        match s.parse::<usize>() {
            Ok(i) if i < n => Ok(i),
            _ => Err(Error::Parse {
                line,
                msg: format!("unknown sensor {s:?}"),
            }),
        }
    };
    let mut adj = vec![0.0; n * n];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected src,dst,weight, got {line:?}"),
            });
        }
        let Ok(w) = fields[2].parse::<f64>() else {
            if i == 0 {
                continue; // header row
            }
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("invalid weight {:?}", fields[2]),
            });
        };
        let (src, dst) = (resolve(fields[0], i + 1)?, resolve(fields[1], i + 1)?);
        adj[dst * n + src] = w;
    }
    Ok(adj)
}

/// `rows` lines of `cols` reals separated by commas or whitespace.
pub fn parse_matrix(text: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                msg: "invalid real".into(),
            })?;
        if vals.len() != cols {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {cols} values, found {}", vals.len()),
            });
        }
        out.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse {
            line: seen,
            msg: format!("expected {rows} rows, found {seen}"),
        });
    }
    Ok(out)
}
