//! Synthetic readings where some sensors echo others after a fixed delay.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::{SplitFractions, TrafficDataset};
use crate::error::{Error, Result};
use crate::params::SeededRng;

/// 2024-01-01 00:00:00 UTC, a Monday.
const START_UNIX: i64 = 1_704_067_200;
const BASE_LEVEL: f64 = 60.0;
const SLOTS_PER_DAY: usize = 288;
/// Persistence of the optional slowly varying "event" component of sources.
const EVENT_PERSISTENCE: f64 = 0.98;

/// `dst(t) = gain · src(t − lag) + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagEdge {
    pub src: usize,
    pub dst: usize,
    pub lag: usize,
    pub gain: f64,
}

/// Parameters of [`synth_lagged_diffusion`] in their textual form
/// `n=8,steps=5000,lag=2:3:4,noise=1,gain=1,amplitude=10,events=0,seed=0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_sensors: usize,
    pub n_steps: usize,
    pub edges: Vec<LagEdge>,
    pub noise_sigma: f64,
    pub amplitude: f64,
    /// Stationary spread of the slow event component relative to the
    /// amplitude; 0 disables it.
    pub events: f64,
    pub seed: u64,
}

/// Sensors `0..n/2` are sources; sensor `n/2 + k` echoes sensor `k` with
/// the `k`-th lag of the list (cycled). Noise defaults to a tenth of the
/// amplitude.
pub fn parse_synth_spec(s: &str) -> Result<SynthSpec> {
    let bad = |msg: String| Error::Config(format!("synthetic spec: {msg}"));
    let (mut n, mut steps, mut lags, mut noise, mut gain, mut amplitude, mut events, mut seed) =
        (8usize, 5000usize, vec![3usize], None, 1.0f64, 10.0f64, 0.0f64, 0u64);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("invalid number {v:?} for {k}")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("invalid integer {v:?} for {k}")));
        match k {
            "n" => n = int(v)?,
            "steps" => steps = int(v)?,
            "lag" => lags = v.split(':').map(int).collect::<Result<_>>()?,
            "noise" => noise = Some(num(v)?),
            "gain" => gain = num(v)?,
            "amplitude" => amplitude = num(v)?,
            "events" => events = num(v)?,
            "seed" => seed = v.parse().map_err(|_| bad(format!("invalid seed {v:?}")))?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    if n < 2 {
        return Err(bad("need at least two sensors".into()));
    }
    if lags.is_empty() {
        return Err(bad("empty lag list".into()));
    }
    let half = n / 2;
    let edges = (0..half)
        .map(|k| LagEdge {
            src: k,
            dst: half + k,
            lag: lags[k % lags.len()],
            gain,
        })
        .collect();
    Ok(SynthSpec {
        n_sensors: n,
        n_steps: steps,
        edges,
        noise_sigma: noise.unwrap_or(0.1 * amplitude),
        amplitude,
        events,
        seed,
    })
}

impl SynthSpec {
    pub fn generate(&self, fractions: SplitFractions) -> Result<TrafficDataset> {
        synth_lagged_diffusion(
            self.n_sensors,
            self.n_steps,
            &self.edges,
            self.noise_sigma,
            self.amplitude,
            self.events,
            self.seed,
            fractions,
        )
    }
}

/// Generates `n_steps` five-minute slices. Sensors without incoming edges
/// follow `60 + amplitude · sin(daily phase) + noise`, optionally plus a
/// persistent random "event" level of spread `events · amplitude`; every
/// other sensor is the gain-weighted sum of its sources' readings `lag`
/// slices earlier plus its own noise.
#[allow(clippy::too_many_arguments)]
pub fn synth_lagged_diffusion(
    n_sensors: usize,
    n_steps: usize,
    edges: &[LagEdge],
    noise_sigma: f64,
    amplitude: f64,
    events: f64,
    seed: u64,
    fractions: SplitFractions,
) -> Result<TrafficDataset> {
    for e in edges {
        if e.lag == 0 {
            return Err(Error::Generator(format!(
                "edge {} -> {} has lag 0, an instantaneous dependency",
                e.src, e.dst
            )));
        }
        if e.src >= n_sensors || e.dst >= n_sensors {
            return Err(Error::Generator(format!(
                "edge {} -> {} references a sensor outside 0..{n_sensors}",
                e.src, e.dst
            )));
        }
    }
    if !(noise_sigma >= 0.0) || !(events >= 0.0) || !amplitude.is_finite() {
        return Err(Error::Generator(
            "noise and event spread must be nonnegative and amplitude finite".into(),
        ));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Generator(e.to_string()))?;
    let innovation = Normal::new(0.0, events * amplitude.abs() * (1.0 - EVENT_PERSISTENCE.powi(2)).sqrt())
        .map_err(|e| Error::Generator(e.to_string()))?;
    let mut rng = SeededRng::seed_from_u64(seed);

    let driven: Vec<bool> = (0..n_sensors).map(|i| edges.iter().any(|e| e.dst == i)).collect();
    let phases: Vec<f64> = (0..n_sensors)
        .map(|i| std::f64::consts::TAU * i as f64 / n_sensors as f64)
        .collect();
    let max_lag = edges.iter().map(|e| e.lag).max().unwrap_or(0);
    // Long enough for the events and chained echoes to forget the start.
    let burn_in = 4 * (max_lag * n_sensors).max(1) + 500;
    let total = burn_in + n_steps;

    let mut values = vec![0.0; total * n_sensors];
    let mut level = vec![0.0; n_sensors];
    for t in 0..total {
        let slot = (t as i64 - burn_in as i64).rem_euclid(SLOTS_PER_DAY as i64) as f64;
        for i in 0..n_sensors {
            level[i] = EVENT_PERSISTENCE * level[i] + innovation.sample(&mut rng);
            let eps = noise.sample(&mut rng);
            values[t * n_sensors + i] = if driven[i] {
                edges
                    .iter()
                    .filter(|e| e.dst == i)
                    .map(|e| match t.checked_sub(e.lag) {
                        Some(s) => e.gain * values[s * n_sensors + e.src],
                        None => e.gain * BASE_LEVEL,
                    })
                    .sum::<f64>()
                    + eps
            } else {
                let daily = (std::f64::consts::TAU * slot / SLOTS_PER_DAY as f64 + phases[i]).sin();
                BASE_LEVEL + amplitude * daily + level[i] + eps
            };
        }
    }
    let readings = values[burn_in * n_sensors..].to_vec();
    let ids = (0..n_sensors).map(|i| format!("s{i}")).collect();
    let timestamps = (0..n_steps as i64).map(|t| START_UNIX + 300 * t).collect();
    TrafficDataset::new(ids, timestamps, readings, 5, fractions)
}

/// Sidecar ground truth: `src,dst,lag,gain`.
pub fn write_truth(path: &Path, edges: &[LagEdge]) -> Result<()> {
    let mut out = String::from("src,dst,lag,gain\n");
    for e in edges {
        writeln!(out, "{},{},{},{}", e.src, e.dst, e.lag, e.gain).expect("writing to a String");
    }
    Ok(fs::write(path, out)?)
}

/// Parses the sidecar written by [`write_truth`].
pub fn parse_truth(text: &str) -> Result<Vec<LagEdge>> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line.starts_with("src")) {
            continue;
        }
        let bad = || Error::Parse {
            line: i + 1,
            msg: format!("expected src,dst,lag,gain, got {line:?}"),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [src, dst, lag, gain] = f[..] else {
            return Err(bad());
        };
        edges.push(LagEdge {
            src: src.parse().map_err(|_| bad())?,
            dst: dst.parse().map_err(|_| bad())?,
            lag: lag.parse().map_err(|_| bad())?,
            gain: gain.parse().map_err(|_| bad())?,
        });
    }
    Ok(edges)
}
