use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cdgnet::attention::AttentionConfig;
use cdgnet::bench::{bench_point, BENCH_HEADER};
use cdgnet::checkpoint::Checkpoint;
use cdgnet::data::{
    parse_edge_list, parse_matrix, parse_synth_spec, parse_truth, write_truth, LagEdge, Split, SplitFractions,
    TrafficDataset,
};
use cdgnet::eval::{evaluate, Averaging};
use cdgnet::inspect::{adjacency_edges_csv, cross_time_csv, cross_time_weights, lag_checks, trace_window};
use cdgnet::kv::KeyValues;
use cdgnet::model::{Cdgnet, ModelConfig, ModelInputs, Variant};
use cdgnet::training::{train, TrainConfig, LOG_HEADER};

#[derive(Parser)]
#[command(version, about = "Cross-time dynamic graph traffic forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Export the learned graphs of one window.
    Inspect(InspectArgs),
    /// Time the history-loop and compressed cross-time convolutions.
    Bench(BenchArgs),
    /// Write a synthetic lagged-diffusion dataset to CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// CSV of readings: header `timestamp,<sensor ids>`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic dataset spec, e.g. `n=8,steps=5000,lag=2:3:4`.
    #[arg(long)]
    synth: Option<String>,
}

#[derive(Args)]
struct DataOptions {
    /// Sampling interval of the CSV in minutes.
    #[arg(long, default_value_t = 5)]
    interval: u32,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    splits: SplitFractions,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    data: DataOptions,
    /// key=value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cdgnet.ckpt")]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Zero wall-clock columns so reruns produce identical logs.
    #[arg(long)]
    deterministic: bool,
    /// Static graph `src,dst,weight` for the basic variant.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// N lines of d_se reals initializing the sensor embedding.
    #[arg(long)]
    embedding: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    data: DataOptions,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// How the "average" row combines horizons: pooled or per-horizon.
    #[arg(long, default_value = "pooled")]
    averaging: Averaging,
    /// Settings the checkpoint must agree with.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    data: DataOptions,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    window_index: usize,
    /// Average the cross-time weights over this many consecutive windows.
    #[arg(long, default_value_t = 1)]
    windows: usize,
    #[arg(long, default_value = "inspect")]
    out_dir: PathBuf,
    /// Known `src,dst,lag,gain` edges to check against the weights.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "2,4,8")]
    sweep: String,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "n=8,steps=5000,lag=2:3:4")]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar; defaults to `<out>.truth.csv`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_source(source: &Source, opts: &DataOptions) -> Result<(TrafficDataset, Option<Vec<LagEdge>>)> {
    match (&source.data, &source.synth) {
        (Some(path), _) => {
            let ds = TrafficDataset::load_csv(path, opts.interval, opts.splits)
                .with_context(|| format!("loading {}", path.display()))?;
            Ok((ds, None))
        }
        (None, Some(spec)) => {
            let spec = parse_synth_spec(spec)?;
            Ok((spec.generate(opts.splits)?, Some(spec.edges)))
        }
        (None, None) => bail!("either --data or --synth is required"),
    }
}

fn read_settings(path: Option<&Path>) -> Result<KeyValues> {
    let Some(path) = path else {
        return Ok(KeyValues::new());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let kv = KeyValues::parse(&text)?;
    let mut known = KeyValues::new();
    ModelConfig::with_nodes(1).to_kv(&mut known);
    TrainConfig::default().to_kv(&mut known);
    let known: Vec<&str> = known.keys().chain(["grad_clip"]).collect();
    if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
        bail!("{}: unknown setting {k:?}", path.display());
    }
    Ok(kv)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (ds, _) = load_source(&args.source, &args.data)?;
    let settings = read_settings(args.config.as_deref())?;
    let mut mc = ModelConfig::with_nodes(ds.num_nodes());
    mc.slots_per_day = ds.slots_per_day();
    mc.apply_kv(&settings)?;
    if let Some(v) = args.variant {
        mc.variant = v;
    }
    if mc.num_nodes != ds.num_nodes() || mc.slots_per_day != ds.slots_per_day() {
        bail!(
            "config describes {} sensors at {} slots/day, data has {} at {}",
            mc.num_nodes,
            mc.slots_per_day,
            ds.num_nodes(),
            ds.slots_per_day()
        );
    }
    let mut tc = TrainConfig::default();
    tc.apply_kv(&settings)?;
    if let Some(seed) = args.seed {
        tc.seed = seed;
    }
    tc.deterministic = args.deterministic;

    let mut inputs = ModelInputs::default();
    if let Some(path) = &args.adjacency {
        inputs.static_adjacency = Some(parse_edge_list(&fs::read_to_string(path)?, &ds.sensor_ids)?);
    }
    if let Some(path) = &args.embedding {
        inputs.spatial_embedding = Some(parse_matrix(&fs::read_to_string(path)?, mc.num_nodes, mc.d_se)?);
    }
    let mut model = Cdgnet::with_inputs(mc, tc.seed, inputs)?;
    log::info!(
        "{} model, {} parameters, {} training windows",
        model.config.variant,
        model.num_parameters(),
        ds.window_starts(Split::Train, model.config.history, model.config.horizon, 1).len()
    );

    eprintln!("{LOG_HEADER}");
    let outcome = train(&mut model, &ds, &tc, |e| eprintln!("{}", e.csv_line()))?;
    let log_path = args.log.unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    fs::write(&log_path, outcome.log_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    let ck = Checkpoint {
        model,
        stats: ds.stats,
    };
    ck.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let report = evaluate(&ck.model, &ds, Split::Val, tc.batch_size, Averaging::Pooled)?;
    println!("best epoch {}; validation report:", outcome.best_epoch);
    print!("{}", report.to_csv());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let c = &ck.model.config;
    let settings = read_settings(args.config.as_deref())?;
    let mut expected = c.clone();
    expected.apply_kv(&settings)?;
    if expected != *c {
        return Err(cdgnet::Error::Config(format!(
            "checkpoint config (N={}, d={}, h={}, L={}) differs from {}",
            c.num_nodes,
            c.d_model,
            c.heads,
            c.layers,
            args.config.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()
        ))
        .into());
    }
    let (mut ds, _) = load_source(&args.source, &args.data)?;
    ds.stats = ck.stats;
    let report = evaluate(&ck.model, &ds, args.split, args.batch_size, args.averaging)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let (mut ds, synth_truth) = load_source(&args.source, &args.data)?;
    ds.stats = ck.stats;
    let truth = match &args.truth {
        Some(path) => Some(parse_truth(&fs::read_to_string(path)?)?),
        None => synth_truth,
    };
    fs::create_dir_all(&args.out_dir)?;
    let n = ds.num_nodes();

    let traces = trace_window(&ck.model, &ds, args.split, args.window_index)?;
    for trace in &traces {
        if let Some(adj) = &trace.adjacency {
            let path = args.out_dir.join(format!("adjacency_{}.csv", trace.name));
            fs::write(&path, adjacency_edges_csv(adj, 0, &ds.sensor_ids)?)?;
        }
    }

    // Cross-time weights, averaged over the requested windows.
    let mut averaged: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let count = args.windows.max(1);
    for k in 0..count {
        let traces = if k == 0 { traces.clone() } else { trace_window(&ck.model, &ds, args.split, args.window_index + k)? };
        for trace in traces.iter().filter(|t| t.temporal.is_some() && t.adjacency.is_some()) {
            let Ok(m) = cross_time_weights(trace, 0) else { continue };
            match averaged.iter_mut().find(|(name, _)| *name == trace.name) {
                Some((_, acc)) => acc
                    .iter_mut()
                    .flatten()
                    .zip(m.iter().flatten())
                    .for_each(|(a, b)| *a += b),
                None => averaged.push((trace.name.clone(), m)),
            }
        }
    }
    for (_, m) in &mut averaged {
        m.iter_mut().flatten().for_each(|v| *v /= count as f64);
    }
    for (name, m) in &averaged {
        fs::write(args.out_dir.join(format!("cross_time_{name}.csv")), cross_time_csv(m, &ds.sensor_ids))?;
    }
    println!("wrote {} adjacency and {} cross-time files to {}", traces.len(), averaged.len(), args.out_dir.display());

    if let Some(edges) = truth.filter(|_| !averaged.is_empty()) {
        println!("layer,src,dst,lag,weight,median_off_diagonal,above_median");
        for (name, m) in &averaged {
            for c in lag_checks(m, n, &edges)? {
                println!(
                    "{name},{},{},{},{},{},{}",
                    ds.sensor_ids[c.edge.src],
                    ds.sensor_ids[c.edge.dst],
                    c.edge.lag,
                    c.weight,
                    c.median_off_diagonal,
                    c.passed()
                );
            }
        }
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let cfg = AttentionConfig::new(args.d, args.heads, true)?;
    let sweep: Vec<usize> = args
        .sweep
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .context("--sweep takes comma-separated integers")?;
    let mut csv = format!("{BENCH_HEADER}\n");
    for t in sweep {
        let row = bench_point(t, args.n, &cfg, args.reps, args.seed)?;
        println!("{}", row.csv_line());
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    if let Some(out) = &args.out {
        fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = parse_synth_spec(&args.spec)?;
    let ds = spec.generate(SplitFractions::STANDARD)?;
    ds.write_csv(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let truth = args.truth.unwrap_or_else(|| with_suffix(&args.out, ".truth.csv"));
    write_truth(&truth, &spec.edges)?;
    println!("{} sensors x {} slices -> {}; truth -> {}", ds.num_nodes(), ds.len(), args.out.display(), truth.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Inspect(a) => run_inspect(a),
        Command::Bench(a) => run_bench(a),
        Command::Synth(a) => run_synth(a),
    }
}
