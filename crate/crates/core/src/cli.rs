//! The `tapas` command line: `gen-data`, `train`, `sweep` and `report`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::config::{self, parse_grid, point_name, ConfigMap, DataSource, GridPoint};
use crate::data_synth::Dataset;
use crate::error::{Error, Result};
use crate::eval::{moving_average, p_at_key, MetricSeries, SOFTMAX_LOSS_FULL};
use crate::train::{run_training, TrainOutcome};

pub const THREADS_ENV: &str = "TAPAS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tapas", version, about = "Sampled softmax training with two-pass adaptive sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test datasets.
    GenData(ConfigArgs),
    /// Run one training job.
    Train(TrainArgs),
    /// Run one job per grid point.
    Sweep(SweepArgs),
    /// Dump a smoothed metric curve as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Start from a named preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set tapas.r=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub steps: Option<u64>,
    /// e.g. `tapas.r=1,2,4,8` or `tapas.n:tapas.r=128:1,16:8`; axes joined by `;`.
    /// Defaults to the preset's grid.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A run directory or a metrics JSONL file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "p_at_1")]
    pub metric: String,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Drop records with step below this value.
    #[arg(long, default_value_t = 0)]
    pub truncate: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Train(args) => {
            let cfg = load_config(&args.config, args.steps)?;
            let outcome = train_into(&cfg, &args.config.out, &mut DataCache::default())?;
            print_summary(&args.config.out, &outcome.series);
            Ok(())
        }
        Command::Sweep(args) => sweep(&args),
        Command::Report(args) => report(&args),
    }
}

pub fn load_config(args: &ConfigArgs, steps: Option<u64>) -> Result<ConfigMap> {
    let mut cfg = match &args.preset {
        Some(name) => ConfigMap::from_preset(config::preset(name)?),
        None => ConfigMap::default(),
    };
    if let Some(path) = &args.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for a in &args.overrides {
        cfg.set_assignment(a)?;
    }
    if let Some(steps) = steps {
        cfg.set("train.steps", &steps.to_string())?;
    }
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn summary_line(name: &str, ds: &Dataset, bytes: &[u8]) -> String {
    format!(
        "{name} V={} d={} count={} sha256={}",
        ds.vocab(),
        ds.dim(),
        ds.len(),
        sha256_hex(bytes)
    )
}

fn gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, None)?.resolve()?;
    if matches!(cfg.data, DataSource::Files { .. }) {
        return Err(Error::Config("gen-data needs a generated data.kind, not dataset paths".into()));
    }
    let (train, test) = cfg.data.materialize()?;
    fs::create_dir_all(&args.out)?;
    for (name, ds) in [("train.tds", &train), ("test.tds", &test)] {
        let bytes = ds.to_bytes();
        fs::write(args.out.join(name), &bytes)?;
        println!("{}", summary_line(name, ds, &bytes));
    }
    Ok(())
}

/// Datasets already materialised during a sweep.
#[derive(Default)]
pub struct DataCache {
    entries: Vec<(DataSource, Dataset, Dataset, String)>,
}

impl DataCache {
    fn get(&mut self, source: &DataSource) -> Result<(&Dataset, &Dataset, &str)> {
        let pos = match self.entries.iter().position(|e| &e.0 == source) {
            Some(p) => p,
            None => {
                let (train, test) = source.materialize()?;
                let digest = sha256_hex(&train.to_bytes());
                self.entries.push((source.clone(), train, test, digest));
                self.entries.len() - 1
            }
        };
        let e = &self.entries[pos];
        Ok((&e.1, &e.2, &e.3))
    }
}

/// Train per `cfg` and write config snapshot, metrics, checkpoint and
/// provenance into `dir`.
pub fn train_into(cfg: &ConfigMap, dir: &Path, cache: &mut DataCache) -> Result<TrainOutcome> {
    let exp = cfg.resolve()?;
    let (train, test, digest) = cache.get(&exp.data)?;
    let eval_set = match exp.eval_max_examples {
        Some(n) if n < test.len() => test.head(n),
        _ => test.clone(),
    };
    let outcome = run_training(&exp.run, train, &eval_set)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    fs::write(dir.join("metrics.jsonl"), outcome.series.to_jsonl()?)?;
    outcome.model.save(dir.join("checkpoint.ckpt"))?;
    fs::write(
        dir.join("provenance.txt"),
        format!(
            "train.seed={} data.seed={} train_sha256={} version={} {}\n",
            cfg.get("train.seed"),
            cfg.get("data.seed"),
            digest,
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        ),
    )?;
    Ok(outcome)
}

fn print_summary(dir: &Path, series: &MetricSeries) {
    if let Some(last) = series.last() {
        let metrics: Vec<String> = last.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        println!("{} step={} {}", dir.display(), last.step, metrics.join(" "));
    }
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.config, args.steps)?;
    let grid_text = match (&args.grid, &args.config.preset) {
        (Some(g), _) => g.clone(),
        (None, Some(p)) => config::preset(p)?
            .grid
            .ok_or_else(|| Error::Config(format!("preset {p} has no grid; pass --grid")))?
            .to_string(),
        (None, None) => return Err(Error::Config("empty sweep grid".into())),
    };
    let points = parse_grid(&grid_text)?;
    let csv = run_sweep(&base, &points, &args.config.out)?;
    print!("{csv}");
    Ok(())
}

/// Runs every grid point under `out/<point>` and writes `out/summary.csv`.
pub fn run_sweep(base: &ConfigMap, points: &[GridPoint], out: &Path) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut configs = Vec::with_capacity(points.len());
    let mut names: Vec<String> = Vec::with_capacity(points.len());
    for p in points {
        let mut c = base.clone();
        for (k, v) in p {
            c.set(k, v)?;
        }
        c.resolve()?;
        let name = point_name(p);
        if names.contains(&name) || out.join(&name).exists() {
            return Err(Error::OutputCollision(out.join(&name).display().to_string()));
        }
        names.push(name);
        configs.push(c);
    }
    let mut cache = DataCache::default();
    let mut csv = String::from("run,step,p_at_1,p_at_1_smoothed,softmax_loss_full,steps_per_sec\n");
    for (name, c) in names.iter().zip(&configs) {
        let outcome = train_into(c, &out.join(name), &mut cache)?;
        let series = &outcome.series;
        let last = series.last().expect("initial eval always recorded");
        let p1 = series.values(&p_at_key(1));
        let smoothed = moving_average(&p1, 20)?.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{}",
            last.step,
            last.get(&p_at_key(1)).unwrap_or(f64::NAN),
            smoothed,
            last.get(SOFTMAX_LOSS_FULL).unwrap_or(f64::NAN),
            last.steps_per_sec
        );
    }
    fs::write(out.join("summary.csv"), &csv)?;
    Ok(csv)
}

/// `step,raw,smoothed` rows for `metric`, smoothing after truncation.
pub fn report_csv(series: &MetricSeries, metric: &str, window: usize, truncate: u64) -> Result<String> {
    let kept: Vec<_> = series
        .records()
        .iter()
        .filter(|r| r.step >= truncate)
        .filter_map(|r| r.get(metric).map(|v| (r.step, v)))
        .collect();
    let raw: Vec<f64> = kept.iter().map(|&(_, v)| v).collect();
    let smoothed = moving_average(&raw, window)?;
    let mut out = String::from("step,raw,smoothed\n");
    for ((step, v), s) in kept.iter().zip(smoothed) {
        let _ = writeln!(out, "{step},{v},{s}");
    }
    Ok(out)
}

fn report(args: &ReportArgs) -> Result<()> {
    let path = if args.input.is_dir() {
        args.input.join("metrics.jsonl")
    } else {
        args.input.clone()
    };
    let series = MetricSeries::from_jsonl(&fs::read_to_string(&path)?)?;
    let csv = report_csv(&series, &args.metric, args.window, args.truncate)?;
    fs::create_dir_all(&args.out)?;
    let target = args.out.join(format!("report_{}.csv", args.metric));
    fs::File::create(&target)?.write_all(csv.as_bytes())?;
    println!("{}", target.display());
    Ok(())
}

/// Size the global thread pool from `TAPAS_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}
