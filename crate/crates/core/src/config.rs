//! Flat `key = value` experiment configuration, presets and sweep grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data_synth::{Dataset, GaussianMixtureSpec, LinearGenerator, NonlinearGenSpec, NonlinearGenerator, TEST_SPLIT, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::eval::MapVariant;
use crate::model::EncoderKind;
use crate::tapas::TapasConfig;
use crate::train::{LossMode, ModelConfig, RunConfig, SamplerConfig, TrainConfig};

/// Every recognised key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.kind", "linear"),
    ("data.train_path", ""),
    ("data.test_path", ""),
    ("data.vocab", "1000"),
    ("data.dim", "50"),
    ("data.centroid_scale", "3"),
    ("data.centroid_dim", "10"),
    ("data.noise_dim", "10"),
    ("data.hidden", "50"),
    ("data.sigma", "1"),
    ("data.seed", "0"),
    ("data.train_count", "100000"),
    ("data.test_count", "10000"),
    ("model.encoder", "identity"),
    ("model.hidden", "50"),
    ("model.dim", "50"),
    ("model.bias", "true"),
    ("train.batch_size", "16"),
    ("train.steps", "6250"),
    ("train.eval_every", "125"),
    ("train.lr", "0.1"),
    ("train.epsilon", "1e-8"),
    ("train.lambda", "0.001"),
    ("train.mode", "tapas"),
    ("train.seed", "0"),
    ("eval.ks", "1"),
    ("eval.max_examples", "0"),
    ("eval.map_variant", "hits"),
    ("sampler.alpha", "0.75"),
    ("sampler.beta", "auto"),
    ("tapas.n", "16"),
    ("tapas.r", "1"),
    ("tapas.tau0", "1"),
    ("tapas.tau_decay", "1"),
    ("tapas.tau_min", "0.001"),
    ("shards.m", "1"),
    ("loss.logq_correction", "false"),
];

/// A named bundle of overrides and an optional sweep grid.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub base: &'static [(&'static str, &'static str)],
    pub grid: Option<&'static str>,
}

const LINEAR: &[(&str, &str)] = &[];

const NN: &[(&str, &str)] = &[
    ("data.kind", "nonlinear"),
    ("data.vocab", "10000"),
    ("data.dim", "25"),
    ("data.train_count", "1000000"),
    ("data.test_count", "100000"),
    ("model.encoder", "mlp"),
    ("model.hidden", "50"),
    ("model.dim", "50"),
    ("model.bias", "false"),
    ("train.batch_size", "32"),
    ("train.steps", "20000"),
    ("train.eval_every", "500"),
    ("eval.max_examples", "10000"),
    ("tapas.n", "64"),
];

pub const PRESETS: &[Preset] = &[
    Preset { name: "linear", base: LINEAR, grid: None },
    Preset {
        name: "linear-fig1a",
        base: LINEAR,
        grid: Some("tapas.r=1,2,4,8"),
    },
    Preset {
        name: "linear-fig1b",
        base: LINEAR,
        grid: Some("tapas.n:tapas.r=128:1,64:2,32:4,16:8"),
    },
    Preset { name: "nn", base: NN, grid: None },
    Preset {
        name: "nn-fig2b",
        base: NN,
        grid: Some("tapas.r=1,2,4,8"),
    },
    Preset {
        name: "nn-fig2c",
        base: NN,
        grid: Some("tapas.n:tapas.r=64:8,128:4,512:1"),
    },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset {name:?}; known: {}", names.join(", ")))
    })
}

/// Resolved key-value map; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ConfigMap {
    pub fn from_preset(p: &Preset) -> Self {
        let mut c = ConfigMap::default();
        for &(k, v) in p.base {
            c.values.insert(k.into(), v.into());
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// `key=value`, as given to `--set`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Apply a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let kind = self.get("data.kind");
        let train_path = self.get("data.train_path");
        let test_path = self.get("data.test_path");
        let data = if !train_path.is_empty() || !test_path.is_empty() {
            if train_path.is_empty() || test_path.is_empty() {
                return Err(Error::Config("set both data.train_path and data.test_path".into()));
            }
            DataSource::Files {
                train: PathBuf::from(train_path),
                test: PathBuf::from(test_path),
            }
        } else {
            let train_count = self.parse("data.train_count")?;
            let test_count = self.parse("data.test_count")?;
            match kind {
                "linear" => DataSource::Linear {
                    spec: GaussianMixtureSpec {
                        vocab: self.parse("data.vocab")?,
                        dim: self.parse("data.dim")?,
                        centroid_scale: self.parse("data.centroid_scale")?,
                        seed: self.parse("data.seed")?,
                    },
                    train_count,
                    test_count,
                },
                "nonlinear" => DataSource::Nonlinear {
                    spec: NonlinearGenSpec {
                        vocab: self.parse("data.vocab")?,
                        centroid_dim: self.parse("data.centroid_dim")?,
                        noise_dim: self.parse("data.noise_dim")?,
                        hidden: self.parse("data.hidden")?,
                        dim: self.parse("data.dim")?,
                        sigma: self.parse("data.sigma")?,
                        centroid_scale: self.parse("data.centroid_scale")?,
                        seed: self.parse("data.seed")?,
                    },
                    train_count,
                    test_count,
                },
                other => return Err(Error::Config(format!("unknown data.kind {other:?}"))),
            }
        };
        let eval_ks = self
            .get("eval.ks")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("eval.ks: bad entry {s:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let beta = match self.get("sampler.beta") {
            "auto" | "" => None,
            _ => Some(self.parse("sampler.beta")?),
        };
        let run = RunConfig {
            train: TrainConfig {
                batch_size: self.parse("train.batch_size")?,
                steps: self.parse("train.steps")?,
                eval_every: self.parse("train.eval_every")?,
                lr: self.parse("train.lr")?,
                epsilon: self.parse("train.epsilon")?,
                lambda: self.parse("train.lambda")?,
                mode: LossMode::parse(self.get("train.mode"))?,
                seed: self.parse("train.seed")?,
                logq_correction: self.parse("loss.logq_correction")?,
                eval_ks,
                map_variant: MapVariant::parse(self.get("eval.map_variant"))?,
            },
            model: ModelConfig {
                encoder: EncoderKind::parse(self.get("model.encoder"))?,
                hidden: self.parse("model.hidden")?,
                dim: self.parse("model.dim")?,
                label_bias: self.parse("model.bias")?,
            },
            sampler: SamplerConfig {
                alpha: self.parse("sampler.alpha")?,
                beta,
            },
            tapas: TapasConfig {
                n: self.parse("tapas.n")?,
                r: self.parse("tapas.r")?,
                tau0: self.parse("tapas.tau0")?,
                tau_decay: self.parse("tapas.tau_decay")?,
                tau_min: self.parse("tapas.tau_min")?,
            },
            shards: self.parse("shards.m")?,
        };
        run.train.validate()?;
        if run.train.mode != LossMode::Full {
            run.tapas.validate()?;
        }
        if run.shards == 0 {
            return Err(Error::Config("shards.m must be at least 1".into()));
        }
        let max: usize = self.parse("eval.max_examples")?;
        Ok(ExperimentConfig {
            data,
            run,
            eval_max_examples: (max > 0).then_some(max),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files { train: PathBuf, test: PathBuf },
    Linear { spec: GaussianMixtureSpec, train_count: usize, test_count: usize },
    Nonlinear { spec: NonlinearGenSpec, train_count: usize, test_count: usize },
}

impl DataSource {
    /// `(train, test)`.
    pub fn materialize(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Files { train, test } => {
                for p in [train, test] {
                    if !Path::new(p).exists() {
                        return Err(Error::Config(format!("dataset {} does not exist", p.display())));
                    }
                }
                Ok((Dataset::load(train)?, Dataset::load(test)?))
            }
            DataSource::Linear { spec, train_count, test_count } => {
                let gen = LinearGenerator::new(spec.clone())?;
                Ok((gen.sample(*train_count, TRAIN_SPLIT)?, gen.sample(*test_count, TEST_SPLIT)?))
            }
            DataSource::Nonlinear { spec, train_count, test_count } => {
                let gen = NonlinearGenerator::new(spec.clone())?;
                Ok((gen.sample(*train_count, TRAIN_SPLIT)?, gen.sample(*test_count, TEST_SPLIT)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub run: RunConfig,
    pub eval_max_examples: Option<usize>,
}

/// One sweep point: the overrides that distinguish it.
pub type GridPoint = Vec<(String, String)>;

/// Parse a grid: `;`-separated axes, each `key=v1,v2,..` or paired
/// `k1:k2=a1:b1,a2:b2,..`. The result is the cartesian product of the axes.
pub fn parse_grid(text: &str) -> Result<Vec<GridPoint>> {
    let mut points: Vec<GridPoint> = vec![Vec::new()];
    let mut any = false;
    for axis in text.split(';').map(str::trim).filter(|a| !a.is_empty()) {
        any = true;
        let (keys, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {axis:?} lacks '='")))?;
        let keys: Vec<&str> = keys.split(':').map(str::trim).collect();
        let mut rows = Vec::new();
        for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
            let parts: Vec<&str> = v.split(':').map(str::trim).collect();
            if parts.len() != keys.len() {
                return Err(Error::Config(format!(
                    "grid value {v:?} does not match keys {}",
                    keys.join(":")
                )));
            }
            rows.push(
                keys.iter()
                    .zip(parts)
                    .map(|(k, p)| (k.to_string(), p.to_string()))
                    .collect::<Vec<_>>(),
            );
        }
        if rows.is_empty() {
            return Err(Error::Config(format!("grid axis {axis:?} has no values")));
        }
        points = points
            .iter()
            .flat_map(|p| {
                rows.iter().map(move |row| {
                    let mut q = p.clone();
                    q.extend(row.iter().cloned());
                    q
                })
            })
            .collect();
    }
    if !any {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(points)
}

/// Directory-friendly name of a grid point, e.g. `tapas.n=64_tapas.r=8`.
pub fn point_name(point: &GridPoint) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("_")
        .replace(['/', ' '], "-")
}
