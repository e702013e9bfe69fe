//! Rank metrics, full-vocabulary evaluation and curve smoothing.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::Dataset;
use crate::error::{Error, Result};
use crate::model::{top_k_of, Model};
use crate::numerics;

/// Which MAP@k normaliser to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapVariant {
    /// Mean of precision@k′ over the hit positions k′ ≤ k; 0 without hits.
    #[default]
    Hits,
    /// Sum of precision@k′ over hit positions divided by `min(|Y|, k)`.
    Kaggle,
}

impl MapVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hits" => Ok(MapVariant::Hits),
            "kaggle" => Ok(MapVariant::Kaggle),
            other => Err(Error::Config(format!("unknown eval.map_variant {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapVariant::Hits => "hits",
            MapVariant::Kaggle => "kaggle",
        }
    }
}

fn check_k(ranked: &[u32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds ranking of length {}",
            ranked.len()
        )));
    }
    Ok(())
}

/// `|top-k ∩ truth| / k`.
pub fn precision_at_k(ranked: &[u32], truth: &[u32], k: usize) -> Result<f64> {
    check_k(ranked, k)?;
    let hits = ranked[..k].iter().filter(|y| truth.contains(y)).count();
    Ok(hits as f64 / k as f64)
}

pub fn map_at_k(ranked: &[u32], truth: &[u32], k: usize) -> Result<f64> {
    map_at_k_variant(ranked, truth, k, MapVariant::Hits)
}

pub fn map_at_k_variant(ranked: &[u32], truth: &[u32], k: usize, variant: MapVariant) -> Result<f64> {
    check_k(ranked, k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, y) in ranked[..k].iter().enumerate() {
        if truth.contains(y) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        return Ok(0.0);
    }
    Ok(match variant {
        MapVariant::Hits => sum / hits as f64,
        MapVariant::Kaggle => sum / truth.len().min(k) as f64,
    })
}

/// Trailing mean over the last `min(window, i + 1)` points.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let out = (0..series.len())
        .map(|i| {
            let len = window.min(i + 1);
            series[i + 1 - len..=i].iter().sum::<f64>() / len as f64
        })
        .collect();
    Ok(out)
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Wall time since training started, including evaluation.
    pub wall_seconds: f64,
    /// Training steps per second, excluding evaluation time.
    pub steps_per_sec: f64,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Step-ordered records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    records: Vec<MetricRecord>,
}

impl MetricSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        if let Some((name, v)) = record.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("metric {name} is {v}")));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Values of one metric, in step order (missing entries skipped).
    pub fn values(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.get(name)).collect()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.step).collect()
    }

    /// Same steps and same quality metrics, timing ignored.
    pub fn same_metrics(&self, other: &MetricSeries) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.step == b.step && a.metrics == b.metrics)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut series = MetricSeries::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            series.push(serde_json::from_str(line)?)?;
        }
        Ok(series)
    }

    /// Mean of the last `fraction` of the moving-averaged curve (at least one point).
    pub fn final_window_mean(&self, name: &str, window: usize, fraction: f64) -> Result<f64> {
        let values = self.values(name);
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("no values for {name}")));
        }
        let smooth = moving_average(&values, window)?;
        let tail = ((smooth.len() as f64 * fraction).ceil() as usize).clamp(1, smooth.len());
        Ok(smooth[smooth.len() - tail..].iter().sum::<f64>() / tail as f64)
    }
}

pub fn p_at_key(k: usize) -> String {
    format!("p_at_{k}")
}

pub fn map_at_key(k: usize) -> String {
    format!("map_at_{k}")
}

pub const SOFTMAX_LOSS_FULL: &str = "softmax_loss_full";

/// Exact evaluation over the whole vocabulary: precision@k and MAP@k for
/// each `k`, plus the mean full softmax loss.
pub fn eval_model(
    model: &Model,
    eval_set: &Dataset,
    ks: &[usize],
    variant: MapVariant,
) -> Result<BTreeMap<String, f64>> {
    if eval_set.dim() != model.encoder.input_dim() {
        return Err(Error::Shape(format!(
            "eval set has {} features, encoder expects {}",
            eval_set.dim(),
            model.encoder.input_dim()
        )));
    }
    if eval_set.vocab() > model.vocab() {
        return Err(Error::Shape(format!(
            "eval set vocabulary {} exceeds model vocabulary {}",
            eval_set.vocab(),
            model.vocab()
        )));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1);
    if ks.is_empty() || ks.contains(&0) || kmax > model.vocab() {
        return Err(Error::InvalidArgument(format!("invalid ks {ks:?}")));
    }
    let per_example: Vec<Vec<f64>> = (0..eval_set.len())
        .into_par_iter()
        .map(|i| {
            let context = model.encoder.encode(eval_set.x(i)).expect("checked dims");
            let logits = model.logits(&context);
            let y = eval_set.y(i);
            let loss = numerics::log_sum_exp_unchecked(&logits) - logits[y as usize];
            let ranked = top_k_of(&logits, kmax);
            let truth = [y];
            let mut row = Vec::with_capacity(2 * ks.len() + 1);
            row.push(loss);
            for &k in ks {
                row.push(precision_at_k(&ranked, &truth, k).unwrap());
                row.push(map_at_k_variant(&ranked, &truth, k, variant).unwrap());
            }
            row
        })
        .collect();
    let mut sums = vec![0.0; 2 * ks.len() + 1];
    for row in &per_example {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = eval_set.len() as f64;
    let mut out = BTreeMap::new();
    out.insert(SOFTMAX_LOSS_FULL.to_string(), sums[0] / n);
    for (j, &k) in ks.iter().enumerate() {
        out.insert(p_at_key(k), sums[1 + 2 * j] / n);
        out.insert(map_at_key(k), sums[2 + 2 * j] / n);
    }
    Ok(out)
}
