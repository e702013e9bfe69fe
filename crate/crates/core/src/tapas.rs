//! Two-pass adaptive negative sampling.
//!
//! The first pass draws a presample `S′` of `r·n` labels from the squashed
//! frequency distribution. The second pass keeps the `n` labels of `S′`
//! with the largest batch score
//!
//! ```text
//! score(y) = log Σ_{i∈B} exp((φ(x_i)·ψ(y) + b_y) / τ)
//! ```
//!
//! which ranks exactly like the plain sum of exponentials but cannot
//! overflow. Temperature sits inside the exponent: dividing outside would
//! rescale every candidate equally and leave the selection unchanged.
//!
//! Batch positives are removed from the first pass (the presample is drawn
//! from `[V]` minus the positives), so with `r = 1` the second pass keeps
//! all of `S′` and the sampler reduces to sampled softmax.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LabelEmbeddingTable;
use crate::numerics::{axpy, Mat, Rng};
use crate::sampler::SamplingDistribution;

/// Score work (candidates x batch x dim) above which scoring fans out to
/// the thread pool.
const PARALLEL_SCORE_WORK: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Presample,
    Final,
}

/// Distinct labels in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    labels: Vec<u32>,
    origin: Origin,
}

impl CandidateSet {
    pub fn new(mut labels: Vec<u32>, origin: Origin) -> Self {
        labels.sort_unstable();
        labels.dedup();
        CandidateSet { labels, origin }
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    pub(crate) fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapasConfig {
    pub n: usize,
    pub r: usize,
    pub tau0: f64,
    pub tau_decay: f64,
    pub tau_min: f64,
}

impl Default for TapasConfig {
    fn default() -> Self {
        TapasConfig {
            n: 16,
            r: 1,
            tau0: 1.0,
            tau_decay: 1.0,
            tau_min: 1e-3,
        }
    }
}

impl TapasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("tapas.n must be at least 1".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidArgument("tapas.r must be at least 1".into()));
        }
        if !(self.tau0 > 0.0) || !(self.tau_min > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(Error::InvalidArgument("tapas.tau_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn presample_size(&self) -> usize {
        self.n.saturating_mul(self.r)
    }
}

/// `max(tau_min, tau0 * tau_decay^step)`.
pub fn temperature_at(cfg: &TapasConfig, step: u64) -> f64 {
    let decayed = cfg.tau0 * cfg.tau_decay.powf(step as f64);
    decayed.max(cfg.tau_min)
}

/// Batch score of each candidate, in the order of `labels`.
pub fn candidate_scores(
    contexts: &Mat,
    labels: &[u32],
    emb: &LabelEmbeddingTable,
    tau: f64,
) -> Vec<f64> {
    let logits = BatchLogits::new(contexts, labels, emb);
    let inv_tau = 1.0 / tau;
    (0..labels.len()).map(|k| logits.score(k, inv_tau)).collect()
}

/// Raw logits `φ_i·ψ_y + b_y` of every candidate against every context,
/// one row of `B` per candidate, with each row's maximum.
struct BatchLogits {
    batch: usize,
    values: Vec<f64>,
    max: Vec<f64>,
}

impl BatchLogits {
    fn new(contexts: &Mat, labels: &[u32], emb: &LabelEmbeddingTable) -> Self {
        let batch = contexts.rows();
        let mut values = vec![0.0; labels.len() * batch];
        let mut max = vec![f64::NEG_INFINITY; labels.len()];
        if batch > 0 {
            // d x B, so each candidate's B logits accumulate with unit stride
            let ctx_t = contexts.transpose();
            let fill = |(row, y): (&mut [f64], u32)| -> f64 {
                row.fill(emb.label_bias(y));
                for (&p, col) in emb.row(y).iter().zip(ctx_t.iter_rows()) {
                    axpy(p, col, row);
                }
                row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            };
            let work = labels.len() * batch * contexts.cols();
            if work >= PARALLEL_SCORE_WORK {
                values
                    .par_chunks_mut(batch)
                    .zip(labels.par_iter().copied())
                    .map(fill)
                    .collect_into_vec(&mut max);
            } else {
                for (m, item) in max.iter_mut().zip(values.chunks_mut(batch).zip(labels.iter().copied())) {
                    *m = fill(item);
                }
            }
        }
        BatchLogits { batch, values, max }
    }

    fn score(&self, k: usize, inv_tau: f64) -> f64 {
        let max = self.max[k] * inv_tau;
        if self.batch == 0 {
            return max;
        }
        let row = &self.values[k * self.batch..(k + 1) * self.batch];
        let sum: f64 = row.iter().map(|&v| (v * inv_tau - max).exp()).sum();
        max + sum.ln()
    }
}

/// `select_top_n(labels, candidate_scores(..), n)`, skipping the exact score
/// of candidates that provably cannot make the cut: a score lies in
/// `[max, max + ln B]`, so anything whose upper end is below the `n`-th
/// largest lower end is out.
pub fn adaptive_top_n(
    contexts: &Mat,
    labels: &[u32],
    emb: &LabelEmbeddingTable,
    n: usize,
    tau: f64,
) -> Vec<u32> {
    let n = n.min(labels.len());
    if n == labels.len() || n == 0 || contexts.rows() == 0 {
        return select_top_n(labels, &candidate_scores(contexts, labels, emb, tau), n);
    }
    let logits = BatchLogits::new(contexts, labels, emb);
    let inv_tau = 1.0 / tau;
    let lower: Vec<f64> = logits.max.iter().map(|&m| m * inv_tau).collect();
    let mut sorted = lower.clone();
    let (_, &mut cut, _) = sorted.select_nth_unstable_by(n - 1, |a, b| b.total_cmp(a));
    let slack = (logits.batch as f64).ln();
    let scores: Vec<f64> = lower
        .iter()
        .enumerate()
        .map(|(k, &lo)| {
            let hi = lo + slack;
            if hi + 1e-9 * (1.0 + hi.abs()) < cut {
                f64::NEG_INFINITY
            } else {
                logits.score(k, inv_tau)
            }
        })
        .collect();
    select_top_n(labels, &scores, n)
}

/// The `n` labels with the largest scores, ties to the smaller id, in
/// ascending label order.
pub fn select_top_n(labels: &[u32], scores: &[f64], n: usize) -> Vec<u32> {
    debug_assert_eq!(labels.len(), scores.len());
    let n = n.min(labels.len());
    if n == labels.len() {
        return labels.to_vec();
    }
    let mut order: Vec<(f64, u32)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    if n > 0 {
        order.select_nth_unstable_by(n - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    let mut out: Vec<u32> = order[..n].iter().map(|&(_, y)| y).collect();
    out.sort_unstable();
    out
}

/// Second pass: the top `n` of `presample` by batch score at temperature `tau`.
pub fn adaptive_pass(
    contexts: &Mat,
    presample: &CandidateSet,
    emb: &LabelEmbeddingTable,
    n: usize,
    tau: f64,
) -> Result<CandidateSet> {
    if n > presample.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {} presampled labels",
            presample.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if contexts.cols() != emb.dim() {
        return Err(Error::Shape(format!(
            "contexts have {} dims, embeddings {}",
            contexts.cols(),
            emb.dim()
        )));
    }
    if n == presample.len() {
        return Ok(presample.clone().with_origin(Origin::Final));
    }
    let chosen = adaptive_top_n(contexts, presample.labels(), emb, n, tau);
    Ok(CandidateSet::new(chosen, Origin::Final))
}

/// Negatives for one batch: presample `min(r·n, V - |exclude|)` labels from
/// `dist` (never drawing `exclude`), then keep the adaptive top `n`.
pub fn two_pass_sample(
    contexts: &Mat,
    dist: &SamplingDistribution,
    emb: &LabelEmbeddingTable,
    cfg: &TapasConfig,
    step: u64,
    exclude: &[u32],
    rng: &mut Rng,
) -> Result<CandidateSet> {
    cfg.validate()?;
    if dist.vocab() != emb.vocab() {
        return Err(Error::Shape(format!(
            "distribution over {} labels, embeddings for {}",
            dist.vocab(),
            emb.vocab()
        )));
    }
    let presample = dist.sample_excluding(cfg.presample_size(), exclude, rng);
    let n = cfg.n.min(presample.len());
    adaptive_pass(contexts, &presample, emb, n, temperature_at(cfg, step))
}
