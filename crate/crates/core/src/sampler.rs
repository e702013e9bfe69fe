//! Non-adaptive first pass: the squashed empirical label distribution and
//! weighted sampling without replacement from it.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tapas::{CandidateSet, Origin};

pub const DEFAULT_ALPHA: f64 = 0.75;

/// Default floor `1/(10 V)`.
pub fn default_beta(vocab: usize) -> f64 {
    1.0 / (10.0 * vocab as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    q: Vec<f64>,
    inv_q: Vec<f64>,
    alpha: f64,
    beta: f64,
}

impl SamplingDistribution {
    /// `q_z = max(f_z^alpha, beta) / sum_w max(f_w^alpha, beta)`.
    pub fn build_squashed(freqs: &[f64], alpha: f64, beta: f64) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::EmptyInput("build_squashed"));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if let Some(f) = freqs.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid frequency {f}")));
        }
        let weights: Vec<f64> = freqs.iter().map(|&f| f.powf(alpha).max(beta)).collect();
        Ok(Self::from_weights(weights, alpha, beta))
    }

    pub fn uniform(vocab: usize) -> Self {
        Self::from_weights(vec![1.0; vocab], 0.0, 1.0)
    }

    fn from_weights(weights: Vec<f64>, alpha: f64, beta: f64) -> Self {
        let total: f64 = weights.iter().sum();
        let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let inv_q = q.iter().map(|p| 1.0 / p).collect();
        SamplingDistribution {
            q,
            inv_q,
            alpha,
            beta,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.q
    }

    pub fn vocab(&self) -> usize {
        self.q.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Draws `min(size, V)` distinct labels.
    pub fn sample_without_replacement(&self, size: usize, rng: &mut Rng) -> CandidateSet {
        self.sample_excluding(size, &[], rng)
    }

    /// Weighted sampling without replacement from `[V] \ exclude`, returning
    /// `min(size, V - |exclude|)` labels.
    ///
    /// Gumbel-top-k in its exponential-race form: label `z` gets key
    /// `E_z / q_z` with `E_z ~ Exp(1)`, which orders labels exactly as
    /// `log q_z + Gumbel` does. The smallest keys win. One uniform is drawn
    /// per label regardless of `exclude`, so the stream position after the
    /// call depends only on `V`.
    pub fn sample_excluding(&self, size: usize, exclude: &[u32], rng: &mut Rng) -> CandidateSet {
        let vocab = self.q.len();
        let mut keys: Vec<(f64, u32)> = self
            .inv_q
            .iter()
            .enumerate()
            .map(|(z, &inv)| (-rng.uniform_open().ln() * inv, z as u32))
            .collect();
        let mut excluded = 0;
        for &y in exclude {
            let slot = &mut keys[y as usize].0;
            if *slot != f64::INFINITY {
                *slot = f64::INFINITY;
                excluded += 1;
            }
        }
        let take = size.min(vocab - excluded);
        if take == 0 {
            return CandidateSet::new(Vec::new(), Origin::Presample);
        }
        if take < vocab {
            keys.select_nth_unstable_by(take - 1, race_order);
        }
        let labels = keys[..take].iter().map(|&(_, z)| z).collect();
        CandidateSet::new(labels, Origin::Presample)
    }
}

fn race_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}
