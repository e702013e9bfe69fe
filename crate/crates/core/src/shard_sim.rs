//! In-process model of sampling at the parameter servers: the vocabulary is
//! randomly partitioned over `m` shards and each shard returns the top
//! `⌈n/m⌉` of its slice of the presample. The union approximates the exact
//! top `n`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LabelEmbeddingTable;
use crate::numerics::{Mat, Rng};
use crate::tapas::{candidate_scores, select_top_n, CandidateSet, Origin};

const PARALLEL_SHARD_CANDIDATES: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPartition {
    shards: usize,
    assignment: Vec<u32>,
}

impl ShardPartition {
    /// Uniformly random balanced partition of `[V]` over `m` shards.
    pub fn random(vocab: usize, shards: usize, rng: &mut Rng) -> Result<Self> {
        if shards == 0 || shards > vocab {
            return Err(Error::InvalidArgument(format!(
                "shard count {shards} must lie in 1..={vocab}"
            )));
        }
        let mut perm: Vec<u32> = (0..vocab as u32).collect();
        rng.shuffle(&mut perm);
        let mut assignment = vec![0u32; vocab];
        for (pos, &label) in perm.iter().enumerate() {
            assignment[label as usize] = (pos % shards) as u32;
        }
        Ok(ShardPartition { shards, assignment })
    }

    /// Explicit assignment, label id -> shard id.
    pub fn from_assignment(assignment: Vec<u32>, shards: usize) -> Result<Self> {
        if shards == 0 {
            return Err(Error::InvalidArgument("need at least one shard".into()));
        }
        if let Some(s) = assignment.iter().find(|&&s| s as usize >= shards) {
            return Err(Error::InvalidArgument(format!("shard id {s} out of range")));
        }
        Ok(ShardPartition { shards, assignment })
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    pub fn vocab(&self) -> usize {
        self.assignment.len()
    }

    pub fn shard_of(&self, label: u32) -> u32 {
        self.assignment[label as usize]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.shards];
        for &s in &self.assignment {
            sizes[s as usize] += 1;
        }
        sizes
    }
}

pub fn partition_vocab(vocab: usize, shards: usize, rng: &mut Rng) -> Result<ShardPartition> {
    ShardPartition::random(vocab, shards, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedSelection {
    pub selected: CandidateSet,
    /// `n - |selected|` when shards held too few candidates.
    pub shortfall: usize,
    /// Labels returned by each shard, ascending.
    pub per_shard: Vec<Vec<u32>>,
}

/// Per-shard top `⌈n/m⌉` over already-scored candidates, merged and, if the
/// union exceeds `n`, truncated to the global top `n` by score.
pub fn select_sharded(
    labels: &[u32],
    scores: &[f64],
    part: &ShardPartition,
    n: usize,
) -> ShardedSelection {
    let m = part.shards();
    let quota = n.div_ceil(m);
    let mut buckets: Vec<(Vec<u32>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
    for (&y, &s) in labels.iter().zip(scores) {
        let b = &mut buckets[part.shard_of(y) as usize];
        b.0.push(y);
        b.1.push(s);
    }
    let per_shard: Vec<Vec<u32>> = if labels.len() >= PARALLEL_SHARD_CANDIDATES {
        buckets
            .par_iter()
            .map(|(ls, ss)| select_top_n(ls, ss, quota))
            .collect()
    } else {
        buckets
            .iter()
            .map(|(ls, ss)| select_top_n(ls, ss, quota))
            .collect()
    };
    let mut union: Vec<u32> = per_shard.iter().flatten().copied().collect();
    union.sort_unstable();
    if union.len() > n {
        let score_of = |y: u32| scores[labels.binary_search(&y).expect("candidate scored")];
        let union_scores: Vec<f64> = union.iter().map(|&y| score_of(y)).collect();
        union = select_top_n(&union, &union_scores, n);
    }
    let shortfall = n.saturating_sub(union.len());
    ShardedSelection {
        selected: CandidateSet::new(union, Origin::Final),
        shortfall,
        per_shard,
    }
}

/// Sharded counterpart of [`crate::tapas::adaptive_pass`].
pub fn sharded_adaptive_pass(
    contexts: &Mat,
    presample: &CandidateSet,
    emb: &LabelEmbeddingTable,
    part: &ShardPartition,
    n: usize,
    tau: f64,
) -> Result<ShardedSelection> {
    if part.vocab() != emb.vocab() {
        return Err(Error::Shape(format!(
            "partition covers {} labels, embeddings {}",
            part.vocab(),
            emb.vocab()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let scores = candidate_scores(contexts, presample.labels(), emb, tau);
    Ok(select_sharded(presample.labels(), &scores, part, n))
}

/// `|approx ∩ exact| / |exact|`.
pub fn recall_vs_exact(approx: &CandidateSet, exact: &CandidateSet) -> Result<f64> {
    if exact.is_empty() {
        return Err(Error::EmptyInput("recall_vs_exact"));
    }
    let hits = approx.labels().iter().filter(|&&y| exact.contains(y)).count();
    Ok(hits as f64 / exact.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSite {
    AtWorker,
    AtParameterServer,
}

/// Traffic for one adaptive pass, counting floats and label ids separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommCost {
    pub floats_sent: u64,
    pub ids_sent: u64,
    pub floats_returned: u64,
}

/// Presample size is taken as `r·n`.
pub fn comm_cost(batch: u64, d: u64, n: u64, r: u64, m: u64, site: SampleSite) -> CommCost {
    let presample = r * n;
    match site {
        SampleSite::AtWorker => CommCost {
            floats_sent: 0,
            ids_sent: presample,
            floats_returned: presample * d,
        },
        SampleSite::AtParameterServer => CommCost {
            floats_sent: m * batch * d,
            ids_sent: presample,
            floats_returned: n * d,
        },
    }
}
