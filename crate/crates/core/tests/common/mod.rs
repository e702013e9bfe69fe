#![allow(dead_code)]

use tapas_core::model::{Batch, Candidates, EncoderKind};
use tapas_core::numerics::stream;
use tapas_core::shard_sim::{recall_vs_exact, select_sharded, ShardPartition};
use tapas_core::tapas::{select_top_n, CandidateSet, Origin};
use tapas_core::{ContextEncoder, LabelEmbeddingTable, Mat, Model, Rng};

pub const FD_STEP: f64 = 1e-5;

/// A random model with `V` labels over `d`-dim inputs and a random batch.
pub fn random_instance(seed: u64, vocab: usize, d: usize, batch: usize, kind: EncoderKind) -> (Model, Batch) {
    let mut rng = Rng::new(seed);
    let encoder = ContextEncoder::init(kind, d, 6, d, 0.6, &mut rng).unwrap();
    let mut encoder = encoder;
    for t in encoder.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let emb = LabelEmbeddingTable::init(vocab, d, true, 0.8, &mut rng);
    let bias: Vec<f64> = (0..vocab).map(|_| 0.5 * rng.normal()).collect();
    let emb = LabelEmbeddingTable::new(emb.table().clone(), Some(bias)).unwrap();
    let inputs = Mat::gaussian(batch, d, 1.0, &mut rng);
    let labels = (0..batch).map(|_| rng.below(vocab) as u32).collect();
    (Model::new(encoder, emb).unwrap(), Batch { inputs, labels })
}

pub fn loss_of(model: &Model, batch: &Batch, cands: Candidates, offset: Option<&[f64]>) -> f64 {
    let fwd = model.forward(&batch.inputs).unwrap();
    model.loss_grad(batch, &fwd, cands, offset).unwrap().0
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Max relative error between analytic and central-difference gradients
/// over every parameter. Untouched embedding rows must have zero numeric
/// gradient as well.
pub fn fd_max_rel_error(model: &Model, batch: &Batch, cands: Candidates, offset: Option<&[f64]>) -> f64 {
    let fwd = model.forward(&batch.inputs).unwrap();
    let (_, grads) = model.loss_grad(batch, &fwd, cands, offset).unwrap();
    let central = |m_plus: &Model, m_minus: &Model| {
        (loss_of(m_plus, batch, cands, offset) - loss_of(m_minus, batch, cands, offset)) / (2.0 * FD_STEP)
    };
    let mut worst: f64 = 0.0;

    let n_tensors = model.encoder.tensors().len();
    for t in 0..n_tensors {
        let len = model.encoder.tensors()[t].3.len();
        for i in 0..len {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.encoder.tensors_mut()[t][i] += FD_STEP;
            minus.encoder.tensors_mut()[t][i] -= FD_STEP;
            worst = worst.max(rel_err(grads.encoder[t][i], central(&plus, &minus)));
        }
    }

    let emb = &model.embeddings;
    let with_table = |f: &dyn Fn(&mut Mat, &mut Vec<f64>)| {
        let mut table = emb.table().clone();
        let mut bias = emb.bias().unwrap().to_vec();
        f(&mut table, &mut bias);
        Model::new(model.encoder.clone(), LabelEmbeddingTable::new(table, Some(bias)).unwrap()).unwrap()
    };
    for z in 0..emb.vocab() {
        let zu = z as u32;
        for k in 0..emb.dim() {
            let plus = with_table(&|t, _| t.set(z, k, t.get(z, k) + FD_STEP));
            let minus = with_table(&|t, _| t.set(z, k, t.get(z, k) - FD_STEP));
            let analytic = grads.row_for(zu).map_or(0.0, |r| r[k]);
            worst = worst.max(rel_err(analytic, central(&plus, &minus)));
        }
        let plus = with_table(&|_, b| b[z] += FD_STEP);
        let minus = with_table(&|_, b| b[z] -= FD_STEP);
        let analytic = grads
            .labels
            .binary_search(&zu)
            .ok()
            .map_or(0.0, |i| grads.bias.as_ref().unwrap()[i]);
        worst = worst.max(rel_err(analytic, central(&plus, &minus)));
    }
    worst
}

/// Negatives of size `size` drawn uniformly from `[V]` minus the positives.
pub fn random_negatives(batch: &Batch, vocab: usize, size: usize, rng: &mut Rng) -> CandidateSet {
    let pos = batch.positives();
    let mut pool: Vec<u32> = (0..vocab as u32).filter(|z| pos.binary_search(z).is_err()).collect();
    rng.shuffle(&mut pool);
    pool.truncate(size);
    CandidateSet::new(pool, Origin::Final)
}

/// Kinds cycled through by the gradient oracle.
pub const KINDS: [EncoderKind; 3] = [EncoderKind::Identity, EncoderKind::Linear, EncoderKind::Mlp];

/// Worst relative error over `count` instances (V=20, d=5, batch 4) of
/// the full (`sampled == false`) or sampled loss.
pub fn gradient_oracle(count: u64, sampled: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..count {
        let kind = KINDS[(seed % 3) as usize];
        let (model, batch) = random_instance(1000 + seed, 20, 5, 4, kind);
        let err = if sampled {
            let mut rng = Rng::new(seed).split(stream::SAMPLING);
            let pos = batch.positives().len();
            let negs = random_negatives(&batch, 20, 8usize.saturating_sub(pos).max(1), &mut rng);
            fd_max_rel_error(&model, &batch, Candidates::Sampled(&negs), None)
        } else {
            fd_max_rel_error(&model, &batch, Candidates::Full, None)
        };
        worst = worst.max(err);
    }
    worst
}

pub fn brute_precision(ranked: &[u32], truth: &[u32], k: usize) -> f64 {
    let mut hits = 0usize;
    for i in 0..k {
        for t in truth {
            if ranked[i] == *t {
                hits += 1;
            }
        }
    }
    hits as f64 / k as f64
}

pub fn brute_map(ranked: &[u32], truth: &[u32], k: usize) -> f64 {
    let mut precisions = Vec::new();
    for pos in 1..=k {
        if truth.contains(&ranked[pos - 1]) {
            precisions.push(brute_precision(ranked, truth, pos));
        }
    }
    if precisions.is_empty() {
        0.0
    } else {
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }
}

/// Mean recall of the sharded top-`n` vs the exact top-`n`, over i.i.d.
/// Gaussian scores of `presample` labels drawn from `[vocab]`, one trial
/// per seed.
pub fn mean_shard_recall(n: usize, m: usize, presample: usize, vocab: usize, seeds: u64) -> f64 {
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = Rng::new(seed);
        let part = ShardPartition::random(vocab, m, &mut rng.split(stream::PARTITION)).unwrap();
        let mut labels: Vec<u32> = (0..vocab as u32).collect();
        rng.shuffle(&mut labels);
        labels.truncate(presample);
        labels.sort_unstable();
        let scores: Vec<f64> = labels.iter().map(|_| rng.normal()).collect();
        let exact = CandidateSet::new(select_top_n(&labels, &scores, n), Origin::Final);
        let approx = select_sharded(&labels, &scores, &part, n);
        total += recall_vs_exact(&approx.selected, &exact).unwrap();
    }
    total / seeds as f64
}
