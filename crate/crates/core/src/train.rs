//! Minibatch training with AdaGrad: batch -> negatives -> loss and
//! gradients -> ℓ2 -> update, with periodic full-vocabulary evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::data_synth::Dataset;
use crate::error::{Error, Result};
use crate::eval::{eval_model, MapVariant, MetricRecord, MetricSeries};
use crate::model::{Batch, Candidates, ContextEncoder, EncoderKind, GradientBundle, LabelEmbeddingTable, Model};
use crate::numerics::{stream, Mat, Rng};
use crate::sampler::{default_beta, SamplingDistribution, DEFAULT_ALPHA};
use crate::shard_sim::{recall_vs_exact, select_sharded, ShardPartition};
use crate::tapas::{adaptive_top_n, candidate_scores, select_top_n, temperature_at, CandidateSet, Origin, TapasConfig};

pub const TRAIN_LOSS: &str = "train_loss";
pub const SHARD_RECALL: &str = "shard_recall";
pub const SHARD_SHORTFALL: &str = "shard_shortfall";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Full,
    Sampled,
    Tapas,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossMode::Full),
            "sampled" => Ok(LossMode::Sampled),
            "tapas" => Ok(LossMode::Tapas),
            other => Err(Error::Config(format!("unknown train.mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Full => "full",
            LossMode::Sampled => "sampled",
            LossMode::Tapas => "tapas",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub mode: LossMode,
    pub seed: u64,
    /// Subtract `log q` from candidate logits; plain sampled softmax only.
    pub logq_correction: bool,
    pub eval_ks: Vec<usize>,
    pub map_variant: MapVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 1000,
            eval_every: 100,
            lr: 0.1,
            epsilon: 1e-8,
            lambda: 0.001,
            mode: LossMode::Tapas,
            seed: 0,
            logq_correction: false,
            eval_ks: vec![1],
            map_variant: MapVariant::Hits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("lr and epsilon must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval.ks must hold positive values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub hidden: usize,
    /// Embedding dimension `d`; ignored by the identity encoder.
    pub dim: usize,
    pub label_bias: bool,
}

impl ModelConfig {
    /// Encoder and embeddings from `N(0, 1/d)`, biases zero.
    pub fn init(&self, input_dim: usize, vocab: usize, rng: &mut Rng) -> Result<Model> {
        let dim = match self.encoder {
            EncoderKind::Identity => input_dim,
            _ => self.dim,
        };
        let std = 1.0 / (dim as f64).sqrt();
        let encoder = ContextEncoder::init(self.encoder, input_dim, self.hidden, dim, std, rng)?;
        let embeddings = LabelEmbeddingTable::init(vocab, dim, self.label_bias, std, rng);
        Model::new(encoder, embeddings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub alpha: f64,
    /// `None` means `1/(10 V)`.
    pub beta: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: DEFAULT_ALPHA,
            beta: None,
        }
    }
}

/// Squared-gradient accumulators mirroring a [`Model`]; embedding rows are
/// stored densely but only touched rows change.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub lr: f64,
    pub epsilon: f64,
    encoder: Vec<Vec<f64>>,
    table: Mat,
    bias: Option<Vec<f64>>,
}

impl AdaGradState {
    pub fn new(model: &Model, lr: f64, epsilon: f64) -> Self {
        let emb = &model.embeddings;
        AdaGradState {
            lr,
            epsilon,
            encoder: model
                .encoder
                .tensors()
                .iter()
                .map(|(_, _, _, v)| vec![0.0; v.len()])
                .collect(),
            table: Mat::zeros(emb.vocab(), emb.dim()),
            bias: emb.bias().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn table_accumulator(&self) -> &Mat {
        &self.table
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientBundle) {
        let (lr, eps) = (self.lr, self.epsilon);
        for ((theta, acc), g) in model
            .encoder
            .tensors_mut()
            .into_iter()
            .zip(&mut self.encoder)
            .zip(&grads.encoder)
        {
            adagrad_update(theta, acc, g, lr, eps);
        }
        let (table, bias) = model.embeddings.parts_mut();
        for (k, &z) in grads.labels.iter().enumerate() {
            let z = z as usize;
            adagrad_update(table.row_mut(z), self.table.row_mut(z), grads.rows.row(k), lr, eps);
        }
        if let (Some(b), Some(acc), Some(g)) = (bias, self.bias.as_mut(), grads.bias.as_ref()) {
            for (k, &z) in grads.labels.iter().enumerate() {
                let z = z as usize;
                adagrad_update(
                    std::slice::from_mut(&mut b[z]),
                    std::slice::from_mut(&mut acc[z]),
                    &g[k..=k],
                    lr,
                    eps,
                );
            }
        }
    }
}

/// `acc += g²; θ -= lr·g / (√acc + ε)`.
pub fn adagrad_update(theta: &mut [f64], acc: &mut [f64], grad: &[f64], lr: f64, eps: f64) {
    for ((t, a), &g) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
        if g == 0.0 {
            continue;
        }
        *a += g * g;
        *t -= lr * g / (a.sqrt() + eps);
    }
}

/// Consecutive batches over a freshly shuffled permutation per epoch.
#[derive(Debug, Clone)]
pub struct EpochBatcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochBatcher {
    pub fn new(len: usize, rng: Rng) -> Self {
        let mut b = EpochBatcher {
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        b.rng.shuffle(&mut b.order);
        b
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// What a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub series: MetricSeries,
    pub model: Model,
    /// Negatives used at each step, when recorded.
    pub negatives: Vec<Vec<u32>>,
    /// Seconds spent in training steps, evaluation excluded.
    pub train_seconds: f64,
}

/// Everything one run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub tapas: TapasConfig,
    pub shards: usize,
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    model: Model,
    opt: AdaGradState,
    dist: SamplingDistribution,
    log_q: Option<Vec<f64>>,
    partition: Option<ShardPartition>,
    batcher: EpochBatcher,
    sampling_rng: Rng,
    step: u64,
    pub record_negatives: bool,
    negatives: Vec<Vec<u32>>,
    loss_sum: f64,
    recall_sum: f64,
    shortfall_sum: f64,
    since_eval: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a Dataset) -> Result<Self> {
        let root = Rng::new(cfg.train.seed);
        let model = cfg
            .model
            .init(data.dim(), data.vocab(), &mut root.split(stream::INIT))?;
        Self::with_model(cfg, data, model)
    }

    pub fn with_model(cfg: &'a RunConfig, data: &'a Dataset, model: Model) -> Result<Self> {
        cfg.train.validate()?;
        if cfg.train.mode != LossMode::Full {
            cfg.tapas.validate()?;
        }
        if model.encoder.input_dim() != data.dim() {
            return Err(Error::Shape(format!(
                "dataset has {} features, encoder expects {}",
                data.dim(),
                model.encoder.input_dim()
            )));
        }
        if model.vocab() != data.vocab() {
            return Err(Error::Shape(format!(
                "dataset vocabulary {} but model has {} labels",
                data.vocab(),
                model.vocab()
            )));
        }
        let root = Rng::new(cfg.train.seed);
        let beta = cfg.sampler.beta.unwrap_or_else(|| default_beta(data.vocab()));
        let dist = SamplingDistribution::build_squashed(data.label_frequencies(), cfg.sampler.alpha, beta)?;
        let log_q = (cfg.train.logq_correction && cfg.train.mode == LossMode::Sampled)
            .then(|| dist.probs().iter().map(|q| q.ln()).collect());
        let partition = if cfg.train.mode == LossMode::Tapas && cfg.shards > 1 {
            Some(ShardPartition::random(
                data.vocab(),
                cfg.shards,
                &mut root.split(stream::PARTITION),
            )?)
        } else {
            None
        };
        if cfg.shards == 0 {
            return Err(Error::Config("shards.m must be at least 1".into()));
        }
        Ok(Trainer {
            cfg,
            data,
            opt: AdaGradState::new(&model, cfg.train.lr, cfg.train.epsilon),
            model,
            dist,
            log_q,
            partition,
            batcher: EpochBatcher::new(data.len(), root.split(stream::SHUFFLE)),
            sampling_rng: root.split(stream::SAMPLING),
            step: 0,
            record_negatives: false,
            negatives: Vec::new(),
            loss_sum: 0.0,
            recall_sum: 0.0,
            shortfall_sum: 0.0,
            since_eval: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn distribution(&self) -> &SamplingDistribution {
        &self.dist
    }

    /// Negatives for the current batch, plus `(recall, shortfall)` when sharded.
    fn negatives_for(
        &mut self,
        contexts: &Mat,
        positives: &[u32],
    ) -> Result<(CandidateSet, Option<(f64, usize)>)> {
        let tapas = &self.cfg.tapas;
        match self.cfg.train.mode {
            LossMode::Full => unreachable!("full softmax draws no negatives"),
            LossMode::Sampled => Ok((
                self.dist
                    .sample_excluding(tapas.n, positives, &mut self.sampling_rng)
                    .with_origin(Origin::Final),
                None,
            )),
            LossMode::Tapas => {
                let presample = self.dist.sample_excluding(
                    tapas.presample_size(),
                    positives,
                    &mut self.sampling_rng,
                );
                let n = tapas.n.min(presample.len());
                if n == presample.len() {
                    return Ok((presample.with_origin(Origin::Final), None));
                }
                let tau = temperature_at(tapas, self.step);
                let emb = &self.model.embeddings;
                match &self.partition {
                    None => Ok((
                        CandidateSet::new(adaptive_top_n(contexts, presample.labels(), emb, n, tau), Origin::Final),
                        None,
                    )),
                    Some(part) => {
                        let scores = candidate_scores(contexts, presample.labels(), emb, tau);
                        let sharded = select_sharded(presample.labels(), &scores, part, n);
                        let exact = CandidateSet::new(select_top_n(presample.labels(), &scores, n), Origin::Final);
                        let recall = recall_vs_exact(&sharded.selected, &exact)?;
                        Ok((sharded.selected, Some((recall, sharded.shortfall))))
                    }
                }
            }
        }
    }

    /// One optimisation step; returns the batch loss (before ℓ2).
    pub fn train_step(&mut self) -> Result<f64> {
        let indices = self.batcher.next_batch(self.cfg.train.batch_size);
        let batch = Batch::from_indices(self.data, &indices);
        let forward = self.model.forward(&batch.inputs)?;
        let (loss, mut grads) = match self.cfg.train.mode {
            LossMode::Full => self.model.loss_grad(&batch, &forward, Candidates::Full, None)?,
            _ => {
                let positives = batch.positives();
                let (negatives, shard_stats) = self.negatives_for(&forward.contexts, &positives)?;
                if let Some((recall, shortfall)) = shard_stats {
                    self.recall_sum += recall;
                    self.shortfall_sum += shortfall as f64;
                }
                let out = self.model.loss_grad(
                    &batch,
                    &forward,
                    Candidates::Sampled(&negatives),
                    self.log_q.as_deref(),
                )?;
                if self.record_negatives {
                    self.negatives.push(negatives.into_labels());
                }
                out
            }
        };
        self.model.add_l2(&mut grads, self.cfg.train.lambda);
        self.opt.step(&mut self.model, &grads);
        self.step += 1;
        self.loss_sum += loss;
        self.since_eval += 1;
        Ok(loss)
    }

    /// Full-vocabulary metrics plus averages of the training diagnostics
    /// accumulated since the previous call.
    pub fn evaluate(&mut self, eval_set: &Dataset) -> Result<BTreeMap<String, f64>> {
        let mut metrics = eval_model(&self.model, eval_set, &self.cfg.train.eval_ks, self.cfg.train.map_variant)?;
        if self.since_eval > 0 {
            let k = self.since_eval as f64;
            metrics.insert(TRAIN_LOSS.into(), self.loss_sum / k);
            if self.partition.is_some() {
                metrics.insert(SHARD_RECALL.into(), self.recall_sum / k);
                metrics.insert(SHARD_SHORTFALL.into(), self.shortfall_sum / k);
            }
        }
        self.loss_sum = 0.0;
        self.recall_sum = 0.0;
        self.shortfall_sum = 0.0;
        self.since_eval = 0;
        Ok(metrics)
    }

    pub fn run(mut self, eval_set: &Dataset) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut train_seconds = 0.0;
        let mut series = MetricSeries::new();
        let record = |step: u64, train_seconds: f64, metrics| MetricRecord {
            step,
            wall_seconds: start.elapsed().as_secs_f64(),
            steps_per_sec: if train_seconds > 0.0 { step as f64 / train_seconds } else { 0.0 },
            metrics,
        };
        let metrics = self.evaluate(eval_set)?;
        series.push(record(0, 0.0, metrics))?;
        let steps = self.cfg.train.steps;
        let every = self.cfg.train.eval_every;
        for t in 1..=steps {
            let tick = Instant::now();
            self.train_step()?;
            train_seconds += tick.elapsed().as_secs_f64();
            if t % every == 0 || t == steps {
                let metrics = self.evaluate(eval_set)?;
                series.push(record(t, train_seconds, metrics))?;
            }
        }
        Ok(TrainOutcome {
            series,
            model: self.model,
            negatives: self.negatives,
            train_seconds,
        })
    }
}

pub fn run_training(cfg: &RunConfig, train: &Dataset, eval_set: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(cfg, train)?.run(eval_set)
}
