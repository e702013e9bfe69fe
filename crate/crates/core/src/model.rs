//! Softmax models `Prob[y|x] ∝ exp(φ(x)·ψ(y) + b_y)` with hand-derived
//! gradients for the full and the sampled loss.
//!
//! For one example with candidate set `C` (all of `[V]` for the full loss):
//!
//! * `∇φ(x) = -ψ(y) + Σ_{z∈C} p_z ψ(z)`
//! * `∇ψ(z) = (p_z - δ_{yz}) φ(x)` and `∇b_z = p_z - δ_{yz}`
//!
//! Batch gradients are the mean over examples, then backpropagated through
//! the context encoder.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data_synth::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{self, axpy, dot_unchecked, Mat, Rng};
use crate::tapas::CandidateSet;

const CKPT_MAGIC: &str = "TAPASCKPT";
const CKPT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub enum ContextEncoder {
    /// `φ(x) = x`; together with label biases this is a plain linear
    /// softmax classifier.
    Identity { dim: usize },
    Linear { weight: Mat, bias: Vec<f64> },
    Mlp {
        w1: Mat,
        b1: Vec<f64>,
        w2: Mat,
        b2: Vec<f64>,
    },
}

/// Architecture selector used by configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Identity,
    Linear,
    Mlp,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Identity => "identity",
            EncoderKind::Linear => "linear",
            EncoderKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EncoderKind::Identity),
            "linear" => Ok(EncoderKind::Linear),
            "mlp" => Ok(EncoderKind::Mlp),
            other => Err(Error::InvalidArgument(format!("unknown encoder {other:?}"))),
        }
    }
}

impl ContextEncoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            ContextEncoder::Identity { .. } => EncoderKind::Identity,
            ContextEncoder::Linear { .. } => EncoderKind::Linear,
            ContextEncoder::Mlp { .. } => EncoderKind::Mlp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ContextEncoder::Identity { dim } => *dim,
            ContextEncoder::Linear { weight, .. } => weight.cols(),
            ContextEncoder::Mlp { w1, .. } => w1.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ContextEncoder::Identity { dim } => *dim,
            ContextEncoder::Linear { weight, .. } => weight.rows(),
            ContextEncoder::Mlp { w2, .. } => w2.rows(),
        }
    }

    /// Weights `N(0, std^2)`, biases zero.
    pub fn init(
        kind: EncoderKind,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Identity => {
                if input_dim != output_dim {
                    return Err(Error::Shape(format!(
                        "identity encoder needs equal dims, got {input_dim} -> {output_dim}"
                    )));
                }
                ContextEncoder::Identity { dim: input_dim }
            }
            EncoderKind::Linear => ContextEncoder::Linear {
                weight: Mat::gaussian(output_dim, input_dim, std, rng),
                bias: vec![0.0; output_dim],
            },
            EncoderKind::Mlp => ContextEncoder::Mlp {
                w1: Mat::gaussian(hidden, input_dim, std, rng),
                b1: vec![0.0; hidden],
                w2: Mat::gaussian(output_dim, hidden, std, rng),
                b2: vec![0.0; output_dim],
            },
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out, None);
        Ok(out)
    }

    fn encode_into(&self, x: &[f64], out: &mut [f64], hidden_pre: Option<&mut [f64]>) {
        match self {
            ContextEncoder::Identity { .. } => out.copy_from_slice(x),
            ContextEncoder::Linear { weight, bias } => {
                for ((o, row), b) in out.iter_mut().zip(weight.iter_rows()).zip(bias) {
                    *o = dot_unchecked(row, x) + b;
                }
            }
            ContextEncoder::Mlp { w1, b1, w2, b2 } => {
                let pre: Vec<f64> = w1
                    .iter_rows()
                    .zip(b1)
                    .map(|(row, b)| dot_unchecked(row, x) + b)
                    .collect();
                let act = numerics::relu(&pre);
                for ((o, row), b) in out.iter_mut().zip(w2.iter_rows()).zip(b2) {
                    *o = dot_unchecked(row, &act) + b;
                }
                if let Some(h) = hidden_pre {
                    h.copy_from_slice(&pre);
                }
            }
        }
    }

    /// Named parameter tensors as `(name, rows, cols, values)`.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        match self {
            ContextEncoder::Identity { .. } => Vec::new(),
            ContextEncoder::Linear { weight, bias } => vec![
                ("enc.weight", weight.rows(), weight.cols(), weight.as_slice()),
                ("enc.bias", 1, bias.len(), bias.as_slice()),
            ],
            ContextEncoder::Mlp { w1, b1, w2, b2 } => vec![
                ("enc.w1", w1.rows(), w1.cols(), w1.as_slice()),
                ("enc.b1", 1, b1.len(), b1.as_slice()),
                ("enc.w2", w2.rows(), w2.cols(), w2.as_slice()),
                ("enc.b2", 1, b2.len(), b2.as_slice()),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ContextEncoder::Identity { .. } => Vec::new(),
            ContextEncoder::Linear { weight, bias } => {
                vec![weight.as_mut_slice(), bias.as_mut_slice()]
            }
            ContextEncoder::Mlp { w1, b1, w2, b2 } => vec![
                w1.as_mut_slice(),
                b1.as_mut_slice(),
                w2.as_mut_slice(),
                b2.as_mut_slice(),
            ],
        }
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors()
            .iter()
            .map(|(_, _, _, v)| vec![0.0; v.len()])
            .collect()
    }

    /// Accumulates encoder gradients for one example given `dφ`.
    fn backward(&self, x: &[f64], hidden_pre: &[f64], d_out: &[f64], grads: &mut [Vec<f64>]) {
        match self {
            ContextEncoder::Identity { .. } => {}
            ContextEncoder::Linear { weight, .. } => {
                let cols = weight.cols();
                let (gw, gb) = grads.split_at_mut(1);
                for (j, &g) in d_out.iter().enumerate() {
                    axpy(g, x, &mut gw[0][j * cols..(j + 1) * cols]);
                    gb[0][j] += g;
                }
            }
            ContextEncoder::Mlp { w2, .. } => {
                let hidden = w2.cols();
                let in_dim = x.len();
                let act = numerics::relu(hidden_pre);
                let mut d_act = vec![0.0; hidden];
                {
                    let (head, tail) = grads.split_at_mut(2);
                    let (gw2, gb2) = tail.split_at_mut(1);
                    for (j, &g) in d_out.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        axpy(g, &act, &mut gw2[0][j * hidden..(j + 1) * hidden]);
                        gb2[0][j] += g;
                        axpy(g, w2.row(j), &mut d_act);
                    }
                    let (gw1, gb1) = head.split_at_mut(1);
                    for (h, (&da, &pre)) in d_act.iter().zip(hidden_pre).enumerate() {
                        if pre > 0.0 && da != 0.0 {
                            axpy(da, x, &mut gw1[0][h * in_dim..(h + 1) * in_dim]);
                            gb1[0][h] += da;
                        }
                    }
                }
            }
        }
    }

    fn hidden_width(&self) -> usize {
        match self {
            ContextEncoder::Mlp { w1, .. } => w1.rows(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    table: Mat,
    bias: Option<Vec<f64>>,
}

impl LabelEmbeddingTable {
    pub fn new(table: Mat, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != table.rows() {
                return Err(Error::Shape(format!(
                    "{} biases for {} labels",
                    b.len(),
                    table.rows()
                )));
            }
        }
        if !table.is_finite() {
            return Err(Error::InvalidArgument("non-finite embedding".into()));
        }
        Ok(LabelEmbeddingTable { table, bias })
    }

    pub fn init(vocab: usize, dim: usize, with_bias: bool, std: f64, rng: &mut Rng) -> Self {
        LabelEmbeddingTable {
            table: Mat::gaussian(vocab, dim, std, rng),
            bias: with_bias.then(|| vec![0.0; vocab]),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Mat {
        &self.table
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn row(&self, label: u32) -> &[f64] {
        self.table.row(label as usize)
    }

    #[inline]
    pub fn label_bias(&self, label: u32) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b[label as usize])
    }

    /// Logit `φ·ψ(y) + b_y`.
    #[inline]
    pub fn logit(&self, context: &[f64], label: u32) -> f64 {
        dot_unchecked(context, self.row(label)) + self.label_bias(label)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Mat, Option<&mut Vec<f64>>) {
        (&mut self.table, self.bias.as_mut())
    }
}

/// Gradients for the encoder (dense, in `ContextEncoder::tensors` order)
/// and for the touched embedding rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub encoder: Vec<Vec<f64>>,
    /// Ascending, distinct.
    pub labels: Vec<u32>,
    /// One row per entry of `labels`.
    pub rows: Mat,
    pub bias: Option<Vec<f64>>,
}

impl GradientBundle {
    pub fn row_for(&self, label: u32) -> Option<&[f64]> {
        self.labels
            .binary_search(&label)
            .ok()
            .map(|i| self.rows.row(i))
    }
}

/// Contiguous copy of a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Mat,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Self {
        let d = ds.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(ds.x(i));
        }
        Batch {
            inputs: Mat::from_vec(indices.len(), d, data).unwrap(),
            labels: indices.iter().map(|&i| ds.y(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct positives, ascending.
    pub fn positives(&self) -> Vec<u32> {
        let mut p = self.labels.clone();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Encoded batch plus what backprop needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub contexts: Mat,
    hidden_pre: Mat,
}

/// Which labels the softmax normalises over.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    Full,
    /// Batch positives plus these negatives.
    Sampled(&'a CandidateSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: ContextEncoder,
    pub embeddings: LabelEmbeddingTable,
}

impl Model {
    pub fn new(encoder: ContextEncoder, embeddings: LabelEmbeddingTable) -> Result<Self> {
        if encoder.output_dim() != embeddings.dim() {
            return Err(Error::Shape(format!(
                "encoder emits {} dims, embeddings have {}",
                encoder.output_dim(),
                embeddings.dim()
            )));
        }
        Ok(Model {
            encoder,
            embeddings,
        })
    }

    /// Identity-encoder linear classifier from Bayes weights and biases.
    pub fn linear_from_params(weights: Mat, bias: Vec<f64>) -> Result<Self> {
        let dim = weights.cols();
        Model::new(
            ContextEncoder::Identity { dim },
            LabelEmbeddingTable::new(weights, Some(bias))?,
        )
    }

    pub fn vocab(&self) -> usize {
        self.embeddings.vocab()
    }

    pub fn forward(&self, inputs: &Mat) -> Result<Forward> {
        if inputs.cols() != self.encoder.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects {} inputs, batch has {}",
                self.encoder.input_dim(),
                inputs.cols()
            )));
        }
        let b = inputs.rows();
        let mut contexts = Mat::zeros(b, self.encoder.output_dim());
        let mut hidden_pre = Mat::zeros(b, self.encoder.hidden_width());
        for i in 0..b {
            let h = (hidden_pre.cols() > 0).then(|| hidden_pre.row_mut(i));
            self.encoder
                .encode_into(inputs.row(i), contexts.row_mut(i), h);
        }
        Ok(Forward {
            contexts,
            hidden_pre,
        })
    }

    /// Mean cross-entropy of `batch` and its gradients.
    ///
    /// `logit_offset`, when given, is subtracted from each candidate's logit
    /// (used for the optional `log q` correction of plain sampled softmax).
    pub fn loss_grad(
        &self,
        batch: &Batch,
        forward: &Forward,
        candidates: Candidates<'_>,
        logit_offset: Option<&[f64]>,
    ) -> Result<(f64, GradientBundle)> {
        let vocab = self.vocab();
        if let Some(&label) = batch.labels.iter().find(|&&y| y as usize >= vocab) {
            return Err(Error::LabelOutOfRange { label, vocab });
        }
        let labels: Vec<u32> = match candidates {
            Candidates::Full => (0..vocab as u32).collect(),
            Candidates::Sampled(negatives) => {
                let positives = batch.positives();
                for &z in negatives.labels() {
                    if positives.binary_search(&z).is_ok() {
                        return Err(Error::NegativeOverlapsPositive(z));
                    }
                }
                let mut all = positives;
                all.extend_from_slice(negatives.labels());
                all.sort_unstable();
                all
            }
        };
        Ok(self.loss_grad_over(batch, forward, labels, logit_offset))
    }

    fn loss_grad_over(
        &self,
        batch: &Batch,
        forward: &Forward,
        labels: Vec<u32>,
        logit_offset: Option<&[f64]>,
    ) -> (f64, GradientBundle) {
        let d = self.embeddings.dim();
        let b = batch.len();
        let inv_b = 1.0 / b as f64;
        let emb = &self.embeddings;
        let mut rows = Mat::zeros(labels.len(), d);
        let mut bias_grad = emb.bias.as_ref().map(|_| vec![0.0; labels.len()]);
        let mut encoder_grads = self.encoder.zero_grads();
        let mut logits = vec![0.0; labels.len()];
        let mut d_context = vec![0.0; d];
        let mut total = 0.0;

        for i in 0..b {
            let phi = forward.contexts.row(i);
            let y = batch.labels[i];
            let y_pos = labels.binary_search(&y).expect("positive in candidate set");
            for (s, &z) in logits.iter_mut().zip(&labels) {
                *s = emb.logit(phi, z) - logit_offset.map_or(0.0, |o| o[z as usize]);
            }
            let lse = numerics::log_sum_exp_unchecked(&logits);
            total += lse - logits[y_pos];

            d_context.iter_mut().for_each(|v| *v = 0.0);
            for (k, (&s, &z)) in logits.iter().zip(&labels).enumerate() {
                let p = (s - lse).exp();
                let coef = if k == y_pos { p - 1.0 } else { p };
                if coef == 0.0 {
                    continue;
                }
                axpy(coef * inv_b, emb.row(z), &mut d_context);
                axpy(coef * inv_b, phi, rows.row_mut(k));
                if let Some(bg) = bias_grad.as_mut() {
                    bg[k] += coef * inv_b;
                }
            }
            let hidden = if forward.hidden_pre.cols() > 0 {
                forward.hidden_pre.row(i)
            } else {
                &[]
            };
            self.encoder
                .backward(batch.inputs.row(i), hidden, &d_context, &mut encoder_grads);
        }

        (
            total * inv_b,
            GradientBundle {
                encoder: encoder_grads,
                labels,
                rows,
                bias: bias_grad,
            },
        )
    }

    pub fn full_softmax_loss_grad(&self, batch: &Batch) -> Result<(f64, GradientBundle)> {
        let fwd = self.forward(&batch.inputs)?;
        self.loss_grad(batch, &fwd, Candidates::Full, None)
    }

    pub fn sampled_softmax_loss_grad(
        &self,
        batch: &Batch,
        negatives: &CandidateSet,
    ) -> Result<(f64, GradientBundle)> {
        let fwd = self.forward(&batch.inputs)?;
        self.loss_grad(batch, &fwd, Candidates::Sampled(negatives), None)
    }

    /// Adds `(λ/2)|θ|²` over the encoder and the touched embedding rows
    /// (including their biases) to `grads`; returns the penalty.
    pub fn add_l2(&self, grads: &mut GradientBundle, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let mut penalty = 0.0;
        for ((_, _, _, theta), g) in self.encoder.tensors().into_iter().zip(&mut grads.encoder) {
            let (p, dg) = l2_penalty_grad(theta, lambda);
            penalty += p;
            axpy(1.0, &dg, g);
        }
        for (k, &z) in grads.labels.iter().enumerate() {
            let (p, dg) = l2_penalty_grad(self.embeddings.row(z), lambda);
            penalty += p;
            axpy(1.0, &dg, grads.rows.row_mut(k));
            if let Some(bg) = grads.bias.as_mut() {
                let bz = self.embeddings.label_bias(z);
                penalty += 0.5 * lambda * bz * bz;
                bg[k] += lambda * bz;
            }
        }
        penalty
    }

    pub fn logits(&self, context: &[f64]) -> Vec<f64> {
        let emb = &self.embeddings;
        match emb.bias() {
            Some(b) => emb
                .table
                .iter_rows()
                .zip(b)
                .map(|(row, bz)| dot_unchecked(context, row) + bz)
                .collect(),
            None => emb
                .table
                .iter_rows()
                .map(|row| dot_unchecked(context, row))
                .collect(),
        }
    }

    /// Top `k` labels by descending logit, ties to the smaller id.
    pub fn top_k_predict(&self, x: &[f64], k: usize) -> Result<Vec<u32>> {
        if k == 0 || k > self.vocab() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.vocab()
            )));
        }
        let context = self.encoder.encode(x)?;
        Ok(top_k_of(&self.logits(&context), k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Text header (magic, encoder kind, shape table) followed by the raw
    /// little-endian `f64` payload of every tensor in table order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = self.encoder.tensors();
        let emb = &self.embeddings;
        tensors.push(("emb.table", emb.vocab(), emb.dim(), emb.table.as_slice()));
        if let Some(b) = emb.bias() {
            tensors.push(("emb.bias", 1, b.len(), b));
        }
        let mut out = Vec::new();
        let _ = writeln!(out, "{CKPT_MAGIC} {CKPT_VERSION}");
        let _ = writeln!(out, "encoder {} {}", self.encoder.kind().name(), self.encoder.input_dim());
        let _ = writeln!(out, "tensors {}", tensors.len());
        for (name, r, c, _) in &tensors {
            let _ = writeln!(out, "{name} {r} {c}");
        }
        for (_, _, _, values) in &tensors {
            for v in *values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::MalformedHeader("unterminated checkpoint header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::MalformedHeader("header is not utf-8".into()))
        };
        let magic: Vec<&str> = next_line()?.split_whitespace().collect();
        if magic.first() != Some(&CKPT_MAGIC) {
            return Err(Error::MalformedHeader("not a checkpoint".into()));
        }
        if magic.get(1) != Some(&CKPT_VERSION) {
            return Err(Error::VersionMismatch(magic.get(1).unwrap_or(&"").to_string()));
        }
        let enc_line: Vec<String> = next_line()?.split_whitespace().map(String::from).collect();
        if enc_line.len() != 3 || enc_line[0] != "encoder" {
            return Err(Error::MalformedHeader("bad encoder line".into()));
        }
        let kind = EncoderKind::parse(&enc_line[1])?;
        let input_dim: usize = enc_line[2]
            .parse()
            .map_err(|_| Error::MalformedHeader("bad encoder input dim".into()))?;
        let count_line: Vec<String> = next_line()?.split_whitespace().map(String::from).collect();
        let count: usize = match count_line.as_slice() {
            [t, n] if t == "tensors" => n
                .parse()
                .map_err(|_| Error::MalformedHeader("bad tensor count".into()))?,
            _ => return Err(Error::MalformedHeader("bad tensors line".into())),
        };
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let parts: Vec<String> = next_line()?.split_whitespace().map(String::from).collect();
            if parts.len() != 3 {
                return Err(Error::MalformedHeader("bad shape line".into()));
            }
            let r: usize = parts[1]
                .parse()
                .map_err(|_| Error::MalformedHeader("bad rows".into()))?;
            let c: usize = parts[2]
                .parse()
                .map_err(|_| Error::MalformedHeader("bad cols".into()))?;
            shapes.push((parts[0].clone(), r, c));
        }
        let mut payload = &bytes[pos..];
        let mut tensors = std::collections::BTreeMap::new();
        for (name, r, c) in shapes {
            let n = r * c * 8;
            if payload.len() < n {
                return Err(Error::Truncated(format!("tensor {name}")));
            }
            let values: Vec<f64> = payload[..n]
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            payload = &payload[n..];
            tensors.insert(name, Mat::from_vec(r, c, values)?);
        }
        if !payload.is_empty() {
            return Err(Error::MalformedHeader("trailing checkpoint bytes".into()));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::MalformedHeader(format!("missing tensor {name}")))
        };
        let encoder = match kind {
            EncoderKind::Identity => ContextEncoder::Identity { dim: input_dim },
            EncoderKind::Linear => ContextEncoder::Linear {
                weight: take("enc.weight")?,
                bias: take("enc.bias")?.into_vec(),
            },
            EncoderKind::Mlp => ContextEncoder::Mlp {
                w1: take("enc.w1")?,
                b1: take("enc.b1")?.into_vec(),
                w2: take("enc.w2")?,
                b2: take("enc.b2")?.into_vec(),
            },
        };
        let table = take("emb.table")?;
        let bias = take("emb.bias").ok().map(Mat::into_vec);
        Model::new(encoder, LabelEmbeddingTable::new(table, bias)?)
    }
}

/// `(λ/2)|θ|²` and its gradient `λθ`.
pub fn l2_penalty_grad(theta: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let penalty = 0.5 * lambda * dot_unchecked(theta, theta);
    (penalty, theta.iter().map(|t| lambda * t).collect())
}

/// Indices of the `k` largest scores, best first, ties to the smaller index.
pub fn top_k_of(scores: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tapas::Origin;

    fn random_model(kind: EncoderKind, vocab: usize, d_in: usize, d: usize, bias: bool, seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        let encoder = ContextEncoder::init(kind, d_in, 6, d, 0.7, &mut rng).unwrap();
        let mut emb = LabelEmbeddingTable::init(vocab, d, bias, 0.7, &mut rng);
        if let Some(b) = emb.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        }
        Model::new(encoder, emb).unwrap()
    }

    fn random_batch(vocab: usize, d_in: usize, b: usize, seed: u64) -> Batch {
        let mut rng = Rng::new(seed);
        Batch {
            inputs: Mat::gaussian(b, d_in, 1.0, &mut rng),
            labels: (0..b).map(|_| rng.below(vocab) as u32).collect(),
        }
    }

    #[test]
    fn encode_examples() {
        let id = ContextEncoder::Linear {
            weight: Mat::identity(3),
            bias: vec![0.0; 3],
        };
        assert_eq!(id.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let zero = ContextEncoder::Linear {
            weight: Mat::zeros(2, 3),
            bias: vec![0.0; 2],
        };
        assert_eq!(zero.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(zero.encode(&[1.0]).is_err());

        // hidden pre = [1*1 + 2*(-1), 3*1 + (-1)*(-1)] + [0.5, 0] = [-0.5, 4]
        // relu = [0, 4]; out = [2*0 + 1*4 + 1, -1*0 + 0.5*4] = [5, 2]
        let mlp = ContextEncoder::Mlp {
            w1: Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap(),
            b1: vec![0.5, 0.0],
            w2: Mat::from_rows(&[vec![2.0, 1.0], vec![-1.0, 0.5]]).unwrap(),
            b2: vec![1.0, 0.0],
        };
        assert_eq!(mlp.encode(&[1.0, -1.0]).unwrap(), vec![5.0, 2.0]);
    }

    #[test]
    fn single_label_loss_is_zero() {
        let m = random_model(EncoderKind::Linear, 1, 3, 2, true, 1);
        let batch = random_batch(1, 3, 4, 2);
        let (loss, g) = m.full_softmax_loss_grad(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.encoder.iter().flatten().all(|v| *v == 0.0));
        assert!(g.rows.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equal_logits_give_log_two() {
        let m = Model::new(
            ContextEncoder::Identity { dim: 2 },
            LabelEmbeddingTable::new(Mat::zeros(2, 2), None).unwrap(),
        )
        .unwrap();
        let batch = Batch {
            inputs: Mat::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            labels: vec![0],
        };
        let (loss, _) = m.full_softmax_loss_grad(&batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sampled_with_all_negatives_equals_full() {
        let m = random_model(EncoderKind::Mlp, 12, 4, 3, true, 3);
        let batch = random_batch(12, 4, 5, 4);
        let pos = batch.positives();
        let negs: Vec<u32> = (0..12).filter(|z| !pos.contains(z)).collect();
        let negs = CandidateSet::new(negs, Origin::Final);
        let (lf, gf) = m.full_softmax_loss_grad(&batch).unwrap();
        let (ls, gs) = m.sampled_softmax_loss_grad(&batch, &negs).unwrap();
        assert!((lf - ls).abs() <= 1e-10);
        assert_eq!(gf.labels, gs.labels);
        for (a, b) in gf.rows.as_slice().iter().zip(gs.rows.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_negatives_single_positive() {
        let m = random_model(EncoderKind::Linear, 5, 3, 3, false, 5);
        let batch = Batch {
            inputs: Mat::from_rows(&[vec![0.2, -0.1, 0.4], vec![1.0, 0.0, 1.0]]).unwrap(),
            labels: vec![3, 3],
        };
        let empty = CandidateSet::new(Vec::new(), Origin::Final);
        let (loss, g) = m.sampled_softmax_loss_grad(&batch, &empty).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.labels, vec![3]);
    }

    #[test]
    fn overlapping_negatives_rejected() {
        let m = random_model(EncoderKind::Linear, 5, 3, 3, false, 5);
        let batch = random_batch(5, 3, 2, 6);
        let negs = CandidateSet::new(vec![batch.labels[0]], Origin::Final);
        assert!(matches!(
            m.sampled_softmax_loss_grad(&batch, &negs),
            Err(Error::NegativeOverlapsPositive(_))
        ));
    }

    #[test]
    fn logit_shift_invariance() {
        // A shared label bias shift moves every logit by the same constant.
        let m = random_model(EncoderKind::Mlp, 8, 3, 4, true, 7);
        let mut shifted = m.clone();
        shifted
            .embeddings
            .bias
            .as_mut()
            .unwrap()
            .iter_mut()
            .for_each(|b| *b += 3.7);
        let batch = random_batch(8, 3, 4, 8);
        let (l1, g1) = m.full_softmax_loss_grad(&batch).unwrap();
        let (l2, g2) = shifted.full_softmax_loss_grad(&batch).unwrap();
        assert!((l1 - l2).abs() <= 1e-10);
        for (a, b) in g1.encoder.iter().flatten().zip(g2.encoder.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10);
        }
        for (a, b) in g1.rows.as_slice().iter().zip(g2.rows.as_slice()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn sparse_rows_only_for_candidates() {
        let m = random_model(EncoderKind::Linear, 30, 3, 3, true, 9);
        let batch = Batch {
            inputs: Mat::from_rows(&[vec![0.2, -0.1, 0.4]]).unwrap(),
            labels: vec![7],
        };
        let negs = CandidateSet::new(vec![2, 19, 25], Origin::Final);
        let (_, g) = m.sampled_softmax_loss_grad(&batch, &negs).unwrap();
        assert_eq!(g.labels, vec![2, 7, 19, 25]);
        assert!(g.row_for(3).is_none());
        assert_eq!(g.rows.rows(), 4);
    }

    #[test]
    fn l2_examples() {
        let (p, g) = l2_penalty_grad(&[3.0, 4.0], 0.0);
        assert_eq!((p, g), (0.0, vec![0.0, 0.0]));
        let (p, g) = l2_penalty_grad(&[3.0, 4.0], 0.001);
        assert!((p - 0.0125).abs() < 1e-15);
        assert!((g[0] - 0.003).abs() < 1e-15 && (g[1] - 0.004).abs() < 1e-15);
        let (p2, g2) = l2_penalty_grad(&[3.0, 4.0], 0.002);
        assert!((p2 - 2.0 * p).abs() < 1e-15);
        assert!((g2[1] - 2.0 * g[1]).abs() < 1e-15);
    }

    #[test]
    fn top_k_examples() {
        let m = Model::new(
            ContextEncoder::Identity { dim: 1 },
            LabelEmbeddingTable::new(Mat::from_rows(&[vec![1.0], vec![3.0], vec![2.0]]).unwrap(), None)
                .unwrap(),
        )
        .unwrap();
        assert_eq!(m.top_k_predict(&[1.0], 2).unwrap(), vec![1, 2]);
        let mut all = m.top_k_predict(&[1.0], 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert_eq!(top_k_of(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert!(m.top_k_predict(&[1.0], 0).is_err());
        assert!(m.top_k_predict(&[1.0], 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in [EncoderKind::Identity, EncoderKind::Linear, EncoderKind::Mlp] {
            let m = random_model(kind, 7, 4, 4, kind == EncoderKind::Identity, 10);
            let back = Model::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
        }
        let m = random_model(EncoderKind::Mlp, 7, 4, 4, false, 10);
        let bytes = m.to_bytes();
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }
}
