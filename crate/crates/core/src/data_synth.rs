//! Synthetic classification benchmarks: a Gaussian mixture whose posterior is
//! exactly a linear softmax, and a mixture pushed through a fixed random
//! two-layer ReLU network. Also the on-disk dataset container.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{self, stream, Mat, Rng};

const DATASET_MAGIC: &str = "TAPASDS";
const DATASET_VERSION: &str = "v1";

/// Child streams of `stream::EXAMPLES` for the two data splits.
pub const TRAIN_SPLIT: u64 = 0;
pub const TEST_SPLIT: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Mat,
    labels: Vec<u32>,
    vocab: usize,
    label_frequencies: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<u32>, vocab: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y as usize >= vocab) {
            return Err(Error::LabelOutOfRange { label, vocab });
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        let label_frequencies = frequencies(&labels, vocab);
        Ok(Dataset {
            features,
            labels,
            vocab,
            label_frequencies,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_frequencies(&self) -> &[f64] {
        &self.label_frequencies
    }

    /// The first `count` examples (or all of them). Frequencies are recomputed.
    pub fn head(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        let d = self.dim();
        let features =
            Mat::from_vec(count, d, self.features.as_slice()[..count * d].to_vec()).unwrap();
        let labels = self.labels[..count].to_vec();
        let label_frequencies = frequencies(&labels, self.vocab);
        Dataset {
            features,
            labels,
            vocab: self.vocab,
            label_frequencies,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Header line `TAPASDS v1 V d count\n`, then little-endian `u32`
    /// labels, `f64` features (row-major) and the `f64` frequency table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{DATASET_MAGIC} {DATASET_VERSION} {} {} {}\n",
            self.vocab,
            self.dim(),
            self.len()
        );
        let mut out = Vec::with_capacity(
            header.len() + self.len() * (4 + 8 * self.dim()) + 8 * self.vocab,
        );
        out.extend_from_slice(header.as_bytes());
        for &y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        for &v in self.features.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &f in &self.label_frequencies {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::MalformedHeader("header is not utf-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&DATASET_MAGIC) {
            return Err(Error::MalformedHeader(format!("bad magic in {header:?}")));
        }
        if fields.get(1) != Some(&DATASET_VERSION) {
            return Err(Error::VersionMismatch(
                fields.get(1).unwrap_or(&"").to_string(),
            ));
        }
        if fields.len() != 5 {
            return Err(Error::MalformedHeader(format!(
                "expected 5 header fields, got {}",
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("bad {what} {s:?}")))
        };
        let vocab = parse(fields[2], "V")?;
        let dim = parse(fields[3], "d")?;
        let count = parse(fields[4], "count")?;
        if count == 0 {
            return Err(Error::Truncated("file holds no examples".into()));
        }
        let payload = &bytes[newline + 1..];
        let expected = count
            .checked_mul(4 + 8 * dim)
            .and_then(|n| n.checked_add(8 * vocab))
            .ok_or_else(|| Error::MalformedHeader("sizes overflow".into()))?;
        if payload.len() < expected {
            return Err(Error::Truncated(format!(
                "expected {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let (label_bytes, rest) = payload.split_at(4 * count);
        let (feature_bytes, freq_bytes) = rest.split_at(8 * count * dim);
        let labels: Vec<u32> = label_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(&label) = labels.iter().find(|&&y| y as usize >= vocab) {
            return Err(Error::LabelOutOfRange { label, vocab });
        }
        let read_f64s = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let features = Mat::from_vec(count, dim, read_f64s(feature_bytes))?;
        let label_frequencies = read_f64s(freq_bytes);
        Ok(Dataset {
            features,
            labels,
            vocab,
            label_frequencies,
        })
    }
}

fn frequencies(labels: &[u32], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0u64; vocab];
    for &y in labels {
        counts[y as usize] += 1;
    }
    let n = labels.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureSpec {
    pub vocab: usize,
    pub dim: usize,
    /// Centroids are drawn from `N(0, (c^2/d) I)`.
    pub centroid_scale: f64,
    pub seed: u64,
}

impl GaussianMixtureSpec {
    fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidArgument("V must be at least 2".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidArgument("d must be at least 1".into()));
        }
        if !(self.centroid_scale > 0.0) {
            return Err(Error::InvalidArgument("c must be positive".into()));
        }
        Ok(())
    }
}

fn draw_centroids(vocab: usize, dim: usize, scale: f64, rng: &mut Rng) -> Mat {
    Mat::gaussian(vocab, dim, scale / (dim as f64).sqrt(), rng)
}

/// Example `i` of a split is drawn from its own child stream, so generation
/// parallelises without changing the output.
fn gen_examples<F>(count: usize, dim: usize, base: &Rng, vocab: usize, point: F) -> (Mat, Vec<u32>)
where
    F: Fn(u32, &mut Rng, &mut [f64]) + Sync,
{
    let rows: Vec<(u32, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.split(i as u64);
            let y = rng.below(vocab) as u32;
            let mut x = vec![0.0; dim];
            point(y, &mut rng, &mut x);
            (y, x)
        })
        .collect();
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (y, x) in rows {
        labels.push(y);
        data.extend_from_slice(&x);
    }
    (Mat::from_vec(count, dim, data).unwrap(), labels)
}

/// Gaussian mixture with unit-variance components around random centroids.
#[derive(Debug, Clone)]
pub struct LinearGenerator {
    spec: GaussianMixtureSpec,
    centroids: Mat,
}

impl LinearGenerator {
    pub fn new(spec: GaussianMixtureSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed).split(stream::DATA);
        let centroids = draw_centroids(spec.vocab, spec.dim, spec.centroid_scale, &mut rng);
        Ok(LinearGenerator { spec, centroids })
    }

    pub fn centroids(&self) -> &Mat {
        &self.centroids
    }

    pub fn sample(&self, count: usize, split: u64) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::InvalidArgument("count must be positive".into()));
        }
        let base = Rng::new(self.spec.seed).split(stream::EXAMPLES).split(split);
        let centroids = &self.centroids;
        let (features, labels) =
            gen_examples(count, self.spec.dim, &base, self.spec.vocab, |y, rng, x| {
                for (xi, mu) in x.iter_mut().zip(centroids.row(y as usize)) {
                    *xi = mu + rng.normal();
                }
            });
        Dataset::new(features, labels, self.spec.vocab)
    }
}

/// Training split of the Gaussian-mixture benchmark plus its centroids.
pub fn gen_linear_dataset(spec: &GaussianMixtureSpec, count: usize) -> Result<(Dataset, Mat)> {
    let gen = LinearGenerator::new(spec.clone())?;
    let ds = gen.sample(count, TRAIN_SPLIT)?;
    Ok((ds, gen.centroids.clone()))
}

/// Closed-form posterior of the mixture: `w_j = mu_j / sigma^2`,
/// `b_j = -|mu_j|^2 / (2 sigma^2)`.
pub fn bayes_linear_params(centroids: &Mat, sigma: f64) -> Result<(Mat, Vec<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let var = sigma * sigma;
    let mut w = centroids.clone();
    w.as_mut_slice().iter_mut().for_each(|v| *v /= var);
    let b = centroids
        .iter_rows()
        .map(|mu| -numerics::dot_unchecked(mu, mu) / (2.0 * var))
        .collect();
    Ok((w, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearGenSpec {
    pub vocab: usize,
    pub centroid_dim: usize,
    pub noise_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub sigma: f64,
    pub centroid_scale: f64,
    pub seed: u64,
}

impl Default for NonlinearGenSpec {
    fn default() -> Self {
        NonlinearGenSpec {
            vocab: 10_000,
            centroid_dim: 10,
            noise_dim: 10,
            hidden: 50,
            dim: 25,
            sigma: 1.0,
            centroid_scale: 3.0,
            seed: 0,
        }
    }
}

impl NonlinearGenSpec {
    fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidArgument("V must be at least 2".into()));
        }
        if self.centroid_dim == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "d_c, d_h and d must be at least 1".into(),
            ));
        }
        if !(self.sigma > 0.0) || !(self.centroid_scale > 0.0) {
            return Err(Error::InvalidArgument("sigma and c must be positive".into()));
        }
        Ok(())
    }
}

/// Mixture centroids concatenated with Gaussian noise, then mapped through
/// a fixed `Linear(ReLU(Linear(.)))` network with `N(0, 1/fan_in)` weights.
#[derive(Debug, Clone)]
pub struct NonlinearGenerator {
    spec: NonlinearGenSpec,
    centroids: Mat,
    w1: Mat,
    w2: Mat,
}

impl NonlinearGenerator {
    pub fn new(spec: NonlinearGenSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed).split(stream::DATA);
        let centroids =
            draw_centroids(spec.vocab, spec.centroid_dim, spec.centroid_scale, &mut rng);
        let fan_in = spec.centroid_dim + spec.noise_dim;
        let w1 = Mat::gaussian(spec.hidden, fan_in, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        let w2 = Mat::gaussian(spec.dim, spec.hidden, 1.0 / (spec.hidden as f64).sqrt(), &mut rng);
        Ok(NonlinearGenerator {
            spec,
            centroids,
            w1,
            w2,
        })
    }

    pub fn centroids(&self) -> &Mat {
        &self.centroids
    }

    /// Forward pass of the generator network on `[mu, z]`.
    pub fn transform(&self, mu: &[f64], z: &[f64], out: &mut [f64]) {
        let input: Vec<f64> = mu.iter().chain(z).copied().collect();
        let hidden = numerics::relu(&self.w1.mul_vec(&input).expect("generator input width"));
        for (o, row) in out.iter_mut().zip(self.w2.iter_rows()) {
            *o = numerics::dot_unchecked(row, &hidden);
        }
    }

    pub fn sample(&self, count: usize, split: u64) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::InvalidArgument("count must be positive".into()));
        }
        let base = Rng::new(self.spec.seed).split(stream::EXAMPLES).split(split);
        let sigma = self.spec.sigma;
        let noise_dim = self.spec.noise_dim;
        let (features, labels) =
            gen_examples(count, self.spec.dim, &base, self.spec.vocab, |y, rng, x| {
                let z: Vec<f64> = (0..noise_dim).map(|_| sigma * rng.normal()).collect();
                self.transform(self.centroids.row(y as usize), &z, x);
            });
        Dataset::new(features, labels, self.spec.vocab)
    }
}

pub fn gen_nonlinear_dataset(spec: &NonlinearGenSpec, count: usize) -> Result<Dataset> {
    NonlinearGenerator::new(spec.clone())?.sample(count, TRAIN_SPLIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_linear() -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            vocab: 10,
            dim: 4,
            centroid_scale: 3.0,
            seed: 11,
        }
    }

    #[test]
    fn linear_is_deterministic() {
        let (a, ca) = gen_linear_dataset(&small_linear(), 500).unwrap();
        let (b, cb) = gen_linear_dataset(&small_linear(), 500).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(gen_linear_dataset(&small_linear(), 0).is_err());
    }

    #[test]
    fn class_means_approach_centroids() {
        let spec = small_linear();
        let count = 20_000;
        let (ds, centroids) = gen_linear_dataset(&spec, count).unwrap();
        let mut sums = Mat::zeros(spec.vocab, spec.dim);
        let mut counts = vec![0usize; spec.vocab];
        for i in 0..ds.len() {
            let y = ds.y(i) as usize;
            counts[y] += 1;
            numerics::axpy(1.0, ds.x(i), sums.row_mut(y));
        }
        let tol = 4.0 / ((count / spec.vocab) as f64).sqrt();
        for j in 0..spec.vocab {
            for k in 0..spec.dim {
                let mean = sums.get(j, k) / counts[j] as f64;
                assert!((mean - centroids.get(j, k)).abs() <= tol);
            }
        }
    }

    #[test]
    fn label_marginal_is_uniform() {
        let spec = GaussianMixtureSpec {
            vocab: 20,
            ..small_linear()
        };
        let count = 100 * spec.vocab * 10;
        let (ds, _) = gen_linear_dataset(&spec, count).unwrap();
        let bound = 5.0 * (1.0 / (spec.vocab * count) as f64).sqrt();
        let sum: f64 = ds.label_frequencies().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for &f in ds.label_frequencies() {
            assert!((f - 1.0 / spec.vocab as f64).abs() <= bound, "{f}");
        }
    }

    #[test]
    fn bayes_params_closed_form() {
        let c = Mat::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let (w, b) = bayes_linear_params(&c, 1.0).unwrap();
        assert_eq!(w.row(0), &[0.0, 0.0]);
        assert_eq!(b[0], 0.0);
        assert_eq!(w.row(1), &[3.0, 4.0]);
        assert_eq!(b[1], -12.5);
        let (w2, b2) = bayes_linear_params(&c, 2f64.sqrt()).unwrap();
        assert!((w2.get(1, 0) - 1.5).abs() < 1e-12 && (w2.get(1, 1) - 2.0).abs() < 1e-12);
        assert!((b2[1] + 6.25).abs() < 1e-12);
        assert!(bayes_linear_params(&c, 0.0).is_err());
    }

    fn small_nonlinear() -> NonlinearGenSpec {
        NonlinearGenSpec {
            vocab: 8,
            centroid_dim: 3,
            noise_dim: 3,
            hidden: 6,
            dim: 4,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn nonlinear_deterministic_in_mu_and_z() {
        let gen = NonlinearGenerator::new(small_nonlinear()).unwrap();
        let mu = gen.centroids().row(2).to_vec();
        let z = vec![0.3, -1.0, 2.0];
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        gen.transform(&mu, &z, &mut a);
        gen.transform(&mu, &z, &mut b);
        assert_eq!(a, b);
        let ds1 = gen_nonlinear_dataset(&small_nonlinear(), 300).unwrap();
        let ds2 = gen_nonlinear_dataset(&small_nonlinear(), 300).unwrap();
        assert_eq!(ds1, ds2);
        assert_eq!(ds1.dim(), 4);
    }

    #[test]
    fn noiseless_classes_collapse() {
        let spec = NonlinearGenSpec {
            noise_dim: 0,
            ..small_nonlinear()
        };
        let ds = gen_nonlinear_dataset(&spec, 200).unwrap();
        let mut first: Vec<Option<Vec<f64>>> = vec![None; spec.vocab];
        for i in 0..ds.len() {
            let y = ds.y(i) as usize;
            match &first[y] {
                None => first[y] = Some(ds.x(i).to_vec()),
                Some(x) => assert_eq!(x.as_slice(), ds.x(i)),
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let (ds, _) = gen_linear_dataset(&small_linear(), 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tds");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn load_errors() {
        let (ds, _) = gen_linear_dataset(&small_linear(), 5).unwrap();
        let bytes = ds.to_bytes();
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;

        let err = Dataset::from_bytes(&bytes[..header_end]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
        let err = Dataset::from_bytes(b"TAPASDS v1 10 4 0\n").unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
        let err = Dataset::from_bytes(b"NOTADS v1 1 1 1\n").unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let err = Dataset::from_bytes(b"TAPASDS v2 1 1 1\n").unwrap_err();
        assert!(matches!(err, Error::VersionMismatch(_)));

        // Shrink V in the header below the largest label present.
        let max_label = *ds.labels().iter().max().unwrap();
        let mut tampered = format!("TAPASDS v1 {} 4 5\n", max_label).into_bytes();
        let payload = &bytes[header_end..];
        tampered.extend_from_slice(&payload[..payload.len() - 8 * (10 - max_label as usize)]);
        let err = Dataset::from_bytes(&tampered).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { .. }), "{err}");
    }
}
