use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{FeloError, Result};
use crate::nn::Tensor;
use crate::rng::{stream_rng, Stream};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Isotropic Gaussian classes around random unit-norm means.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    means: Vec<Vec<f64>>,
    spread: f64,
}

impl BlobGenerator {
    /// Place `n_classes` unit-norm means at pairwise distance ≥ 2·spread by
    /// rejection sampling.
    pub fn new(n_classes: usize, d_in: usize, spread: f64, seed: u64) -> Result<Self> {
        if n_classes == 0 || d_in == 0 {
            return Err(FeloError::config("blobs need positive n_classes and d_in"));
        }
        if !(spread > 0.0) || !spread.is_finite() {
            return Err(FeloError::config(format!(
                "blob spread must be positive, got {spread}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::BlobMeans, 0, 0);
        let min_dist = 2.0 * spread;
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        let mut attempts = 0;
        while means.len() < n_classes {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(FeloError::config(format!(
                    "could not place {n_classes} class means at distance {min_dist} in {d_in} dims; \
                     d_in too small for n_classes or spread too large"
                )));
            }
            let mut v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let far_enough = means.iter().all(|m| euclidean(m, &v) >= min_dist);
            if far_enough {
                means.push(v);
            }
        }
        Ok(BlobGenerator { means, spread })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    /// Draw `n_per_class` examples of every class, class-major order.
    pub fn sample<R: Rng + ?Sized>(&self, n_per_class: usize, rng: &mut R) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(FeloError::config("n_per_class must be positive"));
        }
        let d_in = self.means[0].len();
        let n_classes = self.means.len();
        let mut data = Vec::with_capacity(n_classes * n_per_class * d_in);
        let mut labels = Vec::with_capacity(n_classes * n_per_class);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                for &m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + self.spread * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(Tensor::matrix(labels.len(), d_in, data)?, labels, n_classes)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn generate_blobs(
    n_classes: usize,
    d_in: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let gen = BlobGenerator::new(n_classes, d_in, spread, seed)?;
    gen.sample(
        n_per_class,
        &mut stream_rng(seed, Stream::TrainSamples, 0, 0),
    )
}

/// Train and test sets drawn from the same class means with independent noise.
pub fn generate_blob_split(
    n_classes: usize,
    d_in: usize,
    n_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let gen = BlobGenerator::new(n_classes, d_in, spread, seed)?;
    let train = gen.sample(
        n_per_class,
        &mut stream_rng(seed, Stream::TrainSamples, 0, 0),
    )?;
    let test = gen.sample(
        test_per_class,
        &mut stream_rng(seed, Stream::TestSamples, 0, 0),
    )?;
    Ok((train, test))
}
