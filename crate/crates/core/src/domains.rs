//! Synthetic source/target domain pairs and mini-batch sampling.
//!
//! Target labels are generated (they are needed for evaluation and the
//! diagnostics) but they only leave a [`DomainPairDataset`] through
//! [`DomainPairDataset::target_labels_for_eval`]. The batch type handed to
//! training, [`DomainBatch`], has no field that could carry them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPairDataset {
    source_x: Tensor,
    source_y: Tensor,
    target_x: Tensor,
    target_y_eval: Tensor,
    n_classes: usize,
    input_dim: usize,
    generator_id: String,
    seed: u64,
}

/// Paired mini-batch: labeled source rows and unlabeled target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub xs: Tensor,
    pub ys: Tensor,
    pub xt: Tensor,
}

impl DomainBatch {
    pub fn new(xs: Tensor, ys: Tensor, xt: Tensor) -> Result<Self> {
        if xs.shape().len() != 2 || xs.shape() != xt.shape() {
            return Err(Error::shape(
                "DomainBatch",
                format!("source {:?} vs target {:?}", xs.shape(), xt.shape()),
            ));
        }
        if ys.shape().len() != 2 || ys.rows() != xs.rows() {
            return Err(Error::shape(
                "DomainBatch",
                format!("labels {:?} for {} rows", ys.shape(), xs.rows()),
            ));
        }
        Ok(Self { xs, ys, xt })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.ys.cols()
    }

    /// Sub-batch with the given pair indices.
    pub fn select(&self, idx: &[usize]) -> DomainBatch {
        DomainBatch {
            xs: self.xs.select_rows(idx),
            ys: self.ys.select_rows(idx),
            xt: self.xt.select_rows(idx),
        }
    }
}

impl DomainPairDataset {
    /// Assembles a dataset from parts, checking every structural invariant
    /// except class balance (loaded data may be unbalanced).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        source_x: Tensor,
        source_y: Tensor,
        target_x: Tensor,
        target_y_eval: Tensor,
        generator_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = source_x.cols();
        let n_classes = source_y.cols();
        let ok = source_x.shape().len() == 2
            && target_x.shape() == [target_x.rows(), input_dim]
            && source_y.shape() == [source_x.rows(), n_classes]
            && target_y_eval.shape() == [target_x.rows(), n_classes];
        if !ok {
            return Err(Error::shape(
                "DomainPairDataset",
                format!(
                    "xs {:?} ys {:?} xt {:?} yt {:?}",
                    source_x.shape(),
                    source_y.shape(),
                    target_x.shape(),
                    target_y_eval.shape()
                ),
            ));
        }
        Ok(Self {
            source_x,
            source_y,
            target_x,
            target_y_eval,
            n_classes,
            input_dim,
            generator_id: generator_id.into(),
            seed,
        })
    }

    pub fn source_x(&self) -> &Tensor {
        &self.source_x
    }

    pub fn source_y(&self) -> &Tensor {
        &self.source_y
    }

    pub fn target_x(&self) -> &Tensor {
        &self.target_x
    }

    /// Ground-truth target labels. Only evaluation and diagnostics may call this.
    pub fn target_labels_for_eval(&self) -> &Tensor {
        &self.target_y_eval
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.rows()
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Builds a training batch from explicit row indices.
    pub fn batch(&self, source_idx: &[usize], target_idx: &[usize]) -> Result<DomainBatch> {
        if source_idx.len() != target_idx.len() {
            return Err(Error::contract("source and target index lists differ in length"));
        }
        DomainBatch::new(
            self.source_x.select_rows(source_idx),
            self.source_y.select_rows(source_idx),
            self.target_x.select_rows(target_idx),
        )
    }

    /// Per-feature mean and standard deviation of the source inputs.
    pub fn source_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.source_x.rows(), self.input_dim);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(self.source_x.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = self.source_x.at(i, j) - mean[j];
                var[j] += c * c;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = math::sqrt(v / n as f64);
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        (mean, std)
    }

    /// Both domains standardised with the source mean and deviation.
    pub fn standardized(&self) -> Self {
        let (mean, std) = self.source_stats();
        let apply = |t: &Tensor| {
            let d = t.cols();
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| (x - mean[k % d]) / std[k % d])
                .collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        Self {
            source_x: apply(&self.source_x),
            target_x: apply(&self.target_x),
            ..self.clone()
        }
    }
}

fn balanced_labels(n: usize, n_classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % n_classes).collect()
}

fn moon_point(class: usize, t: f64) -> [f64; 2] {
    if class == 0 {
        [math::cos(t), math::sin(t)]
    } else {
        [1.0 - math::cos(t), 1.0 - math::sin(t) - 0.5]
    }
}

/// Two interleaving half circles; the target domain is the same generator
/// rotated by `rotation_deg` about the origin with independent noise.
///
/// Class `k` of each domain holds the points at `t = π·i/(n_k − 1)`, so
/// with zero noise and zero rotation both domains are the same point set.
pub fn make_two_moons_pair(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_std: f64,
    seed: u64,
) -> Result<DomainPairDataset> {
    if n_per_domain < 4 {
        return Err(Error::contract(format!(
            "two moons needs at least 4 points per domain, got {n_per_domain}"
        )));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::contract(format!("noise_std {noise_std} must be >= 0")));
    }
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let counts = [n_per_domain - n_per_domain / 2, n_per_domain / 2];
    let theta = rotation_deg.to_radians();
    let (c, s) = (math::cos(theta), math::sin(theta));

    let mut domain = |rotate: bool| {
        let mut xs = Vec::with_capacity(2 * n_per_domain);
        let mut labels = Vec::with_capacity(n_per_domain);
        // Alternate classes so any prefix is balanced within one.
        let mut next = [0usize; 2];
        for i in 0..n_per_domain {
            let class = i % 2;
            let k = next[class];
            next[class] += 1;
            let denom = (counts[class] - 1).max(1) as f64;
            let t = core::f64::consts::PI * k as f64 / denom;
            let [mut x, mut y] = moon_point(class, t);
            if rotate {
                (x, y) = (c * x - s * y, s * x + c * y);
            }
            if noise_std > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            xs.push(x);
            xs.push(y);
            labels.push(class);
        }
        (xs, labels)
    };
    let (sx, sl) = domain(false);
    let (tx, tl) = domain(true);
    DomainPairDataset::from_parts(
        Tensor::new(&[n_per_domain, 2], sx)?,
        Tensor::one_hot(&sl, 2)?,
        Tensor::new(&[n_per_domain, 2], tx)?,
        Tensor::one_hot(&tl, 2)?,
        "two_moons",
        seed,
    )
}

/// Standard deviation of each Gaussian blob.
pub const BLOB_STD: f64 = 1.0;

/// Gaussian class blobs. Target class means are the source means plus one
/// shared shift vector of norm `shift` and a per-class offset whose scale
/// is `0.1·shift`, so `shift = 0` gives identical distributions.
pub fn make_blobs_pair(
    n_per_domain: usize,
    n_classes: usize,
    dim: usize,
    shift: f64,
    seed: u64,
) -> Result<DomainPairDataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::contract(format!(
            "blobs need n_classes >= 2 and dim >= 2 (got {n_classes}, {dim})"
        )));
    }
    if n_per_domain < n_classes {
        return Err(Error::contract("fewer points than classes"));
    }
    let mut rng = rng_from_seed(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spread = 4.0 * BLOB_STD;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| spread * unit.sample(&mut rng)).collect())
        .collect();
    let mut dir: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
    let norm = math::sqrt(dir.iter().map(|v| v * v).sum());
    dir.iter_mut().for_each(|v| *v *= shift / norm);
    let target_means: Vec<Vec<f64>> = means
        .iter()
        .map(|mu| {
            mu.iter()
                .zip(&dir)
                .map(|(m, s)| m + s + 0.1 * shift * unit.sample(&mut rng))
                .collect()
        })
        .collect();

    let labels = balanced_labels(n_per_domain, n_classes);
    let mut draw = |centres: &[Vec<f64>]| {
        let mut xs = Vec::with_capacity(n_per_domain * dim);
        for &k in &labels {
            for c in &centres[k] {
                xs.push(c + BLOB_STD * unit.sample(&mut rng));
            }
        }
        xs
    };
    let sx = draw(&means);
    let tx = draw(&target_means);
    DomainPairDataset::from_parts(
        Tensor::new(&[n_per_domain, dim], sx)?,
        Tensor::one_hot(&labels, n_classes)?,
        Tensor::new(&[n_per_domain, dim], tx)?,
        Tensor::one_hot(&labels, n_classes)?,
        "blobs",
        seed,
    )
}

/// Draws `m` source rows and `m` target rows, each without replacement,
/// independently of each other.
pub fn next_batch(ds: &DomainPairDataset, m: usize, rng: &mut Rng) -> Result<DomainBatch> {
    if m > ds.n_source().min(ds.n_target()) || m == 0 {
        return Err(Error::contract(format!(
            "batch size {m} not in 1..={}",
            ds.n_source().min(ds.n_target())
        )));
    }
    let s = index::sample(rng, ds.n_source(), m).into_vec();
    let t = index::sample(rng, ds.n_target(), m).into_vec();
    ds.batch(&s, &t)
}

/// Walks one epoch over the larger domain in shuffled order.
///
/// Every row of the larger domain is visited exactly once; the last batch
/// may be short. The smaller domain is reshuffled whenever it runs out.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    batch_size: usize,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    source_pos: usize,
    target_pos: usize,
    emitted: usize,
    epoch_len: usize,
}

impl EpochSampler {
    pub fn new(ds: &DomainPairDataset, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        if batch_size == 0 || batch_size > ds.n_source().min(ds.n_target()) {
            return Err(Error::contract(format!(
                "batch size {batch_size} not in 1..={}",
                ds.n_source().min(ds.n_target())
            )));
        }
        let mut source_order: Vec<usize> = (0..ds.n_source()).collect();
        let mut target_order: Vec<usize> = (0..ds.n_target()).collect();
        source_order.shuffle(rng);
        target_order.shuffle(rng);
        Ok(Self {
            batch_size,
            source_order,
            target_order,
            source_pos: 0,
            target_pos: 0,
            emitted: 0,
            epoch_len: ds.n_source().max(ds.n_target()),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch_len.div_ceil(self.batch_size)
    }

    fn take(order: &mut [usize], pos: &mut usize, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if *pos == order.len() {
                order.shuffle(rng);
                *pos = 0;
            }
            out.push(order[*pos]);
            *pos += 1;
        }
        out
    }

    /// Index lists `(source, target)` for the next batch, or `None` once the
    /// epoch is exhausted.
    pub fn next_indices(&mut self, rng: &mut Rng) -> Option<(Vec<usize>, Vec<usize>)> {
        if self.emitted >= self.epoch_len {
            return None;
        }
        let k = self.batch_size.min(self.epoch_len - self.emitted);
        self.emitted += k;
        let s = Self::take(&mut self.source_order, &mut self.source_pos, k, rng);
        let t = Self::take(&mut self.target_order, &mut self.target_pos, k, rng);
        Some((s, t))
    }
}
