//! λ-sweep curves and empirical EMP estimates.
//!
//! Target labels are read here for dominance counting. Nothing in this
//! module feeds back into training, and no function mutates the model.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use crate::domains::{rng_from_seed, DomainBatch, DomainPairDataset};
use crate::error::{Error, Result};
use crate::math;
use crate::model::ModelParams;
use crate::tensor::{row_entropies, Tensor};
use crate::vicinal::{mix, RatioVector};

/// Seed of the default pair subset, shared by every checkpoint.
pub const SWEEP_SEED: u64 = 0x0515_7ee9;
pub const DEFAULT_SWEEP_SAMPLES: usize = 256;

/// A fixed set of (source, target) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPairs {
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
}

impl SweepPairs {
    pub fn sample(ds: &DomainPairDataset, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 || n_samples > ds.n_source() || n_samples > ds.n_target() {
            return Err(Error::contract(format!(
                "n_samples {n_samples} must be in 1..={}",
                ds.n_source().min(ds.n_target())
            )));
        }
        let mut rng = rng_from_seed(seed);
        Ok(Self {
            source_idx: index::sample(&mut rng, ds.n_source(), n_samples).into_vec(),
            target_idx: index::sample(&mut rng, ds.n_target(), n_samples).into_vec(),
        })
    }

    /// Pairs whose source label differs from the target eval label, so
    /// every mix has two labels competing for the top-1.
    pub fn sample_cross_class(ds: &DomainPairDataset, n_samples: usize, seed: u64) -> Result<Self> {
        let ys = ds.source_y().argmax_rows();
        let yt = ds.target_labels_for_eval().argmax_rows();
        let mut rng = rng_from_seed(seed);
        let src = index::sample(&mut rng, ds.n_source(), ds.n_source()).into_vec();
        let tgt = index::sample(&mut rng, ds.n_target(), ds.n_target()).into_vec();
        let mut used = alloc::vec![false; tgt.len()];
        let (mut source_idx, mut target_idx) = (Vec::new(), Vec::new());
        for &s in &src {
            if source_idx.len() == n_samples {
                break;
            }
            if let Some(k) = (0..tgt.len()).find(|&k| !used[k] && yt[tgt[k]] != ys[s]) {
                used[k] = true;
                source_idx.push(s);
                target_idx.push(tgt[k]);
            }
        }
        if n_samples == 0 || source_idx.len() < n_samples {
            return Err(Error::contract(format!(
                "only {} cross-class pairs available, {n_samples} requested",
                source_idx.len()
            )));
        }
        Ok(Self { source_idx, target_idx })
    }

    pub fn len(&self) -> usize {
        self.source_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_idx.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// Target fraction.
    pub lambda: f64,
    pub mean_entropy: f64,
    /// Fraction of mixes whose top-1 is the source label.
    pub source_dominance: f64,
    /// Fraction of mixes whose top-1 is the target eval label.
    pub target_dominance: f64,
}

/// `0, 1/steps, …, 1`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

/// Sweep over `grid` using pairs sampled with [`SWEEP_SEED`].
pub fn lambda_sweep(p: &ModelParams, ds: &DomainPairDataset, n_samples: usize, grid: &[f64]) -> Result<Vec<SweepRow>> {
    lambda_sweep_on(p, ds, &SweepPairs::sample(ds, n_samples, SWEEP_SEED)?, grid)
}

pub fn lambda_sweep_on(p: &ModelParams, ds: &DomainPairDataset, pairs: &SweepPairs, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::contract("empty sweep pair set"));
    }
    let batch = ds.batch(&pairs.source_idx, &pairs.target_idx)?;
    let ys = batch.ys.argmax_rows();
    let yt = ds.target_labels_for_eval().select_rows(&pairs.target_idx).argmax_rows();
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let z = p.logits(&mix(&batch.xs, &batch.xt, &RatioVector::filled(n, lambda)?)?)?;
        let h = row_entropies(z.data(), n, z.cols());
        let top = z.argmax_rows();
        let frac = |labels: &[usize]| top.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        rows.push(SweepRow {
            lambda,
            mean_entropy: h.iter().sum::<f64>() / n as f64,
            source_dominance: frac(&ys),
            target_dominance: frac(&yt),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpEstimate {
    /// λ of the highest mean entropy; the first wins ties.
    pub at_max_entropy: f64,
    /// Smallest λ where target dominance exceeds source dominance.
    pub at_dominance_flip: Option<f64>,
}

impl EmpEstimate {
    /// Where labels collapse: the dominance flip, or the entropy peak when
    /// the sweep never flips.
    pub fn equilibrium_point(&self) -> f64 {
        self.at_dominance_flip.unwrap_or(self.at_max_entropy)
    }
}

pub fn empirical_emp(sweep: &[SweepRow]) -> Result<EmpEstimate> {
    if sweep.is_empty() {
        return Err(Error::contract("empirical_emp needs a nonempty sweep"));
    }
    let ent: Vec<f64> = sweep.iter().map(|r| r.mean_entropy).collect();
    Ok(EmpEstimate {
        at_max_entropy: sweep[math::argmax(&ent)].lambda,
        at_dominance_flip: sweep
            .iter()
            .find(|r| r.target_dominance > r.source_dominance)
            .map(|r| r.lambda),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub before: Vec<SweepRow>,
    pub after: Vec<SweepRow>,
    pub before_emp: EmpEstimate,
    pub after_emp: EmpEstimate,
}

impl EquilibriumReport {
    /// Whether the after equilibrium point sits within `band` of 0.5 and
    /// strictly closer to it than the before point.
    pub fn equilibrated(&self, band: f64) -> bool {
        let (b, a) = (self.before_emp.equilibrium_point(), self.after_emp.equilibrium_point());
        // grid values like 0.35 are not exact, so the band edge gets an ulp of slack
        (a - 0.5).abs() <= band + 1e-12 && (a - 0.5).abs() < (b - 0.5).abs()
    }
}

pub fn equilibrium_report(
    before: &ModelParams,
    after: &ModelParams,
    ds: &DomainPairDataset,
    pairs: &SweepPairs,
    grid: &[f64],
) -> Result<EquilibriumReport> {
    let b = lambda_sweep_on(before, ds, pairs, grid)?;
    let a = lambda_sweep_on(after, ds, pairs, grid)?;
    Ok(EquilibriumReport {
        before_emp: empirical_emp(&b)?,
        after_emp: empirical_emp(&a)?,
        before: b,
        after: a,
    })
}

/// Mean of the per-pair entropy-maximising ratio over `grid`.
pub fn mean_pairwise_emp(p: &ModelParams, batch: &DomainBatch, grid: &[f64]) -> Result<f64> {
    let m = batch.len();
    if m == 0 || grid.is_empty() {
        return Err(Error::contract("mean_pairwise_emp needs pairs and a grid"));
    }
    let mut best = alloc::vec![(f64::NEG_INFINITY, 0.0); m];
    for &lambda in grid {
        let z: Tensor = p.logits(&mix(&batch.xs, &batch.xt, &RatioVector::filled(m, lambda)?)?)?;
        for (b, h) in best.iter_mut().zip(row_entropies(z.data(), m, z.cols())) {
            if h > b.0 {
                *b = (h, lambda);
            }
        }
    }
    Ok(best.iter().map(|b| b.1).sum::<f64>() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::make_two_moons_pair;
    use crate::model::{init_model, Group, ModelDims};

    fn row(lambda: f64, h: f64, s: f64, t: f64) -> SweepRow {
        SweepRow {
            lambda,
            mean_entropy: h,
            source_dominance: s,
            target_dominance: t,
        }
    }

    #[test]
    fn planted_peak() {
        let sweep: Vec<SweepRow> = uniform_grid(10)
            .into_iter()
            .map(|l| row(l, -(l - 0.6) * (l - 0.6), 1.0 - l, l))
            .collect();
        assert_eq!(empirical_emp(&sweep).unwrap().at_max_entropy, 0.6);
    }

    #[test]
    fn flip_is_quantised_to_the_grid() {
        // dominance curves cross at 0.45
        let sweep: Vec<SweepRow> = uniform_grid(10)
            .into_iter()
            .map(|l| row(l, 0.0, 0.95 - l, l + 0.05))
            .collect();
        assert_eq!(empirical_emp(&sweep).unwrap().at_dominance_flip, Some(0.5));
    }

    #[test]
    fn no_flip_is_absent() {
        let sweep = [row(0.0, 0.1, 1.0, 0.0), row(1.0, 0.2, 0.6, 0.4)];
        assert_eq!(empirical_emp(&sweep).unwrap().at_dominance_flip, None);
        assert!(empirical_emp(&[]).is_err());
    }

    #[test]
    fn endpoints_and_counting_bound() {
        let ds = make_two_moons_pair(200, 40.0, 0.05, 3).unwrap().standardized();
        let p = init_model(ModelDims::new(2, 2), 8).unwrap();
        let pairs = SweepPairs::sample(&ds, 64, 1).unwrap();
        let sweep = lambda_sweep_on(&p, &ds, &pairs, &uniform_grid(10)).unwrap();

        let src = ds.batch(&pairs.source_idx, &pairs.target_idx).unwrap();
        let pred_s = p.logits(&src.xs).unwrap().argmax_rows();
        let ys = src.ys.argmax_rows();
        let acc_s = pred_s.iter().zip(&ys).filter(|(a, b)| a == b).count() as f64 / 64.0;
        assert_eq!(sweep[0].source_dominance, acc_s);

        let pred_t = p.logits(&src.xt).unwrap().argmax_rows();
        let yt = ds.target_labels_for_eval().select_rows(&pairs.target_idx).argmax_rows();
        let acc_t = pred_t.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64 / 64.0;
        assert_eq!(sweep[10].target_dominance, acc_t);

        let same = ys.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64 / 64.0;
        for r in &sweep {
            assert!(r.source_dominance + r.target_dominance <= 1.0 + same + 1e-12);
        }
    }

    #[test]
    fn report_is_read_only_and_reflexive() {
        let ds = make_two_moons_pair(100, 40.0, 0.05, 3).unwrap().standardized();
        let p = init_model(ModelDims::new(2, 2), 2).unwrap();
        let sums = (p.checksum(Group::Theta), p.checksum(Group::Phi));
        let pairs = SweepPairs::sample(&ds, 50, 4).unwrap();
        let r = equilibrium_report(&p, &p, &ds, &pairs, &uniform_grid(10)).unwrap();
        assert_eq!(r.before, r.after);
        assert_eq!(sums, (p.checksum(Group::Theta), p.checksum(Group::Phi)));
        assert_eq!(pairs, SweepPairs::sample(&ds, 50, 4).unwrap());
    }

    #[test]
    fn equilibrium_verdict() {
        let est = |flip: Option<f64>, peak: f64| EmpEstimate {
            at_max_entropy: peak,
            at_dominance_flip: flip,
        };
        let report = |b: EmpEstimate, a: EmpEstimate| EquilibriumReport {
            before: Vec::new(),
            after: Vec::new(),
            before_emp: b,
            after_emp: a,
        };
        assert!(report(est(Some(0.8), 0.5), est(Some(0.65), 0.9)).equilibrated(0.15));
        assert!(report(est(Some(0.2), 0.5), est(Some(0.35), 0.0)).equilibrated(0.15));
        assert!(!report(est(Some(0.8), 0.5), est(Some(0.7), 0.5)).equilibrated(0.15));
        assert!(!report(est(Some(0.6), 0.5), est(Some(0.4), 0.5)).equilibrated(0.15));
        // no flip falls back to the entropy peak
        assert!(report(est(None, 0.9), est(None, 0.55)).equilibrated(0.15));
    }

    #[test]
    fn oversized_sample_rejected() {
        let ds = make_two_moons_pair(10, 0.0, 0.0, 0).unwrap();
        assert!(SweepPairs::sample(&ds, 11, 0).is_err());
    }
}
