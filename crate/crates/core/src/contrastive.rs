//! Contrastive views around the EMP boundary and the swapped top-2 loss.
//!
//! For a pair with EMP ratio `λ*`, the source-dominant view mixes at
//! `λ_sd = λ* − ω` and the target-dominant view at `λ_td = λ* + ω` (target
//! fractions). Each view is supervised by a convex combination, at its own
//! ratio, of a trusted label for one component and the other view's top-1
//! prediction for the other component:
//!
//! ```text
//! label_td = λ_td·ŷ_t        + (1 − λ_td)·top1(z_sd)
//! label_sd = (1 − λ_sd)·y_s  + λ_sd·top1(z_td)
//! ```
//!
//! The swapped one-hot labels are constants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::domains::DomainBatch;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Group, ModelParams};
use crate::objective::Objective;
use crate::tensor::{softmax_rows, Tape, Tensor};
use crate::vicinal::{mix, RatioVector};

/// Keeps instances whose top-1 probability is at least
/// `mean − alpha·std`, with `std` the unbiased sample deviation.
/// Fewer than two instances: everything is kept.
pub fn confidence_mask(top1_probs: &[f64], alpha: f64) -> Vec<bool> {
    let m = top1_probs.len();
    if m < 2 {
        return vec![true; m];
    }
    let mean = top1_probs.iter().sum::<f64>() / m as f64;
    let var = top1_probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (m - 1) as f64;
    let threshold = mean - alpha * math::sqrt(var);
    top1_probs.iter().map(|&p| p >= threshold).collect()
}

/// Largest softmax probability of `h(f(x))`, per row.
pub fn top1_probs(p: &ModelParams, x: &Tensor) -> Result<Vec<f64>> {
    let probs = softmax_rows(&p.logits(x)?);
    Ok((0..probs.rows())
        .map(|i| probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Indices of the two largest entries of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Top2 {
    pub k1: usize,
    pub k2: usize,
}

/// Top-2 classes of every row; ties go to the lower index first.
pub fn top2_of(logits: &Tensor) -> Result<Vec<Top2>> {
    if logits.shape().len() != 2 || logits.cols() < 2 {
        return Err(Error::contract("top-2 needs at least two classes"));
    }
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let k1 = math::argmax(row);
            let mut k2 = if k1 == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != k1 && v > row[k2] {
                    k2 = j;
                }
            }
            Top2 { k1, k2 }
        })
        .collect())
}

/// Admissible ratio range for the two views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceBounds {
    /// Lowest allowed source-dominant ratio.
    pub sd_min: f64,
    /// Highest allowed target-dominant ratio.
    pub td_max: f64,
}

impl Default for SpaceBounds {
    fn default() -> Self {
        Self {
            sd_min: 0.0,
            td_max: 1.0,
        }
    }
}

/// Source- and target-dominant views of the kept pairs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub x_sd: Tensor,
    pub x_td: Tensor,
    pub lam_sd: RatioVector,
    pub lam_td: RatioVector,
    /// Batch rows the views were built from.
    pub kept_indices: Vec<usize>,
}

impl ContrastivePair {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

pub fn build_contrastive_pairs(
    batch: &DomainBatch,
    lam_star: &RatioVector,
    omega: f64,
    mask: &[bool],
) -> Result<ContrastivePair> {
    build_contrastive_pairs_within(batch, lam_star, omega, mask, SpaceBounds::default())
}

/// Keeps pair `i` iff `mask[i]`, `λ*_i − ω ≥ sd_min` and `λ*_i + ω ≤ td_max`,
/// then mixes both views from that same pair.
pub fn build_contrastive_pairs_within(
    batch: &DomainBatch,
    lam_star: &RatioVector,
    omega: f64,
    mask: &[bool],
    bounds: SpaceBounds,
) -> Result<ContrastivePair> {
    if !(omega > 0.0 && omega < 0.5) {
        return Err(Error::contract(format!("omega {omega} outside (0, 0.5)")));
    }
    if !(0.0 <= bounds.sd_min && bounds.sd_min <= bounds.td_max && bounds.td_max <= 1.0) {
        return Err(Error::contract(format!("space bounds {bounds:?} not within [0, 1]")));
    }
    let m = batch.len();
    if lam_star.len() != m || mask.len() != m {
        return Err(Error::shape(
            "build_contrastive_pairs",
            format!("{} ratios, {} mask entries, {m} pairs", lam_star.len(), mask.len()),
        ));
    }
    let kept: Vec<usize> = (0..m)
        .filter(|&i| {
            let l = lam_star.values()[i];
            mask[i] && l - omega >= bounds.sd_min && l + omega <= bounds.td_max
        })
        .collect();
    let sub = batch.select(&kept);
    let star = lam_star.select(&kept);
    let lam_sd = RatioVector::new(star.values().iter().map(|l| l - omega).collect())?;
    let lam_td = RatioVector::new(star.values().iter().map(|l| l + omega).collect())?;
    Ok(ContrastivePair {
        x_sd: mix(&sub.xs, &sub.xt, &lam_sd)?,
        x_td: mix(&sub.xs, &sub.xt, &lam_td)?,
        lam_sd,
        lam_td,
        kept_indices: kept,
    })
}

/// Soft label `(1 − w)·a + w·b` for one-hot `a`, `b` given as class indices.
fn two_point_label(a: usize, b: usize, w: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if a == b {
        out[a] = 1.0;
    } else {
        out[a] = 1.0 - w;
        out[b] = w;
    }
}

/// Result of [`contrastive_loss`].
#[derive(Debug, Clone)]
pub struct ContrastiveOutcome {
    /// `R_td + R_sd`, differentiable in θ.
    pub objective: Objective,
    pub r_td: f64,
    pub r_sd: f64,
    /// Soft labels of the target-dominant view, `[m'×n]`.
    pub label_td: Tensor,
    /// Soft labels of the source-dominant view, `[m'×n]`.
    pub label_sd: Tensor,
    /// Fraction of kept pairs whose top-2 labels agree crosswise.
    pub agreement_rate: f64,
}

/// Swapped-prediction loss `R_ct = R_td + R_sd` over the kept pairs.
///
/// `ys` and `yt_hat` are full-batch one-hot labels; rows are picked with
/// `pairs.kept_indices`. No kept pairs gives a zero loss with no gradient.
pub fn contrastive_loss(
    p: &ModelParams,
    pairs: &ContrastivePair,
    ys: &Tensor,
    yt_hat: &Tensor,
) -> Result<ContrastiveOutcome> {
    let n = p.dims().n_classes;
    if pairs.is_empty() {
        return Ok(ContrastiveOutcome {
            objective: Objective::empty(),
            r_td: 0.0,
            r_sd: 0.0,
            label_td: Tensor::zeros(&[0, n]),
            label_sd: Tensor::zeros(&[0, n]),
            agreement_rate: 0.0,
        });
    }
    let ys_idx = ys.select_rows(&pairs.kept_indices).argmax_rows();
    let yt_idx = yt_hat.select_rows(&pairs.kept_indices).argmax_rows();

    let mut tape = Tape::new();
    let mut bound = p.bind(&[Group::Theta]);
    let x_sd = tape.constant(&pairs.x_sd);
    let x_td = tape.constant(&pairs.x_td);
    let z_sd = bound.logits(&mut tape, x_sd)?;
    let z_td = bound.logits(&mut tape, x_td)?;
    let top_sd = top2_of(&tape.tensor(z_sd))?;
    let top_td = top2_of(&tape.tensor(z_td))?;

    let m = pairs.len();
    let mut label_td = vec![0.0; m * n];
    let mut label_sd = vec![0.0; m * n];
    for i in 0..m {
        let (l_td, l_sd) = (pairs.lam_td.values()[i], pairs.lam_sd.values()[i]);
        // (1 − λ_td)·top1(z_sd) + λ_td·ŷ_t
        two_point_label(top_sd[i].k1, yt_idx[i], l_td, &mut label_td[i * n..(i + 1) * n]);
        // (1 − λ_sd)·y_s + λ_sd·top1(z_td)
        two_point_label(ys_idx[i], top_td[i].k1, l_sd, &mut label_sd[i * n..(i + 1) * n]);
    }
    let label_td = Tensor::new(&[m, n], label_td)?;
    let label_sd = Tensor::new(&[m, n], label_sd)?;
    let r_td = tape.cross_entropy(z_td, &label_td)?;
    let r_sd = tape.cross_entropy(z_sd, &label_sd)?;
    let total = tape.add(r_td, r_sd)?;

    let agree = top_sd
        .iter()
        .zip(&top_td)
        .filter(|(sd, td)| sd.k1 == td.k2 && td.k1 == sd.k2)
        .count();
    Ok(ContrastiveOutcome {
        r_td: tape.scalar(r_td),
        r_sd: tape.scalar(r_sd),
        objective: Objective::new(tape, total, bound.finish()),
        label_td,
        label_sd,
        agreement_rate: agree as f64 / m as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_probs_keep_all() {
        assert!(confidence_mask(&[0.6; 5], 2.0).iter().all(|&k| k));
    }

    #[test]
    fn worked_threshold_example() {
        // mean 0.7, sample std 0.2, threshold 0.5
        assert_eq!(confidence_mask(&[0.9, 0.5, 0.7], 1.0), [true, true, true]);
        assert_eq!(confidence_mask(&[0.9, 0.49, 0.7], 0.9), [true, false, true]);
    }

    #[test]
    fn alpha_zero_keeps_at_or_above_mean() {
        assert_eq!(confidence_mask(&[0.9, 0.5, 0.6, 0.8], 0.0), [true, false, false, true]);
    }

    #[test]
    fn single_instance_fallback() {
        assert_eq!(confidence_mask(&[0.1], 3.0), [true]);
        assert!(confidence_mask(&[], 3.0).is_empty());
    }

    #[test]
    fn top2_basic_and_ties() {
        let z = Tensor::from_rows(&[vec![0.1, 3.0, 2.0], vec![1.0, 1.0, 0.0], vec![0.0, 5.0, 0.0]]).unwrap();
        let t = top2_of(&z).unwrap();
        assert_eq!(t[0], Top2 { k1: 1, k2: 2 });
        assert_eq!(t[1], Top2 { k1: 0, k2: 1 });
        assert_eq!(t[2], Top2 { k1: 1, k2: 0 });
        assert!(top2_of(&Tensor::zeros(&[2, 1])).is_err());
    }

    fn batch(m: usize) -> DomainBatch {
        let xs = Tensor::new(&[m, 2], (0..2 * m).map(|i| i as f64).collect()).unwrap();
        let xt = Tensor::new(&[m, 2], (0..2 * m).map(|i| -(i as f64)).collect()).unwrap();
        DomainBatch::new(xs, Tensor::one_hot(&vec![0; m], 2).unwrap(), xt).unwrap()
    }

    #[test]
    fn views_sit_omega_either_side() {
        let b = batch(1);
        let pairs = build_contrastive_pairs(&b, &RatioVector::new(vec![0.5]).unwrap(), 0.2, &[true]).unwrap();
        assert!((pairs.lam_sd.values()[0] - 0.3).abs() < 1e-15);
        assert!((pairs.lam_td.values()[0] - 0.7).abs() < 1e-15);
        assert_eq!(pairs.kept_indices, [0]);
    }

    #[test]
    fn out_of_band_pairs_dropped() {
        let b = batch(4);
        let lam = RatioVector::new(vec![0.95, 0.5, 0.1, 0.5]).unwrap();
        let pairs = build_contrastive_pairs(&b, &lam, 0.2, &[true, true, true, false]).unwrap();
        assert_eq!(pairs.kept_indices, [1]);
        assert_eq!(pairs.x_sd.rows(), 1);
        assert!(build_contrastive_pairs(&b, &lam, 0.5, &[true; 4]).is_err());
        assert!(build_contrastive_pairs(&b, &lam, 0.0, &[true; 4]).is_err());
    }

    #[test]
    fn two_point_labels_are_convex() {
        let mut out = [0.0; 3];
        for k in 0..=100 {
            let w = k as f64 / 100.0;
            two_point_label(0, 2, w, &mut out);
            assert_eq!(out.iter().sum::<f64>(), 1.0);
            two_point_label(1, 1, w, &mut out);
            assert_eq!(out, [0.0, 1.0, 0.0]);
        }
    }
}
