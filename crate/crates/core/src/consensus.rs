//! Target-label consensus over two source-perturbed views of each target.
//!
//! `v1 = λp·xs + (1 − λp)·xt` and `v2 = λp·xs[π] + (1 − λp)·xt` for a random
//! permutation `π` of the batch. Both views are trained toward the argmax
//! of their summed softmax probabilities. `λp` here is the SOURCE fraction.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::contrastive::{confidence_mask, top1_probs};
use crate::domains::{DomainBatch, Rng};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Group, ModelParams};
use crate::objective::Objective;
use crate::tensor::{softmax_rows, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusViews {
    pub x_v1: Tensor,
    pub x_v2: Tensor,
    pub shuffle: Vec<usize>,
    pub lam_p: f64,
    /// Unmixed target rows; the confidence mask is computed on these.
    pub xt: Tensor,
}

fn perturb(xs: &Tensor, xt: &Tensor, src_rows: &[usize], lam_p: f64) -> Result<Tensor> {
    let d = xt.cols();
    let mut out = Vec::with_capacity(xt.len());
    for (i, &s) in src_rows.iter().enumerate() {
        for j in 0..d {
            out.push(lam_p * xs.at(s, j) + (1.0 - lam_p) * xt.at(i, j));
        }
    }
    Tensor::new(xt.shape(), out)
}

/// Views with an explicit permutation of the batch rows.
pub fn make_views_with(batch: &DomainBatch, lam_p: f64, shuffle: Vec<usize>) -> Result<ConsensusViews> {
    if !(0.0..=0.5).contains(&lam_p) {
        return Err(Error::contract(format!("lam_p {lam_p} outside [0, 0.5]")));
    }
    let m = batch.len();
    let mut seen = alloc::vec![false; m];
    if shuffle.len() != m || !shuffle.iter().all(|&i| i < m && !core::mem::replace(&mut seen[i], true)) {
        return Err(Error::contract("shuffle is not a permutation of the batch"));
    }
    let identity: Vec<usize> = (0..m).collect();
    Ok(ConsensusViews {
        x_v1: perturb(&batch.xs, &batch.xt, &identity, lam_p)?,
        x_v2: perturb(&batch.xs, &batch.xt, &shuffle, lam_p)?,
        shuffle,
        lam_p,
        xt: batch.xt.clone(),
    })
}

pub fn make_views(batch: &DomainBatch, lam_p: f64, rng: &mut Rng) -> Result<ConsensusViews> {
    let mut shuffle: Vec<usize> = (0..batch.len()).collect();
    shuffle.shuffle(rng);
    make_views_with(batch, lam_p, shuffle)
}

/// One-hot argmax of `softmax(z1) + softmax(z2)`; ties to the lower class.
pub fn consensus_labels(z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    if z1.shape() != z2.shape() || z1.shape().len() != 2 {
        return Err(Error::shape(
            "consensus_labels",
            format!("{:?} vs {:?}", z1.shape(), z2.shape()),
        ));
    }
    let (p1, p2) = (softmax_rows(z1), softmax_rows(z2));
    let n = z1.cols();
    let labels: Vec<usize> = (0..z1.rows())
        .map(|i| {
            let summed: Vec<f64> = p1.row(i).iter().zip(p2.row(i)).map(|(a, b)| a + b).collect();
            math::argmax(&summed)
        })
        .collect();
    Tensor::one_hot(&labels, n)
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    /// `mean CE(z_v1, ŷ) + mean CE(z_v2, ŷ)` over kept rows.
    pub objective: Objective,
    pub kept_indices: Vec<usize>,
    pub keep_rate: f64,
}

/// Consensus loss over rows whose pure-target top-1 probability passes the
/// confidence mask with coefficient `beta`. The consensus label is a constant.
pub fn consensus_loss(p: &ModelParams, views: &ConsensusViews, beta: f64) -> Result<ConsensusOutcome> {
    let m = views.xt.rows();
    let mask = confidence_mask(&top1_probs(p, &views.xt)?, beta);
    let kept: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    let keep_rate = if m == 0 { 0.0 } else { kept.len() as f64 / m as f64 };
    if kept.is_empty() {
        return Ok(ConsensusOutcome {
            objective: Objective::empty(),
            kept_indices: kept,
            keep_rate,
        });
    }
    let mut tape = Tape::new();
    let mut bound = p.bind(&[Group::Theta]);
    let x1 = tape.constant(&views.x_v1.select_rows(&kept));
    let x2 = tape.constant(&views.x_v2.select_rows(&kept));
    let z1 = bound.logits(&mut tape, x1)?;
    let z2 = bound.logits(&mut tape, x2)?;
    let y_hat = consensus_labels(&tape.tensor(z1), &tape.tensor(z2))?;
    let l1 = tape.cross_entropy(z1, &y_hat)?;
    let l2 = tape.cross_entropy(z2, &y_hat)?;
    let total = tape.add(l1, l2)?;
    Ok(ConsensusOutcome {
        objective: Objective::new(tape, total, bound.finish()),
        kept_indices: kept,
        keep_rate,
    })
}
