//! Independent checks shared by `selftest` and the acceptance suite.

use covi_core::checkpoint;
use covi_core::consensus::{consensus_loss, make_views_with};
use covi_core::contrastive::{build_contrastive_pairs, confidence_mask, contrastive_loss, top1_probs};
use covi_core::diagnostics::SweepPairs;
use covi_core::domains::{make_blobs_pair, make_two_moons_pair, rng_from_seed, DomainPairDataset};
use covi_core::gradcheck::{loss_checks, random_graph, GradReport, DEFAULT_STEP};
use covi_core::model::init_model;
use covi_core::tensor::row_entropies;
use covi_core::trainer::TrainerState;
use covi_core::vicinal::{brute_force_emp, grid_entropies, mix, RatioVector};
use covi_core::{Group, ModelDims, ModelParams, RatioGrid, Tape, Tensor};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn error(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Relative-error bound on gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central differences against autodiff on `n` random graphs.
pub fn gradient_graphs(n: u64) -> Check {
    let name = "gradient_graphs";
    let mut worst = GradReport::default();
    for seed in 0..n {
        match random_graph(seed).check(DEFAULT_STEP) {
            Ok(r) => worst = worst.merge(r),
            Err(e) => return Check::error(name, e),
        }
    }
    Check::new(
        name,
        worst.passes(GRAD_TOLERANCE),
        format!("{n} graphs, max relative error {:.2e}", worst.max_rel_error),
    )
}

/// Central differences against autodiff for every training loss.
pub fn gradient_losses(n_fixtures: u64) -> Check {
    let name = "gradient_losses";
    let mut per_loss: Vec<(&'static str, GradReport)> = Vec::new();
    for seed in 0..n_fixtures {
        let checks = match loss_checks(seed, DEFAULT_STEP) {
            Ok(c) => c,
            Err(e) => return Check::error(name, e),
        };
        for (loss, r) in checks {
            match per_loss.iter_mut().find(|(l, _)| *l == loss) {
                Some((_, w)) => *w = w.merge(r),
                None => per_loss.push((loss, r)),
            }
        }
    }
    let passed = per_loss.iter().all(|(_, r)| r.passes(GRAD_TOLERANCE));
    let detail = per_loss
        .iter()
        .map(|(l, r)| format!("{l} {:.2e}", r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Check::new(name, passed, format!("{n_fixtures} fixtures, max relative error: {detail}"))
}

/// Every brute-force ratio has entropy at least that of every grid ratio,
/// each pair re-evaluated on its own.
pub fn brute_force_maximality(n_models: u64) -> Check {
    let name = "brute_force_maximality";
    let grid = RatioGrid::default();
    let mut pairs = 0;
    for seed in 0..n_models {
        let run = || -> covi_core::Result<Option<usize>> {
            let ds = make_blobs_pair(64, 3, 2, 2.0, seed)?.standardized();
            let p = init_model(ModelDims::new(2, 3), seed)?;
            let idx: Vec<usize> = (0..ds.n_source()).collect();
            let batch = ds.batch(&idx, &idx)?;
            let lam = brute_force_emp(&p, &batch, &grid)?;
            let ent = grid_entropies(&p, &batch, &grid)?;
            for (i, &l) in lam.values().iter().enumerate() {
                let one = [i];
                let x = mix(&batch.xs.select_rows(&one), &batch.xt.select_rows(&one), &RatioVector::new(vec![l])?)?;
                let z = p.logits(&x)?;
                let h = row_entropies(z.data(), 1, z.cols())[0];
                if ent[i].iter().any(|&e| e > h) {
                    return Ok(Some(i));
                }
            }
            Ok(None)
        };
        match run() {
            Ok(None) => pairs += 64,
            Ok(Some(i)) => return Check::new(name, false, format!("model {seed}, pair {i} not maximal")),
            Err(e) => return Check::error(name, e),
        }
    }
    Check::new(name, true, format!("{pairs} pairs over {n_models} models, all maximal"))
}

/// Mean and unbiased deviation written out longhand.
fn brute_force_mask(probs: &[f64], alpha: f64) -> Vec<bool> {
    let n = probs.len();
    if n < 2 {
        return vec![true; n];
    }
    let mut total = 0.0;
    for &p in probs {
        total += p;
    }
    let mean = total / n as f64;
    let mut ss = 0.0;
    for &p in probs {
        ss += (p - mean) * (p - mean);
    }
    let std = (ss / (n - 1) as f64).sqrt();
    let mut keep = Vec::with_capacity(n);
    for &p in probs {
        keep.push(p >= mean - alpha * std);
    }
    keep
}

pub fn mask_equivalence(n_vectors: usize, seed: u64) -> Check {
    let name = "mask_equivalence";
    let mut rng = rng_from_seed(seed);
    let mut dropped = 0;
    for v in 0..n_vectors {
        let len = rng.random_range(1..65);
        let probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..=1.0)).collect();
        let alpha = rng.random_range(0.0..3.0);
        let got = confidence_mask(&probs, alpha);
        if got != brute_force_mask(&probs, alpha) {
            return Check::new(name, false, format!("vector {v} disagrees"));
        }
        dropped += got.iter().filter(|k| !**k).count();
    }
    Check::new(
        name,
        true,
        format!("{n_vectors} vectors agree exactly ({dropped} instances dropped)"),
    )
}

/// λ = 0, λ = 1 and λ = ½ mixes, compared bit for bit.
pub fn mixup_identities(seed: u64) -> Check {
    let name = "mixup_identities";
    let mut rng = rng_from_seed(seed);
    let mut rand = |m: usize, d: usize| {
        Tensor::new(&[m, d], (0..m * d).map(|_| rng.random_range(-100.0..100.0)).collect()).expect("shape")
    };
    let (xs, xt) = (rand(50, 7), rand(50, 7));
    let at = |l: f64| mix(&xs, &xt, &RatioVector::filled(50, l).expect("ratio"));
    let (Ok(m0), Ok(m1), Ok(mh)) = (at(0.0), at(1.0), at(0.5)) else {
        return Check::error(name, "mix failed");
    };
    let half: Vec<f64> = xs.data().iter().zip(xt.data()).map(|(a, b)| (a + b) / 2.0).collect();
    let bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let ok = [bits(m0.data(), xs.data()), bits(m1.data(), xt.data()), bits(mh.data(), &half)];
    Check::new(
        name,
        ok.iter().all(|&b| b),
        format!("lambda 0 / 1 / 0.5 bit-exact: {} / {} / {}", ok[0], ok[1], ok[2]),
    )
}

/// Soft contrastive labels of an untrained model are distributions summing to exactly 1.
pub fn contrastive_label_sums(seed: u64) -> Check {
    let name = "contrastive_label_sums";
    let run = || -> covi_core::Result<(usize, f64)> {
        let ds = make_blobs_pair(64, 4, 3, 1.0, seed)?.standardized();
        let p = init_model(ModelDims::new(3, 4), seed)?;
        let idx: Vec<usize> = (0..64).collect();
        let batch = ds.batch(&idx, &idx)?;
        let mut rng = rng_from_seed(seed);
        let lam = RatioVector::new((0..64).map(|_| rng.random_range(0.1..=0.9)).collect())?;
        let pairs = build_contrastive_pairs(&batch, &lam, 0.1, &[true; 64])?;
        let out = contrastive_loss(&p, &pairs, &batch.ys, &p.pseudo_labels(&batch.xt)?)?;
        let mut worst: f64 = 0.0;
        let mut rows = 0;
        for labels in [&out.label_td, &out.label_sd] {
            for i in 0..labels.rows() {
                worst = worst.max((labels.row(i).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        Ok((rows, worst))
    };
    match run() {
        Ok((rows, worst)) => Check::new(name, worst == 0.0, format!("{rows} label rows, max |sum − 1| = {worst:e}")),
        Err(e) => Check::error(name, e),
    }
}

/// On a source-trained model, the source-dominant view predicts the source
/// label more often than the target-dominant view does.
pub fn dominance_flip(p: &ModelParams, ds: &DomainPairDataset, n_pairs: usize, omega: f64, alpha: f64) -> Check {
    let name = "dominance_flip";
    let run = || -> covi_core::Result<(usize, f64, f64)> {
        let pairs = SweepPairs::sample(ds, n_pairs, covi_core::diagnostics::SWEEP_SEED)?;
        let batch = ds.batch(&pairs.source_idx, &pairs.target_idx)?;
        let lam = brute_force_emp(p, &batch, &RatioGrid::default())?;
        let mask = confidence_mask(&top1_probs(p, &batch.xt)?, alpha);
        let cp = build_contrastive_pairs(&batch, &lam, omega, &mask)?;
        let ys = batch.ys.select_rows(&cp.kept_indices).argmax_rows();
        let frac = |x: &Tensor| -> covi_core::Result<f64> {
            let top = p.logits(x)?.argmax_rows();
            Ok(top.iter().zip(&ys).filter(|(a, b)| a == b).count() as f64 / ys.len().max(1) as f64)
        };
        Ok((cp.len(), frac(&cp.x_sd)?, frac(&cp.x_td)?))
    };
    match run() {
        Ok((kept, sd, td)) => Check::new(
            name,
            kept > 0 && sd > td,
            format!("{kept} kept pairs, source label top-1 in sd view {sd:.4} vs td view {td:.4}"),
        ),
        Err(e) => Check::error(name, e),
    }
}

fn theta_grads(q: &ModelParams) -> Vec<f64> {
    let mut q = q.clone();
    q.group_mut(Group::Theta)
        .iter()
        .flat_map(|t| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

/// With `lam_p = 0` and every row kept, the consensus loss is twice the
/// self-training loss on the targets, gradient included.
pub fn consensus_identity(seed: u64) -> Check {
    let name = "consensus_identity";
    let run = || -> covi_core::Result<(f64, f64)> {
        let ds = make_two_moons_pair(64, 40.0, 0.05, seed)?.standardized();
        let p = init_model(ModelDims::new(2, 2), seed)?;
        let idx: Vec<usize> = (0..64).collect();
        let batch = ds.batch(&idx, &idx)?;
        let mut shuffle = idx.clone();
        shuffle.reverse();
        let views = make_views_with(&batch, 0.0, shuffle)?;
        let out = consensus_loss(&p, &views, 1e6)?;
        let mut qc = p.clone();
        qc.zero_grad();
        out.objective.backward_into(&mut qc, 1.0)?;

        let yt = p.pseudo_labels(&batch.xt)?;
        let mut tape = Tape::new();
        let mut bound = p.bind(&[Group::Theta]);
        let x = tape.constant(&batch.xt);
        let z = bound.logits(&mut tape, x)?;
        let ce = tape.cross_entropy(z, &yt)?;
        let mut qs = p.clone();
        qs.zero_grad();
        bound.finish().accumulate(&tape.backward(ce)?, &mut qs, 1.0)?;

        let value_err = (out.objective.value() - 2.0 * tape.scalar(ce)).abs();
        let grad_err = theta_grads(&qc)
            .iter()
            .zip(theta_grads(&qs))
            .map(|(c, s)| (c - 2.0 * s).abs())
            .fold(0.0, f64::max);
        if out.keep_rate != 1.0 {
            return Err(covi_core::Error::Contract("mask dropped rows".into()));
        }
        Ok((value_err, grad_err))
    };
    match run() {
        Ok((v, g)) => Check::new(
            name,
            v <= 1e-10 && g <= 1e-8,
            format!("|R_cs − 2·CE| = {v:.2e}, max |∇R_cs − 2·∇CE| = {g:.2e}"),
        ),
        Err(e) => Check::error(name, e),
    }
}

pub fn checkpoint_round_trip(seed: u64) -> Check {
    let name = "checkpoint_round_trip";
    let run = || -> covi_core::Result<bool> {
        let p = init_model(ModelDims::new(2, 3), seed)?;
        let state = TrainerState {
            theta_velocity: vec![vec![0.25, -1e-310, f64::MAX]],
            phi_velocity: vec![vec![-0.0]],
            params: p,
            epochs_done: 12,
            steps_done: 345,
        };
        let bytes = checkpoint::encode(&state);
        let back = checkpoint::decode(&bytes)?;
        Ok(checkpoint::encode(&back) == bytes
            && back.params.checksum(Group::Theta) == state.params.checksum(Group::Theta)
            && back.params.checksum(Group::Phi) == state.params.checksum(Group::Phi)
            && checkpoint::decode(&bytes[..bytes.len() - 3]).is_err())
    };
    match run() {
        Ok(ok) => Check::new(name, ok, "encode ∘ decode is bit-identical; truncation rejected".into()),
        Err(e) => Check::error(name, e),
    }
}
