//! Central finite differences for checking autodiff gradients.
//!
//! Kept independent of the tape: the only thing it needs is a closure that
//! evaluates the scalar function at a perturbed point.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::consensus::{consensus_loss, make_views_with};
use crate::contrastive::{build_contrastive_pairs, contrastive_loss};
use crate::domains::{make_blobs_pair, rng_from_seed, DomainBatch};
use crate::error::Result;
use crate::model::{init_model, Group, ModelDims, ModelParams};
use crate::objective::Objective;
use crate::tensor::{softmax_rows, Tape, Tensor, Var};
use crate::vicinal::{emp_learner_loss, emp_mixup_loss, RatioVector};

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.max_rel_error.is_finite()
    }

    /// Folds another report into this one, keeping the worst case.
    pub fn merge(self, other: GradReport) -> GradReport {
        let worst = if other.max_rel_error > self.max_rel_error {
            other.worst
        } else {
            self.worst
        };
        GradReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            worst,
            checked: self.checked + other.checked,
        }
    }
}

impl Default for GradReport {
    fn default() -> Self {
        GradReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: 0,
            checked: 0,
        }
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> GradReport {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let numeric = central_difference(f, x, h);
    let mut report = GradReport {
        checked: x.len(),
        ..GradReport::default()
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(a, n);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = i;
        }
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
    }
    report
}

/// Tape operations every [`random_graph`] records at least once.
pub const GRAPH_OPS: [&str; 18] = [
    "leaf",
    "constant",
    "detach",
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax",
    "concat_cols",
    "mix_rows",
    "reshape",
    "sum",
    "mean",
    "cross_entropy",
    "entropy",
];

/// A small random scalar graph over five trainable inputs.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    /// `A [m×d]`, `B [m×d]`, `lam [m]`, `W [d×h]`, `b [h]`.
    pub inputs: Vec<Tensor>,
    offset: Tensor,
    target: Tensor,
    /// Extra elementwise stages applied after the first ReLU.
    stages: Vec<u8>,
    coef: f64,
}

fn uniform(rng: &mut crate::domains::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = rng_from_seed(seed);
    let m = rng.random_range(2..5);
    let d = rng.random_range(1..4);
    let h = rng.random_range(1..4);
    let mut target = uniform(&mut rng, &[m, 2 * h], 0.0, 1.0);
    for i in 0..m {
        let row = &mut target.data_mut()[i * 2 * h..(i + 1) * 2 * h];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let n_stages = rng.random_range(0..4);
    RandomGraph {
        inputs: vec![
            uniform(&mut rng, &[m, d], -1.0, 1.0),
            uniform(&mut rng, &[m, d], -1.0, 1.0),
            uniform(&mut rng, &[m], 0.05, 0.95),
            uniform(&mut rng, &[d, h], -1.0, 1.0),
            uniform(&mut rng, &[h], -0.5, 0.5),
        ],
        offset: uniform(&mut rng, &[m, h], -1.0, 1.0),
        target,
        stages: (0..n_stages).map(|_| rng.random_range(0..3)).collect(),
        coef: rng.random_range(-2.0..2.0),
    }
}

impl RandomGraph {
    /// `frozen` replaces `detach(c)` by a constant, so finite differences see
    /// the stopped branch as fixed, the way the tape does.
    fn record(&self, tape: &mut Tape, inputs: &[Tensor], frozen: Option<&Tensor>) -> Result<(Var, Vec<Var>, Var)> {
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().into_parameter())).collect();
        let (a, b, lam, w, bias) = (leaves[0], leaves[1], leaves[2], leaves[3], leaves[4]);
        let x = tape.mix_rows(a, b, lam)?;
        let xw = tape.matmul(x, w)?;
        let u = tape.add_bias(xw, bias)?;
        let mut r = tape.relu(u);
        for &stage in &self.stages {
            r = match stage {
                0 => tape.scale(r, self.coef),
                1 => tape.mul(r, u)?,
                _ => tape.softmax(r)?,
            };
        }
        let off = tape.constant(&self.offset);
        let shifted = tape.add(u, off)?;
        let c = tape.concat_cols(r, shifted)?;
        let s = tape.softmax(c)?;
        let t = tape.mul(s, c)?;
        let c3 = tape.scale(c, 0.3);
        let v = tape.sub(t, c3)?;
        let stop = match frozen {
            Some(t) => tape.constant(t),
            None => tape.detach(c),
        };
        let wv = tape.add(v, stop)?;
        let n = tape.value(wv).len();
        let flat = tape.reshape(wv, &[n])?;
        let total = tape.sum(flat);
        let total = tape.scale(total, 0.1);
        let avg = tape.mean(wv);
        let ce = tape.cross_entropy(wv, &self.target)?;
        let ent = tape.entropy(wv)?;
        let mut loss = tape.add(total, avg)?;
        loss = tape.add(loss, ce)?;
        loss = tape.add(loss, ent)?;
        Ok((loss, leaves, c))
    }

    /// The tensor that `detach` stops at the recorded inputs.
    fn stopped(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, _, c) = self.record(&mut tape, &self.inputs, None)?;
        let rows = self.inputs[0].shape()[0];
        let data = tape.value(c).to_vec();
        Tensor::new(&[rows, data.len() / rows], data)
    }

    /// Loss at `inputs` with the detached branch held at its recorded value.
    pub fn value_at(&self, inputs: &[Tensor]) -> Result<f64> {
        let stopped = self.stopped()?;
        let mut tape = Tape::new();
        let (loss, _, _) = self.record(&mut tape, inputs, Some(&stopped))?;
        Ok(tape.scalar(loss))
    }

    /// Autodiff gradient of every input, flattened in input order.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (loss, leaves, _) = self.record(&mut tape, &self.inputs, None)?;
        let grads = tape.backward(loss)?;
        let mut out = Vec::new();
        for (v, t) in leaves.iter().zip(&self.inputs) {
            match grads.get(*v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(core::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok(out)
    }

    fn unflatten(&self, x: &[f64]) -> Vec<Tensor> {
        let mut at = 0;
        self.inputs
            .iter()
            .map(|t| {
                let part = x[at..at + t.len()].to_vec();
                at += t.len();
                Tensor::new(t.shape(), part).expect("shape")
            })
            .collect()
    }

    pub fn check(&self, h: f64) -> Result<GradReport> {
        let x: Vec<f64> = self.inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        let analytic = self.gradient()?;
        let f = |p: &[f64]| self.value_at(&self.unflatten(p)).unwrap_or(f64::NAN);
        Ok(check_gradient(f, &x, &analytic, h))
    }
}

fn group_values(p: &ModelParams, group: Group) -> Vec<f64> {
    let mut q = p.clone();
    q.group_mut(group).iter().flat_map(|t| t.data().to_vec()).collect()
}

fn set_group_values(p: &mut ModelParams, group: Group, x: &[f64]) {
    let mut at = 0;
    for t in p.group_mut(group) {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[at..at + n]);
        at += n;
    }
}

/// Finite-difference check of `build(p)`'s gradient with respect to one
/// parameter group. Anything `build` derives from `p` without gradient
/// (pseudo-labels, masks, swapped labels) is recomputed at every probe.
pub fn check_objective(
    p: &ModelParams,
    group: Group,
    build: impl Fn(&ModelParams) -> Result<Objective>,
    h: f64,
) -> Result<GradReport> {
    let mut q = p.clone();
    q.zero_grad();
    build(&q)?.backward_into(&mut q, 1.0)?;
    let analytic: Vec<f64> = q
        .group_mut(group)
        .iter()
        .flat_map(|t| match t.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    let x = group_values(p, group);
    let mut probe = p.clone();
    let f = |v: &[f64]| {
        set_group_values(&mut probe, group, v);
        build(&probe).map_or(f64::NAN, |o| o.value())
    };
    Ok(check_gradient(f, &x, &analytic, h))
}

/// Gap between the two largest entries of every row.
fn row_gaps(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| {
            let mut row = t.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[0] - row[1]
        })
        .collect()
}

/// `softmax(z_v1) + softmax(z_v2)`, whose argmax is the consensus label.
fn summed_probs(p: &ModelParams, views: &crate::consensus::ConsensusViews) -> Result<Tensor> {
    let (p1, p2) = (softmax_rows(&p.logits(&views.x_v1)?), softmax_rows(&p.logits(&views.x_v2)?));
    Tensor::new(p1.shape(), p1.data().iter().zip(p2.data()).map(|(a, b)| a + b).collect())
}

const FIXTURE_ROWS: usize = 6;
const FIXTURE_OMEGA: f64 = 0.1;
const FIXTURE_LAM_P: f64 = 0.1;
/// Keeps every row of a six-row batch: no z-score there can reach 3.
const FIXTURE_BETA: f64 = 3.0;

/// Model, batch and mixing ratios for checking the four training objectives.
#[derive(Debug, Clone)]
pub struct LossFixture {
    pub params: ModelParams,
    pub batch: DomainBatch,
    pub lam: RatioVector,
}

/// The losses take argmaxes of the model's own outputs. A decision that
/// nearly ties can flip under a probe and show up as a jump in the
/// difference quotient, so the fixture keeps only pairs where every such
/// decision has a clear margin.
pub fn loss_fixture(seed: u64) -> Result<LossFixture> {
    let dims = ModelDims {
        input_dim: 2,
        n_classes: 3,
        hidden: 6,
        feat_dim: 4,
        emp_hidden: 5,
    };
    let ds = make_blobs_pair(40, 3, 2, 1.5, seed)?.standardized();
    let p = init_model(dims, seed)?;
    let mut rng = rng_from_seed(seed ^ 0x00c0_ffee);
    let n = ds.n_source().min(ds.n_target());
    let lam_all = RatioVector::new((0..n).map(|_| rng.random_range(2..9) as f64 / 10.0).collect())?;
    let all: Vec<usize> = (0..n).collect();
    let full = ds.batch(&all, &all)?;
    let pairs = build_contrastive_pairs(&full, &lam_all, FIXTURE_OMEGA, &vec![true; n])?;
    let views = make_views_with(&full, FIXTURE_LAM_P, all.clone())?;
    let per_row = [
        row_gaps(&p.logits(&full.xt)?),
        row_gaps(&p.logits(&pairs.x_sd)?),
        row_gaps(&p.logits(&pairs.x_td)?),
        row_gaps(&summed_probs(&p, &views)?),
    ];
    // x_sd and x_td only hold kept rows; λ in [0.2, 0.8] with ω = 0.1 keeps all.
    let clear: Vec<usize> = (0..n)
        .filter(|&i| pairs.len() == n && per_row.iter().all(|g| g[i] > 1e-3))
        .collect();
    for w in clear.windows(FIXTURE_ROWS) {
        let batch = ds.batch(w, w)?;
        let views = make_views_with(&batch, FIXTURE_LAM_P, fixture_shuffle())?;
        if row_gaps(&summed_probs(&p, &views)?).iter().all(|&g| g > 1e-3) {
            return Ok(LossFixture {
                params: p,
                batch,
                lam: lam_all.select(w),
            });
        }
    }
    Err(crate::error::Error::contract("no clear-cut window of pairs for the fixture"))
}

fn fixture_shuffle() -> Vec<usize> {
    let mut s: Vec<usize> = (0..FIXTURE_ROWS).collect();
    s.rotate_left(1);
    s
}

/// Gradient reports for the EMP-learner entropy (φ), the EMP-Mixup loss,
/// the contrastive loss and the consensus loss (θ).
pub fn loss_checks(seed: u64, h: f64) -> Result<Vec<(&'static str, GradReport)>> {
    let LossFixture { params: p, batch, lam } = loss_fixture(seed)?;
    let yt_hat = p.pseudo_labels(&batch.xt)?;
    let pairs = build_contrastive_pairs(&batch, &lam, FIXTURE_OMEGA, &[true; FIXTURE_ROWS])?;
    let views = make_views_with(&batch, FIXTURE_LAM_P, fixture_shuffle())?;
    Ok(vec![
        ("emp_learner", check_objective(&p, Group::Phi, |q| emp_learner_loss(q, &batch), h)?),
        ("emp_mixup", check_objective(&p, Group::Theta, |q| emp_mixup_loss(q, &batch, &lam), h)?),
        (
            "contrastive",
            check_objective(
                &p,
                Group::Theta,
                |q| Ok(contrastive_loss(q, &pairs, &batch.ys, &yt_hat)?.objective),
                h,
            )?,
        ),
        (
            "consensus",
            check_objective(&p, Group::Theta, |q| Ok(consensus_loss(q, &views, FIXTURE_BETA)?.objective), h)?,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let f = |x: &[f64]| x[0] * x[0] * x[0] + 2.0 * x[1];
        let r = check_gradient(f, &[1.5, -0.3], &[3.0 * 1.5 * 1.5, 2.0], DEFAULT_STEP);
        assert!(r.passes(1e-8), "{r:?}");
    }

    #[test]
    fn random_graphs_match() {
        for seed in 0..10 {
            let r = random_graph(seed).check(DEFAULT_STEP).unwrap();
            assert!(r.passes(1e-4), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn objectives_match() {
        for (name, r) in loss_checks(3, DEFAULT_STEP).unwrap() {
            assert!(r.passes(1e-4), "{name}: {r:?}");
            assert!(r.max_abs_error < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = check_gradient(f, &[2.0], &[3.0], DEFAULT_STEP);
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst, 0);
    }
}
