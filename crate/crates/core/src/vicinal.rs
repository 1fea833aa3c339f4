//! Inter-domain mixup and the EMP-Mixup minimax.
//!
//! Every ratio in this crate is the fraction of the TARGET instance in a
//! mix: `x = (1 − λ)·x_s + λ·x_t`, `y = (1 − λ)·y_s + λ·ŷ_t`.
//!
//! The EMP-learner `g` maps a pair of features to logits over the 11-point
//! [`RatioGrid`]. It is trained to maximise the prediction entropy of the
//! mix it proposes ([`emp_learner_loss`]); because a hard argmax carries no
//! gradient, that objective mixes at the expected grid ratio
//! ([`emp_soft`]). The classifier is then trained on the mix at the hard
//! argmax ratio ([`emp_argmax`], [`emp_mixup_loss`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::domains::DomainBatch;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Group, ModelParams, RatioGrid, GRID_SIZE};
use crate::objective::Objective;
use crate::tensor::{row_entropies, Tape, Tensor, Var};

/// Per-pair mixup ratios, each the target fraction of its mix.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector(Vec<f64>);

impl RatioVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::contract(format!("ratio {v} at pair {i} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn filled(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn select(&self, idx: &[usize]) -> RatioVector {
        RatioVector(idx.iter().map(|&i| self.0[i]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.0.len()], self.0.clone()).expect("1-d")
    }
}

/// Mixed inputs, soft labels and the ratios that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct VicinalBatch {
    pub x_mix: Tensor,
    pub y_mix: Tensor,
    pub lam: RatioVector,
}

fn check_pairs(op: &'static str, a: &Tensor, b: &Tensor, lam: &RatioVector) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if lam.len() != a.rows() {
        return Err(Error::shape(op, format!("{} ratios for {} rows", lam.len(), a.rows())));
    }
    Ok(())
}

/// Row `i` is `(1 − λ_i)·xs_i + λ_i·xt_i`.
pub fn mix(xs: &Tensor, xt: &Tensor, lam: &RatioVector) -> Result<Tensor> {
    check_pairs("mix", xs, xt, lam)?;
    let mut tape = Tape::new();
    let (a, b, l) = (tape.constant(xs), tape.constant(xt), tape.constant(&lam.to_tensor()));
    let x = tape.mix_rows(a, b, l)?;
    Ok(tape.tensor(x))
}

/// Row `i` is `(1 − λ_i)·ys_i + λ_i·ŷt_i`.
pub fn mix_labels(ys: &Tensor, yt_hat: &Tensor, lam: &RatioVector) -> Result<Tensor> {
    check_pairs("mix_labels", ys, yt_hat, lam)?;
    let n = ys.cols();
    let mut out = vec![0.0; ys.len()];
    for (i, &l) in lam.values().iter().enumerate() {
        for j in 0..n {
            out[i * n + j] = (1.0 - l) * ys.at(i, j) + l * yt_hat.at(i, j);
        }
    }
    Tensor::new(ys.shape(), out)
}

pub fn vicinal_batch(batch: &DomainBatch, yt_hat: &Tensor, lam: RatioVector) -> Result<VicinalBatch> {
    Ok(VicinalBatch {
        x_mix: mix(&batch.xs, &batch.xt, &lam)?,
        y_mix: mix_labels(&batch.ys, yt_hat, &lam)?,
        lam,
    })
}

/// Prediction entropy of every pair at every grid ratio, `[pair][k]`.
pub fn grid_entropies(p: &ModelParams, batch: &DomainBatch, grid: &RatioGrid) -> Result<Vec<[f64; GRID_SIZE]>> {
    let m = batch.len();
    let mut out = vec![[0.0; GRID_SIZE]; m];
    for (k, &g) in grid.values().iter().enumerate() {
        let x = mix(&batch.xs, &batch.xt, &RatioVector::filled(m, g)?)?;
        let z = p.logits(&x)?;
        for (i, h) in row_entropies(z.data(), m, z.cols()).into_iter().enumerate() {
            out[i][k] = h;
        }
    }
    Ok(out)
}

/// Exhaustive per-pair search for the entropy-maximising grid ratio.
/// Ties resolve to the lower ratio.
pub fn brute_force_emp(p: &ModelParams, batch: &DomainBatch, grid: &RatioGrid) -> Result<RatioVector> {
    let ent = grid_entropies(p, batch, grid)?;
    RatioVector::new(ent.iter().map(|row| grid.get(math::argmax(row))).collect())
}

/// Records `λ = softmax(g(f(xs) ⊕ f(xt)))·grid` on `tape`. The features are
/// detached, so only φ can receive gradient through this path.
fn emp_soft_var(
    tape: &mut Tape,
    bound: &mut crate::model::BoundModel<'_>,
    xs: Var,
    xt: Var,
    grid: &RatioGrid,
) -> Result<Var> {
    let zs = bound.encode(tape, xs)?;
    let zt = bound.encode(tape, xt)?;
    let (zs, zt) = (tape.detach(zs), tape.detach(zt));
    let logits = bound.emp_forward(tape, zs, zt)?;
    let probs = tape.softmax(logits)?;
    let col = tape.constant(&grid.column());
    let lam = tape.matmul(probs, col)?;
    let m = tape.shape(lam)[0];
    tape.reshape(lam, &[m])
}

/// Expected grid ratio under the EMP-learner's distribution, per pair.
pub fn emp_soft(p: &ModelParams, batch: &DomainBatch) -> Result<RatioVector> {
    let mut tape = Tape::new();
    let mut bound = p.bind(&[]);
    let (xs, xt) = (tape.constant(&batch.xs), tape.constant(&batch.xt));
    let lam = emp_soft_var(&mut tape, &mut bound, xs, xt, &RatioGrid::default())?;
    // Rounding can push a saturated expectation a hair past the ends.
    RatioVector::new(tape.value(lam).iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// EMP-learner grid logits for every pair, `[m×11]`.
pub fn emp_logits(p: &ModelParams, batch: &DomainBatch) -> Result<Tensor> {
    let zs = p.encode(&batch.xs)?;
    let zt = p.encode(&batch.xt)?;
    p.emp_forward(&zs, &zt)
}

/// Hard argmax of the grid logits (ties to the lower ratio); no gradient.
pub fn emp_argmax(p: &ModelParams, batch: &DomainBatch) -> Result<RatioVector> {
    let grid = RatioGrid::default();
    let logits = emp_logits(p, batch)?;
    RatioVector::new(logits.argmax_rows().into_iter().map(|k| grid.get(k)).collect())
}

/// Mean prediction entropy of `h(f(mix(xs, xt, emp_soft)))`.
///
/// This is the quantity the EMP-learner MAXIMISES; θ is recorded as a
/// constant so the objective only routes gradient to φ.
pub fn emp_learner_loss(p: &ModelParams, batch: &DomainBatch) -> Result<Objective> {
    let mut tape = Tape::new();
    let mut bound = p.bind(&[Group::Phi]);
    let (xs, xt) = (tape.constant(&batch.xs), tape.constant(&batch.xt));
    let lam = emp_soft_var(&mut tape, &mut bound, xs, xt, &RatioGrid::default())?;
    let x_mix = tape.mix_rows(xs, xt, lam)?;
    let z = bound.logits(&mut tape, x_mix)?;
    let h = tape.entropy(z)?;
    Ok(Objective::new(tape, h, bound.finish()))
}

/// Cross-entropy of `h(f(x̃))` at the fixed ratios `lam_star` against
/// `mix_labels(ys, pseudo_labels(xt), lam_star)`. Gradient reaches θ only.
pub fn emp_mixup_loss(p: &ModelParams, batch: &DomainBatch, lam_star: &RatioVector) -> Result<Objective> {
    let yt_hat = p.pseudo_labels(&batch.xt)?;
    let vb = vicinal_batch(batch, &yt_hat, lam_star.clone())?;
    let mut tape = Tape::new();
    let mut bound = p.bind(&[Group::Theta]);
    let x = tape.constant(&vb.x_mix);
    let z = bound.logits(&mut tape, x)?;
    let loss = tape.cross_entropy(z, &vb.y_mix)?;
    Ok(Objective::new(tape, loss, bound.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelDims};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let xs = t(&[&[2.0, 0.0], &[0.3, -1.7], &[0.1, 0.2]]);
        let xt = t(&[&[0.0, 2.0], &[9.1, 4.4], &[0.7, -0.6]]);
        let lam = RatioVector::new(vec![0.5, 0.0, 1.0]).unwrap();
        let x = mix(&xs, &xt, &lam).unwrap();
        assert_eq!(x.row(0), &[1.0, 1.0]);
        assert_eq!(x.row(1), xs.row(1));
        assert_eq!(x.row(2), xt.row(2));
    }

    #[test]
    fn ratio_out_of_range_is_rejected() {
        assert!(matches!(RatioVector::new(vec![0.2, 1.01]), Err(Error::Contract(_))));
        assert!(RatioVector::new(vec![-1e-9]).is_err());
        assert!(RatioVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn label_mixing() {
        let ys = Tensor::one_hot(&[0, 1, 2], 3).unwrap();
        let yt = Tensor::one_hot(&[2, 1, 0], 3).unwrap();
        let y = mix_labels(&ys, &yt, &RatioVector::new(vec![0.3, 0.8, 0.0]).unwrap()).unwrap();
        assert_eq!(y.row(0), &[0.7, 0.0, 0.3]);
        assert_eq!(y.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(y.row(2), ys.row(2));
    }

    #[test]
    fn mixed_label_rows_sum_to_one() {
        let ys = Tensor::one_hot(&[0], 2).unwrap();
        let yt = Tensor::one_hot(&[1], 2).unwrap();
        for k in 0..=1000 {
            let l = k as f64 / 1000.0;
            let y = mix_labels(&ys, &yt, &RatioVector::new(vec![l]).unwrap()).unwrap();
            assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    fn batch() -> DomainBatch {
        let xs = t(&[&[0.5, -1.0], &[1.5, 0.2], &[-0.4, 0.9]]);
        let xt = t(&[&[1.0, 1.0], &[-2.0, 0.3], &[0.0, -0.8]]);
        DomainBatch::new(xs, Tensor::one_hot(&[0, 1, 0], 2).unwrap(), xt).unwrap()
    }

    fn model() -> ModelParams {
        init_model(
            ModelDims {
                input_dim: 2,
                n_classes: 2,
                hidden: 6,
                feat_dim: 4,
                emp_hidden: 5,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn constant_entropy_resolves_to_zero() {
        let mut p = model();
        for w in p.group_mut(Group::Theta) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let lam = brute_force_emp(&p, &batch(), &RatioGrid::default()).unwrap();
        assert_eq!(lam.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn emp_argmax_reads_peak() {
        let mut p = model();
        for w in p.group_mut(Group::Phi) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.emp_out.bias.data_mut()[7] = 3.0;
        let lam = emp_argmax(&p, &batch()).unwrap();
        assert_eq!(lam.values(), &[0.7, 0.7, 0.7]);
        // two equal peaks: lower index wins
        p.emp_out.bias.data_mut()[4] = 3.0;
        assert_eq!(emp_argmax(&p, &batch()).unwrap().values(), &[0.4, 0.4, 0.4]);
    }

    #[test]
    fn emp_soft_uniform_and_saturated() {
        let mut p = model();
        for w in p.group_mut(Group::Phi) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for v in emp_soft(&p, &batch()).unwrap().values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        p.emp_out.bias.data_mut()[3] = 800.0;
        for v in emp_soft(&p, &batch()).unwrap().values() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn emp_learner_loss_only_touches_phi() {
        let mut p = model();
        let obj = emp_learner_loss(&p, &batch()).unwrap();
        obj.backward_into(&mut p, -1.0).unwrap();
        assert!(p.group_mut(Group::Theta).iter().all(|t| t.grad().is_none()));
        assert!(p.group_mut(Group::Phi).iter().all(|t| t.grad().is_some()));
    }

    #[test]
    fn emp_mixup_loss_only_touches_theta() {
        let mut p = model();
        let lam = RatioVector::new(vec![0.1, 0.5, 0.9]).unwrap();
        let obj = emp_mixup_loss(&p, &batch(), &lam).unwrap();
        obj.backward_into(&mut p, 1.0).unwrap();
        assert!(p.group_mut(Group::Theta).iter().all(|t| t.grad().is_some()));
        assert!(p.group_mut(Group::Phi).iter().all(|t| t.grad().is_none()));
    }

    #[test]
    fn uniform_predictions_plateau() {
        let mut p = model();
        for w in p.group_mut(Group::Theta) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let obj = emp_learner_loss(&p, &batch()).unwrap();
        assert!((obj.value() - libm::log(2.0)).abs() < 1e-15);
        obj.backward_into(&mut p, 1.0).unwrap();
        for w in p.group_mut(Group::Phi) {
            assert!(w.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
        }
    }

    #[test]
    fn pure_source_limit_is_supervised_ce() {
        let p = model();
        let b = batch();
        let obj = emp_mixup_loss(&p, &b, &RatioVector::filled(3, 0.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&p.logits(&b.xs).unwrap());
        let ce = tape.cross_entropy(z, &b.ys).unwrap();
        assert_eq!(obj.value(), tape.scalar(ce));
    }

    #[test]
    fn pure_target_limit_is_self_training() {
        let p = model();
        let b = batch();
        let obj = emp_mixup_loss(&p, &b, &RatioVector::filled(3, 1.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&p.logits(&b.xt).unwrap());
        let ce = tape.cross_entropy(z, &p.pseudo_labels(&b.xt).unwrap()).unwrap();
        assert_eq!(obj.value(), tape.scalar(ce));
        assert!(obj.value() >= 0.0);
    }
}
