//! Source-only warm-up followed by the four-phase adaptation step.
//!
//! Each adaptation step runs, in order and with its own backward pass and
//! optimizer step:
//!
//! 1. φ ascent on the EMP-learner entropy, θ frozen;
//! 2. θ descent on the mixup loss at the hard EMP ratios `λ*`;
//! 3. θ descent on the contrastive loss around `λ*`;
//! 4. θ descent on the consensus loss.
//!
//! `λ*` is read once per step, before phase 1. Nothing here does IO; the
//! caller receives every [`MetricsRow`] through a callback.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::consensus::{consensus_loss, make_views};
use crate::contrastive::{build_contrastive_pairs_within, confidence_mask, contrastive_loss, top1_probs, SpaceBounds};
use crate::domains::{make_blobs_pair, make_two_moons_pair, rng_from_seed, DomainBatch, DomainPairDataset, EpochSampler, Rng};
use crate::error::{Error, Result};
use crate::model::{init_model, Group, ModelDims, ModelParams};
use crate::objective::Objective;
use crate::optim::Sgd;
use crate::tensor::Tape;
use crate::vicinal::{emp_argmax, emp_learner_loss, emp_mixup_loss};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    TwoMoons {
        n_per_domain: usize,
        rotation_deg: f64,
        noise_std: f64,
    },
    Blobs {
        n_per_domain: usize,
        n_classes: usize,
        dim: usize,
        shift: f64,
    },
}

impl DatasetSpec {
    /// Generates the raw (unstandardised) domain pair.
    pub fn generate(&self, seed: u64) -> Result<DomainPairDataset> {
        match *self {
            DatasetSpec::TwoMoons {
                n_per_domain,
                rotation_deg,
                noise_std,
            } => make_two_moons_pair(n_per_domain, rotation_deg, noise_std, seed),
            DatasetSpec::Blobs {
                n_per_domain,
                n_classes,
                dim,
                shift,
            } => make_blobs_pair(n_per_domain, n_classes, dim, shift, seed),
        }
    }
}

/// How the θ losses of one step are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// One backward pass and optimizer step per loss.
    PerLoss,
    /// The weighted losses are evaluated at the same θ and applied in one step.
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr / (1 + 10·progress)^0.75` over the adaptation epochs.
    Annealed,
}

/// Source fraction used by the consensus views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LamPMode {
    Fixed,
    /// Capped per batch so the views stay beyond the contrastive band:
    /// `min(lam_p, 1 − mean(λ*) − ω)`, floored at zero.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub covi_epochs: usize,
    /// θ learning rate during adaptation.
    pub lr: f64,
    pub warmup_lr: f64,
    pub phi_lr: f64,
    pub momentum: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lam_p: f64,
    pub lam_p_mode: LamPMode,
    pub w_emp: f64,
    pub w_ct: f64,
    pub w_cs: f64,
    /// Adaptation epochs that run with `w_ct = w_cs = 0` before the
    /// contrastive and consensus phases switch on.
    pub delay_epochs: usize,
    pub space_sd: f64,
    pub space_td: f64,
    pub update_mode: UpdateMode,
    pub lr_schedule: LrSchedule,
    pub hidden: usize,
    pub feat_dim: usize,
    pub emp_hidden: usize,
    /// Checkpoint every this many adaptation epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::TwoMoons {
                n_per_domain: 1000,
                rotation_deg: 40.0,
                noise_std: 0.05,
            },
            batch_size: 64,
            warmup_epochs: 30,
            covi_epochs: 30,
            lr: 0.01,
            warmup_lr: 0.01,
            phi_lr: 0.01,
            momentum: 0.9,
            omega: 0.1,
            alpha: 2.0,
            beta: 2.0,
            lam_p: 0.1,
            lam_p_mode: LamPMode::Fixed,
            w_emp: 1.0,
            w_ct: 1.0,
            w_cs: 1.0,
            delay_epochs: 5,
            space_sd: 0.0,
            space_td: 1.0,
            update_mode: UpdateMode::PerLoss,
            lr_schedule: LrSchedule::Constant,
            hidden: 64,
            feat_dim: 32,
            emp_hidden: 32,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr), ("phi_lr", self.phi_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.omega > 0.0 && self.omega < 0.5) {
            return bad(format!("omega {} outside (0, 0.5)", self.omega));
        }
        if !(0.0..=0.5).contains(&self.lam_p) {
            return bad(format!("lam_p {} outside [0, 0.5]", self.lam_p));
        }
        for (name, w) in [("w_emp", self.w_emp), ("w_ct", self.w_ct), ("w_cs", self.w_cs)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be >= 0, got {w}"));
            }
        }
        if !(0.0 <= self.space_sd && self.space_sd <= self.space_td && self.space_td <= 1.0) {
            return bad(format!("space bounds [{}, {}] not within [0, 1]", self.space_sd, self.space_td));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite".into());
        }
        if self.hidden == 0 || self.feat_dim == 0 || self.emp_hidden == 0 {
            return bad("layer widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_dims(&self, ds: &DomainPairDataset) -> ModelDims {
        ModelDims {
            input_dim: ds.input_dim(),
            n_classes: ds.n_classes(),
            hidden: self.hidden,
            feat_dim: self.feat_dim,
            emp_hidden: self.emp_hidden,
        }
    }

    /// The standardised training dataset.
    pub fn build_dataset(&self) -> Result<DomainPairDataset> {
        Ok(self.dataset.generate(self.seed)?.standardized())
    }
}

/// One row of training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// `R_λ*(θ) − R_λ(φ)`.
    pub r_emp: f64,
    pub r_ct: f64,
    pub r_cs: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub mean_lambda_star: f64,
    pub contrastive_keep_rate: f64,
    pub consensus_keep_rate: f64,
    pub agreement_rate: f64,
}

/// Everything a step produced besides the accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mixup loss at `λ*`, before the θ update.
    pub r_lambda_star: f64,
    /// EMP-learner entropy, before the φ update.
    pub r_lambda: f64,
    pub r_ct: f64,
    pub r_cs: f64,
    pub mean_lambda_star: f64,
    pub contrastive_keep_rate: f64,
    pub consensus_keep_rate: f64,
    pub agreement_rate: f64,
}

/// Argmax accuracy against one-hot labels.
pub fn accuracy(p: &ModelParams, x: &crate::tensor::Tensor, y: &crate::tensor::Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let pred = p.logits(x)?.argmax_rows();
    let truth = y.argmax_rows();
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / x.rows() as f64)
}

/// `(source accuracy, target accuracy)`; target labels are used here only.
pub fn evaluate(p: &ModelParams, ds: &DomainPairDataset) -> Result<(f64, f64)> {
    Ok((
        accuracy(p, ds.source_x(), ds.source_y())?,
        accuracy(p, ds.target_x(), ds.target_labels_for_eval())?,
    ))
}

fn finite(v: f64, what: &'static str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, step })
    }
}

fn apply(obj: &Objective, p: &mut ModelParams, opt: &mut Sgd, group: Group, scale: f64) -> Result<()> {
    if obj.is_empty() || scale == 0.0 {
        return Ok(());
    }
    p.zero_grad();
    obj.backward_into(p, scale)?;
    opt.step(&mut p.group_mut(group))
}

/// Source fraction of the consensus views for this batch.
pub fn effective_lam_p(cfg: &TrainConfig, mean_lambda_star: f64) -> f64 {
    match cfg.lam_p_mode {
        LamPMode::Fixed => cfg.lam_p,
        LamPMode::Adaptive => cfg.lam_p.min(1.0 - mean_lambda_star - cfg.omega).max(0.0),
    }
}

/// One adaptation step on `batch`. `step` only labels errors.
pub fn covi_step(
    p: &mut ModelParams,
    batch: &DomainBatch,
    cfg: &TrainConfig,
    opt_theta: &mut Sgd,
    opt_phi: &mut Sgd,
    rng: &mut Rng,
    step: usize,
) -> Result<StepStats> {
    let lam_star = emp_argmax(p, batch)?;

    // 1. φ ascent; θ is a constant inside the objective.
    let ent = emp_learner_loss(p, batch)?;
    let r_lambda = finite(ent.value(), "emp_learner_loss", step)?;
    apply(&ent, p, opt_phi, Group::Phi, -1.0)?;

    let bounds = SpaceBounds {
        sd_min: cfg.space_sd,
        td_max: cfg.space_td,
    };
    let lam_p = effective_lam_p(cfg, lam_star.mean());
    // Drawn unconditionally so the random stream does not depend on weights.
    let views = make_views(batch, lam_p, rng)?;

    let stats = match cfg.update_mode {
        UpdateMode::PerLoss => {
            let mix = emp_mixup_loss(p, batch, &lam_star)?;
            let r_lambda_star = finite(mix.value(), "emp_mixup_loss", step)?;
            apply(&mix, p, opt_theta, Group::Theta, cfg.w_emp)?;

            let yt_hat = p.pseudo_labels(&batch.xt)?;
            let mask = confidence_mask(&top1_probs(p, &batch.xt)?, cfg.alpha);
            let pairs = build_contrastive_pairs_within(batch, &lam_star, cfg.omega, &mask, bounds)?;
            let ct = contrastive_loss(p, &pairs, &batch.ys, &yt_hat)?;
            let r_ct = finite(ct.objective.value(), "contrastive_loss", step)?;
            apply(&ct.objective, p, opt_theta, Group::Theta, cfg.w_ct)?;

            let cs = consensus_loss(p, &views, cfg.beta)?;
            let r_cs = finite(cs.objective.value(), "consensus_loss", step)?;
            apply(&cs.objective, p, opt_theta, Group::Theta, cfg.w_cs)?;

            StepStats {
                r_lambda_star,
                r_lambda,
                r_ct,
                r_cs,
                mean_lambda_star: lam_star.mean(),
                contrastive_keep_rate: pairs.len() as f64 / batch.len() as f64,
                consensus_keep_rate: cs.keep_rate,
                agreement_rate: ct.agreement_rate,
            }
        }
        UpdateMode::Summed => {
            let mix = emp_mixup_loss(p, batch, &lam_star)?;
            let yt_hat = p.pseudo_labels(&batch.xt)?;
            let mask = confidence_mask(&top1_probs(p, &batch.xt)?, cfg.alpha);
            let pairs = build_contrastive_pairs_within(batch, &lam_star, cfg.omega, &mask, bounds)?;
            let ct = contrastive_loss(p, &pairs, &batch.ys, &yt_hat)?;
            let cs = consensus_loss(p, &views, cfg.beta)?;
            let r_lambda_star = finite(mix.value(), "emp_mixup_loss", step)?;
            let r_ct = finite(ct.objective.value(), "contrastive_loss", step)?;
            let r_cs = finite(cs.objective.value(), "consensus_loss", step)?;
            let parts = [(&mix, cfg.w_emp), (&ct.objective, cfg.w_ct), (&cs.objective, cfg.w_cs)];
            if parts.iter().any(|(o, w)| !o.is_empty() && *w > 0.0) {
                p.zero_grad();
                for (obj, w) in parts {
                    if !obj.is_empty() && w > 0.0 {
                        obj.backward_into(p, w)?;
                    }
                }
                let mut theta = p.group_mut(Group::Theta);
                // A skipped loss leaves no buffer; fill with zeros so the
                // optimizer sees every tensor.
                for t in theta.iter_mut() {
                    if t.grad().is_none() {
                        let zeros = alloc::vec![0.0; t.len()];
                        t.accumulate_grad(&zeros)?;
                    }
                }
                opt_theta.step(&mut theta)?;
            }
            StepStats {
                r_lambda_star,
                r_lambda,
                r_ct,
                r_cs,
                mean_lambda_star: lam_star.mean(),
                contrastive_keep_rate: pairs.len() as f64 / batch.len() as f64,
                consensus_keep_rate: cs.keep_rate,
                agreement_rate: ct.agreement_rate,
            }
        }
    };
    Ok(stats)
}

/// Mixes `seed` and `epoch` into an independent stream seed (splitmix64).
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Resumable trainer state: parameters, optimizer velocities, counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ModelParams,
    pub theta_velocity: Vec<Vec<f64>>,
    pub phi_velocity: Vec<Vec<f64>>,
    /// Epochs completed, warm-up included.
    pub epochs_done: usize,
    /// Adaptation steps completed.
    pub steps_done: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    data: DomainPairDataset,
    params: ModelParams,
    opt_theta: Sgd,
    opt_phi: Sgd,
    epochs_done: usize,
    steps_done: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.build_dataset()?;
        let params = init_model(cfg.model_dims(&data), cfg.seed)?;
        Ok(Self {
            opt_theta: Sgd::new(cfg.warmup_lr, cfg.momentum)?,
            opt_phi: Sgd::new(cfg.phi_lr, cfg.momentum)?,
            cfg,
            data,
            params,
            epochs_done: 0,
            steps_done: 0,
        })
    }

    /// Rebuilds a trainer mid-run from a saved state.
    pub fn resume(cfg: TrainConfig, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if state.params.dims() != t.params.dims() {
            return Err(Error::Checkpoint(format!(
                "checkpoint dims {:?} do not match config {:?}",
                state.params.dims(),
                t.params.dims()
            )));
        }
        t.params = state.params;
        t.opt_theta.set_velocity(state.theta_velocity);
        t.opt_phi.set_velocity(state.phi_velocity);
        t.epochs_done = state.epochs_done;
        t.steps_done = state.steps_done;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            params: self.params.clone(),
            theta_velocity: self.opt_theta.velocity().to_vec(),
            phi_velocity: self.opt_phi.velocity().to_vec(),
            epochs_done: self.epochs_done,
            steps_done: self.steps_done,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &DomainPairDataset {
        &self.data
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn warmup_finished(&self) -> bool {
        self.epochs_done >= self.cfg.warmup_epochs
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.cfg.warmup_epochs + self.cfg.covi_epochs
    }

    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(&self.params, &self.data)
    }

    fn epoch_rng(&self) -> Rng {
        rng_from_seed(epoch_seed(self.cfg.seed, self.epochs_done as u64))
    }

    /// Trains θ on source cross-entropy for every warm-up epoch. φ is untouched.
    pub fn warmup(&mut self) -> Result<()> {
        if self.cfg.warmup_epochs == 0 {
            return Err(Error::contract("warm-up needs at least one epoch"));
        }
        while !self.warmup_finished() {
            let mut rng = self.epoch_rng();
            let mut sampler = EpochSampler::new(&self.data, self.cfg.batch_size, &mut rng)?;
            while let Some((s, _)) = sampler.next_indices(&mut rng) {
                let xs = self.data.source_x().select_rows(&s);
                let ys = self.data.source_y().select_rows(&s);
                let mut tape = Tape::new();
                let mut bound = self.params.bind(&[Group::Theta]);
                let x = tape.constant(&xs);
                let z = bound.logits(&mut tape, x)?;
                let loss = tape.cross_entropy(z, &ys)?;
                finite(tape.scalar(loss), "warmup_loss", 0)?;
                let obj = Objective::new(tape, loss, bound.finish());
                apply(&obj, &mut self.params, &mut self.opt_theta, Group::Theta, 1.0)?;
            }
            self.epochs_done += 1;
        }
        // The adaptation phase starts from fresh momentum.
        self.opt_theta = Sgd::new(self.cfg.lr, self.cfg.momentum)?;
        Ok(())
    }

    fn scheduled_lr(&self, base: f64) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Annealed => {
                let done = self.epochs_done.saturating_sub(self.cfg.warmup_epochs) as f64;
                let progress = done / self.cfg.covi_epochs.max(1) as f64;
                base / libm::pow(1.0 + 10.0 * progress, 0.75)
            }
        }
    }

    /// Runs one adaptation epoch, handing every row to `sink`.
    pub fn covi_epoch(&mut self, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        if !self.warmup_finished() {
            return Err(Error::contract("adaptation requested before warm-up finished"));
        }
        self.opt_theta.set_lr(self.scheduled_lr(self.cfg.lr));
        self.opt_phi.set_lr(self.scheduled_lr(self.cfg.phi_lr));
        let mut cfg = self.cfg.clone();
        if self.epochs_done < cfg.warmup_epochs + cfg.delay_epochs {
            cfg.w_ct = 0.0;
            cfg.w_cs = 0.0;
        }
        let mut rng = self.epoch_rng();
        let mut sampler = EpochSampler::new(&self.data, cfg.batch_size, &mut rng)?;
        while let Some((s, t)) = sampler.next_indices(&mut rng) {
            let batch = self.data.batch(&s, &t)?;
            let stats = covi_step(
                &mut self.params,
                &batch,
                &cfg,
                &mut self.opt_theta,
                &mut self.opt_phi,
                &mut rng,
                self.steps_done,
            )?;
            let (source_acc, target_acc) = self.evaluate()?;
            let row = MetricsRow {
                step: self.steps_done,
                r_emp: stats.r_lambda_star - stats.r_lambda,
                r_ct: stats.r_ct,
                r_cs: stats.r_cs,
                source_acc,
                target_acc,
                mean_lambda_star: stats.mean_lambda_star,
                contrastive_keep_rate: stats.contrastive_keep_rate,
                consensus_keep_rate: stats.consensus_keep_rate,
                agreement_rate: stats.agreement_rate,
            };
            self.steps_done += 1;
            sink(&row)?;
        }
        self.epochs_done += 1;
        Ok(())
    }

    /// Runs every remaining adaptation epoch.
    pub fn run_covi(&mut self, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        while !self.finished() {
            self.covi_epoch(sink)?;
        }
        Ok(())
    }

    /// φ-only training with θ frozen, for `epochs` passes over the data.
    pub fn train_emp_learner(&mut self, epochs: usize) -> Result<()> {
        for e in 0..epochs {
            let mut rng = rng_from_seed(epoch_seed(self.cfg.seed ^ 0x005e_ed0f_e3a1, e as u64));
            let mut sampler = EpochSampler::new(&self.data, self.cfg.batch_size, &mut rng)?;
            while let Some((s, t)) = sampler.next_indices(&mut rng) {
                let batch = self.data.batch(&s, &t)?;
                let ent = emp_learner_loss(&self.params, &batch)?;
                finite(ent.value(), "emp_learner_loss", e)?;
                apply(&ent, &mut self.params, &mut self.opt_phi, Group::Phi, -1.0)?;
            }
        }
        Ok(())
    }
}

/// Source-only warm-up of `p` on `ds` (already standardised).
pub fn warmup(p: &ModelParams, ds: &DomainPairDataset, cfg: &TrainConfig) -> Result<ModelParams> {
    if cfg.warmup_epochs == 0 {
        return Err(Error::contract("warm-up needs at least one epoch"));
    }
    let mut t = Trainer {
        cfg: cfg.clone(),
        data: ds.clone(),
        params: p.clone(),
        opt_theta: Sgd::new(cfg.warmup_lr, cfg.momentum)?,
        opt_phi: Sgd::new(cfg.phi_lr, cfg.momentum)?,
        epochs_done: 0,
        steps_done: 0,
    };
    t.warmup()?;
    Ok(t.params)
}
