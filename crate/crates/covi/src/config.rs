//! `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and unparsable values are usage errors that name the token.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use covi_core::trainer::{DatasetSpec, LamPMode, LrSchedule, TrainConfig, UpdateMode};

use crate::error::CliError;

/// How the fixed sweep pairs are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSampling {
    Random,
    /// Only pairs whose source and target labels differ.
    CrossClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Checkpoint read by `eval` and `sweep`; defaults to `final.ckpt` in the out dir.
    pub checkpoint: Option<PathBuf>,
    pub before_checkpoint: Option<PathBuf>,
    pub after_checkpoint: Option<PathBuf>,
    /// Checkpoint `train` continues from.
    pub resume: Option<PathBuf>,
    pub sweep_samples: usize,
    pub sweep_steps: usize,
    pub sweep_pairs: PairSampling,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            before_checkpoint: None,
            after_checkpoint: None,
            resume: None,
            sweep_samples: covi_core::diagnostics::DEFAULT_SWEEP_SAMPLES,
            sweep_steps: 20,
            sweep_pairs: PairSampling::CrossClass,
        }
    }
}

/// Dataset keys are collected flat and assembled once every line is read,
/// so `dataset = blobs` may come after `shift = 3`.
#[derive(Debug, Clone, PartialEq)]
struct DatasetKeys {
    kind: String,
    n_per_domain: usize,
    rotation_deg: f64,
    noise_std: f64,
    n_classes: usize,
    dim: usize,
    shift: f64,
}

impl DatasetKeys {
    fn from_spec(spec: &DatasetSpec) -> Self {
        let mut keys = Self {
            kind: "two_moons".into(),
            n_per_domain: 1000,
            rotation_deg: 40.0,
            noise_std: 0.05,
            n_classes: 3,
            dim: 2,
            shift: 2.0,
        };
        match *spec {
            DatasetSpec::TwoMoons {
                n_per_domain,
                rotation_deg,
                noise_std,
            } => {
                keys.n_per_domain = n_per_domain;
                keys.rotation_deg = rotation_deg;
                keys.noise_std = noise_std;
            }
            DatasetSpec::Blobs {
                n_per_domain,
                n_classes,
                dim,
                shift,
            } => {
                keys.kind = "blobs".into();
                keys.n_per_domain = n_per_domain;
                keys.n_classes = n_classes;
                keys.dim = dim;
                keys.shift = shift;
            }
        }
        keys
    }

    fn spec(&self) -> Result<DatasetSpec, CliError> {
        match self.kind.as_str() {
            "two_moons" => Ok(DatasetSpec::TwoMoons {
                n_per_domain: self.n_per_domain,
                rotation_deg: self.rotation_deg,
                noise_std: self.noise_std,
            }),
            "blobs" => Ok(DatasetSpec::Blobs {
                n_per_domain: self.n_per_domain,
                n_classes: self.n_classes,
                dim: self.dim,
                shift: self.shift,
            }),
            other => Err(CliError::Usage(format!(
                "dataset: unknown value '{other}' (expected two_moons or blobs)"
            ))),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse value '{value}'")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Applies `key = value` lines to settings.
#[derive(Debug, Clone)]
pub struct Builder {
    settings: Settings,
    data: DatasetKeys,
}

impl Default for Builder {
    fn default() -> Self {
        Self::new(Settings::default())
    }
}

impl Builder {
    pub fn new(settings: Settings) -> Self {
        let data = DatasetKeys::from_spec(&settings.train.dataset);
        Self { settings, data }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let s = &mut self.settings;
        let d = &mut self.data;
        match key {
            "dataset" => d.kind = value.into(),
            "n_per_domain" => d.n_per_domain = parse(key, value)?,
            "rotation_deg" => d.rotation_deg = parse(key, value)?,
            "noise_std" => d.noise_std = parse(key, value)?,
            "n_classes" => d.n_classes = parse(key, value)?,
            "dim" => d.dim = parse(key, value)?,
            "shift" => d.shift = parse(key, value)?,
            "batch_size" => s.train.batch_size = parse(key, value)?,
            "warmup_epochs" => s.train.warmup_epochs = parse(key, value)?,
            "covi_epochs" => s.train.covi_epochs = parse(key, value)?,
            "lr" => s.train.lr = parse(key, value)?,
            "warmup_lr" => s.train.warmup_lr = parse(key, value)?,
            "phi_lr" => s.train.phi_lr = parse(key, value)?,
            "momentum" => s.train.momentum = parse(key, value)?,
            "omega" => s.train.omega = parse(key, value)?,
            "alpha" => s.train.alpha = parse(key, value)?,
            "beta" => s.train.beta = parse(key, value)?,
            "lam_p" => s.train.lam_p = parse(key, value)?,
            "lam_p_mode" => {
                s.train.lam_p_mode = match value {
                    "fixed" => LamPMode::Fixed,
                    "adaptive" => LamPMode::Adaptive,
                    _ => return Err(bad_choice(key, value, "fixed, adaptive")),
                }
            }
            "w_emp" => s.train.w_emp = parse(key, value)?,
            "w_ct" => s.train.w_ct = parse(key, value)?,
            "w_cs" => s.train.w_cs = parse(key, value)?,
            "delay_epochs" => s.train.delay_epochs = parse(key, value)?,
            "space_sd" => s.train.space_sd = parse(key, value)?,
            "space_td" => s.train.space_td = parse(key, value)?,
            "update_mode" => {
                s.train.update_mode = match value {
                    "per_loss" => UpdateMode::PerLoss,
                    "summed" => UpdateMode::Summed,
                    _ => return Err(bad_choice(key, value, "per_loss, summed")),
                }
            }
            "lr_schedule" => {
                s.train.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "annealed" => LrSchedule::Annealed,
                    _ => return Err(bad_choice(key, value, "constant, annealed")),
                }
            }
            "hidden" => s.train.hidden = parse(key, value)?,
            "feat_dim" => s.train.feat_dim = parse(key, value)?,
            "emp_hidden" => s.train.emp_hidden = parse(key, value)?,
            "checkpoint_every" => s.train.checkpoint_every = parse(key, value)?,
            "seed" => s.train.seed = parse(key, value)?,
            "out_dir" => s.out_dir = PathBuf::from(value),
            "checkpoint" => s.checkpoint = parse_path(value),
            "before_checkpoint" => s.before_checkpoint = parse_path(value),
            "after_checkpoint" => s.after_checkpoint = parse_path(value),
            "resume" => s.resume = parse_path(value),
            "sweep_samples" => s.sweep_samples = parse(key, value)?,
            "sweep_steps" => s.sweep_steps = parse(key, value)?,
            "sweep_pairs" => {
                s.sweep_pairs = match value {
                    "random" => PairSampling::Random,
                    "cross_class" => PairSampling::CrossClass,
                    _ => return Err(bad_choice(key, value, "random, cross_class")),
                }
            }
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies one `key = value` (or `key=value`) assignment.
    pub fn assign(&mut self, text: &str) -> Result<(), CliError> {
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key = value, got '{text}'")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| CliError::Usage(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Settings, CliError> {
        self.settings.train.dataset = self.data.spec()?;
        self.settings
            .train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.settings.sweep_steps == 0 {
            return Err(CliError::Usage("sweep_steps must be >= 1".into()));
        }
        Ok(self.settings)
    }
}

fn bad_choice(key: &str, value: &str, choices: &str) -> CliError {
    CliError::Usage(format!("{key}: unknown value '{value}' (expected one of {choices})"))
}

pub fn parse_text(text: &str) -> Result<Settings, CliError> {
    let mut b = Builder::default();
    b.apply_text(text)?;
    b.finish()
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Fully resolved settings in config-file syntax. Parsing the output gives
/// back the same settings.
pub fn render(s: &Settings) -> String {
    let t = &s.train;
    let d = DatasetKeys::from_spec(&t.dataset);
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("dataset", d.kind.clone());
    kv("n_per_domain", d.n_per_domain.to_string());
    match t.dataset {
        DatasetSpec::TwoMoons { .. } => {
            kv("rotation_deg", d.rotation_deg.to_string());
            kv("noise_std", d.noise_std.to_string());
        }
        DatasetSpec::Blobs { .. } => {
            kv("n_classes", d.n_classes.to_string());
            kv("dim", d.dim.to_string());
            kv("shift", d.shift.to_string());
        }
    }
    kv("seed", t.seed.to_string());
    kv("batch_size", t.batch_size.to_string());
    kv("warmup_epochs", t.warmup_epochs.to_string());
    kv("covi_epochs", t.covi_epochs.to_string());
    kv("delay_epochs", t.delay_epochs.to_string());
    kv("lr", t.lr.to_string());
    kv("warmup_lr", t.warmup_lr.to_string());
    kv("phi_lr", t.phi_lr.to_string());
    kv("momentum", t.momentum.to_string());
    kv(
        "lr_schedule",
        match t.lr_schedule {
            LrSchedule::Constant => "constant",
            LrSchedule::Annealed => "annealed",
        }
        .into(),
    );
    kv("omega", t.omega.to_string());
    kv("alpha", t.alpha.to_string());
    kv("beta", t.beta.to_string());
    kv("lam_p", t.lam_p.to_string());
    kv(
        "lam_p_mode",
        match t.lam_p_mode {
            LamPMode::Fixed => "fixed",
            LamPMode::Adaptive => "adaptive",
        }
        .into(),
    );
    kv("w_emp", t.w_emp.to_string());
    kv("w_ct", t.w_ct.to_string());
    kv("w_cs", t.w_cs.to_string());
    kv("space_sd", t.space_sd.to_string());
    kv("space_td", t.space_td.to_string());
    kv(
        "update_mode",
        match t.update_mode {
            UpdateMode::PerLoss => "per_loss",
            UpdateMode::Summed => "summed",
        }
        .into(),
    );
    kv("hidden", t.hidden.to_string());
    kv("feat_dim", t.feat_dim.to_string());
    kv("emp_hidden", t.emp_hidden.to_string());
    kv("checkpoint_every", t.checkpoint_every.to_string());
    kv("out_dir", s.out_dir.display().to_string());
    kv("checkpoint", path_value(&s.checkpoint));
    kv("before_checkpoint", path_value(&s.before_checkpoint));
    kv("after_checkpoint", path_value(&s.after_checkpoint));
    kv("resume", path_value(&s.resume));
    kv("sweep_samples", s.sweep_samples.to_string());
    kv("sweep_steps", s.sweep_steps.to_string());
    kv(
        "sweep_pairs",
        match s.sweep_pairs {
            PairSampling::Random => "random",
            PairSampling::CrossClass => "cross_class",
        }
        .into(),
    );
    out
}
