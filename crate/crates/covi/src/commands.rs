//! The five verbs. Every file a command writes goes under `out_dir`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use covi_core::checkpoint;
use covi_core::diagnostics::{
    empirical_emp, equilibrium_report, lambda_sweep_on, uniform_grid, EmpEstimate, EquilibriumReport, SweepPairs,
    SWEEP_SEED,
};
use covi_core::domains::DomainPairDataset;
use covi_core::trainer::{evaluate, Trainer, TrainerState};
use covi_core::ModelParams;

use crate::config::{render, PairSampling, Settings};
use crate::csv::{dataset_csv, read_table, sweep_csv, MetricsWriter};
use crate::error::CliError;
use crate::oracles::{self, Check};

pub const METRICS_FILE: &str = "metrics.csv";
pub const WARMUP_CKPT: &str = "warmup.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Band around 0.5 the equilibrium verdict uses.
pub const EQUILIBRIUM_BAND: f64 = 0.15;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn prepare_out(s: &Settings) -> Result<(), CliError> {
    fs::create_dir_all(&s.out_dir).map_err(|e| CliError::io(&s.out_dir, e))?;
    write_file(&s.out_dir.join("config.txt"), render(s).as_bytes())
}

pub fn load_state(path: &Path) -> Result<TrainerState, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    checkpoint::decode(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_params(path: &Path, ds: &DomainPairDataset, s: &Settings) -> Result<ModelParams, CliError> {
    let p = load_state(path)?.params;
    if p.dims() != s.train.model_dims(ds) {
        return Err(CliError::Runtime(format!(
            "{}: model dims {:?} do not match the configured dataset and widths {:?}",
            path.display(),
            p.dims(),
            s.train.model_dims(ds)
        )));
    }
    Ok(p)
}

fn or_out(path: &Option<PathBuf>, s: &Settings, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| s.out_dir.join(name))
}

/// Summary of a finished `train` run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub source_acc: f64,
    pub target_acc: f64,
    pub warmup_target_acc: Option<f64>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Keeps the metrics rows an interrupted run wrote before `steps_done`, so
/// a resumed run appends to exactly the prefix an unbroken run would have.
fn truncate_metrics(path: &Path, steps_done: usize) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut keep = String::new();
    for (i, line) in text.lines().enumerate() {
        let step: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
        if i == 0 || step.is_some_and(|s| s < steps_done) {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    write_file(path, keep.as_bytes())
}

pub fn train(s: &Settings, log: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    prepare_out(s)?;
    let metrics_path = s.out_dir.join(METRICS_FILE);
    let mut trainer = match &s.resume {
        Some(path) => Trainer::resume(s.train.clone(), load_state(path)?)?,
        None => Trainer::new(s.train.clone())?,
    };
    let fresh = s.resume.is_none() || !metrics_path.exists();
    if !fresh {
        truncate_metrics(&metrics_path, trainer.steps_done())?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = MetricsWriter::new(file, fresh).map_err(|e| CliError::io(&metrics_path, e))?;
    write_file(&s.out_dir.join("dataset.csv"), dataset_csv(trainer.data()).as_bytes())?;

    let mut warmup_target_acc = None;
    if !trainer.warmup_finished() {
        trainer.warmup()?;
        let (src, tgt) = trainer.evaluate()?;
        warmup_target_acc = Some(tgt);
        write_file(&s.out_dir.join(WARMUP_CKPT), &checkpoint::encode(&trainer.state()))?;
        let _ = writeln!(log, "warm-up: source_acc {src:.4} target_acc {tgt:.4}");
    }
    let warmup = trainer.config().warmup_epochs;
    while !trainer.finished() {
        let mut io_err = None;
        trainer.covi_epoch(&mut |row| {
            if let Err(e) = metrics.write(row) {
                io_err = Some(e);
                return Err(covi_core::Error::Contract("metrics write failed".into()));
            }
            Ok(())
        })
        .map_err(|e| match io_err.take() {
            Some(io) => CliError::io(&metrics_path, io),
            None => e.into(),
        })?;
        let adapted = trainer.epochs_done() - warmup;
        let every = trainer.config().checkpoint_every;
        if every > 0 && adapted % every == 0 {
            let path = s.out_dir.join(format!("epoch_{}.ckpt", trainer.epochs_done()));
            write_file(&path, &checkpoint::encode(&trainer.state()))?;
        }
    }
    let final_checkpoint = s.out_dir.join(FINAL_CKPT);
    write_file(&final_checkpoint, &checkpoint::encode(&trainer.state()))?;
    let (source_acc, target_acc) = trainer.evaluate()?;
    let _ = writeln!(log, "final: source_acc {source_acc:.4} target_acc {target_acc:.4}");
    Ok(TrainOutcome {
        source_acc,
        target_acc,
        warmup_target_acc,
        metrics_path,
        final_checkpoint,
    })
}

pub fn eval(s: &Settings, log: &mut dyn Write) -> Result<(f64, f64), CliError> {
    let ds = s.train.build_dataset()?;
    let path = or_out(&s.checkpoint, s, FINAL_CKPT);
    let p = load_params(&path, &ds, s)?;
    let (src, tgt) = evaluate(&p, &ds)?;
    let _ = writeln!(log, "checkpoint {}", path.display());
    let _ = writeln!(log, "source_acc {src:.6}");
    let _ = writeln!(log, "target_acc {tgt:.6}");
    Ok((src, tgt))
}

pub fn sweep_pairs(s: &Settings, ds: &DomainPairDataset) -> Result<SweepPairs, CliError> {
    let pairs = match s.sweep_pairs {
        PairSampling::Random => SweepPairs::sample(ds, s.sweep_samples, SWEEP_SEED),
        PairSampling::CrossClass => SweepPairs::sample_cross_class(ds, s.sweep_samples, SWEEP_SEED),
    };
    pairs.map_err(|e| CliError::Usage(e.to_string()))
}

fn fmt_flip(e: &EmpEstimate) -> String {
    e.at_dominance_flip.map_or("absent".into(), |f| format!("{f:.6}"))
}

fn summary_lines(label: &str, e: &EmpEstimate) -> String {
    format!(
        "{label}_emp_max_entropy = {:.6}\n{label}_emp_dominance_flip = {}\n",
        e.at_max_entropy,
        fmt_flip(e)
    )
}

pub fn sweep(s: &Settings, log: &mut dyn Write) -> Result<EmpEstimate, CliError> {
    let ds = s.train.build_dataset()?;
    let path = or_out(&s.checkpoint, s, FINAL_CKPT);
    let p = load_params(&path, &ds, s)?;
    let pairs = sweep_pairs(s, &ds)?;
    prepare_out(s)?;
    let rows = lambda_sweep_on(&p, &ds, &pairs, &uniform_grid(s.sweep_steps))?;
    let emp = empirical_emp(&rows)?;
    write_file(&s.out_dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    let summary = format!("checkpoint = {}\n{}", path.display(), summary_lines("sweep", &emp));
    write_file(&s.out_dir.join("sweep_summary.txt"), summary.as_bytes())?;
    let _ = write!(log, "{summary}");
    Ok(emp)
}

pub fn equilibrium(s: &Settings, log: &mut dyn Write) -> Result<EquilibriumReport, CliError> {
    let ds = s.train.build_dataset()?;
    let before_path = or_out(&s.before_checkpoint, s, WARMUP_CKPT);
    let after_path = or_out(&s.after_checkpoint, s, FINAL_CKPT);
    let before = load_params(&before_path, &ds, s)?;
    let after = load_params(&after_path, &ds, s)?;
    let pairs = sweep_pairs(s, &ds)?;
    prepare_out(s)?;
    let report = equilibrium_report(&before, &after, &ds, &pairs, &uniform_grid(s.sweep_steps))?;
    let before_csv = s.out_dir.join("equilibrium_before.csv");
    let after_csv = s.out_dir.join("equilibrium_after.csv");
    write_file(&before_csv, sweep_csv(&report.before).as_bytes())?;
    write_file(&after_csv, sweep_csv(&report.after).as_bytes())?;
    // the CSVs are re-read so the summary reflects exactly what was written
    let re_read = read_table(&after_csv)?;
    if re_read.rows.len() != report.after.len() {
        return Err(CliError::Runtime("sweep CSV did not round-trip".into()));
    }
    let summary = format!(
        "before_checkpoint = {}\nafter_checkpoint = {}\n{}{}equilibrated = {}\n",
        before_path.display(),
        after_path.display(),
        summary_lines("before", &report.before_emp),
        summary_lines("after", &report.after_emp),
        report.equilibrated(EQUILIBRIUM_BAND)
    );
    write_file(&s.out_dir.join("summary.txt"), summary.as_bytes())?;
    let _ = write!(log, "{summary}");
    Ok(report)
}

/// The oracle suite. Fast enough for a smoke run on every build.
pub fn selftest_checks() -> Vec<Check> {
    let mut checks = vec![
        oracles::gradient_graphs(50),
        oracles::gradient_losses(10),
        oracles::brute_force_maximality(4),
        oracles::mask_equivalence(1000, 7),
        oracles::mixup_identities(3),
        oracles::contrastive_label_sums(5),
        oracles::consensus_identity(11),
        oracles::checkpoint_round_trip(13),
    ];
    let source_only = || -> covi_core::Result<(ModelParams, DomainPairDataset)> {
        let mut t = Trainer::new(covi_core::trainer::TrainConfig::default())?;
        t.warmup()?;
        Ok((t.params().clone(), t.data().clone()))
    };
    checks.push(match source_only() {
        Ok((p, ds)) => oracles::dominance_flip(&p, &ds, 256, 0.1, 2.0),
        Err(e) => Check {
            name: "dominance_flip",
            passed: false,
            detail: format!("error: {e}"),
        },
    });
    checks
}

pub fn selftest(log: &mut dyn Write) -> Result<(), CliError> {
    let checks = selftest_checks();
    for c in &checks {
        let _ = writeln!(log, "{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    let _ = writeln!(log, "all {} checks passed", checks.len());
    Ok(())
}
