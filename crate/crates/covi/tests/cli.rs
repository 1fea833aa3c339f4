use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use covi::config::parse_text;
use covi::csv::read_table;
use covi_core::checkpoint;
use covi_core::model::init_model;
use covi_core::trainer::TrainConfig;

const SMALL: &str = "\
# small two-moons run
n_per_domain = 300
warmup_epochs = 15
covi_epochs = 6
delay_epochs = 2
hidden = 32
feat_dim = 16
";

fn covi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covi"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn covi")
}

fn small_config(dir: &Path) {
    fs::write(dir.join("small.cfg"), SMALL).unwrap();
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2_naming_the_token() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let cases: [(&[&str], &str); 6] = [
        (&["train", "--config", "missing.cfg"], "missing.cfg"),
        (&["train", "--frobnicate"], "--frobnicate"),
        (&["dance"], "dance"),
        (&["train", "--config", "small.cfg", "--set", "learning_rate=0.1"], "learning_rate"),
        (&["train", "--set", "batch_size=many"], "many"),
        (&["eval", "--set", "no_equals_sign"], "no_equals_sign"),
    ];
    for (args, token) in cases {
        let o = covi(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(token), "{args:?}: {}", stderr(&o));
    }
    fs::write(dir.path().join("bad.cfg"), "seed = 1\nwarmup = 3\n").unwrap();
    let o = covi(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("warmup"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // eval with no checkpoint present
    assert_eq!(covi(dir.path(), &["eval"]).status.code(), Some(1));
    // out dir below a regular file cannot be created
    fs::write(dir.path().join("file"), "x").unwrap();
    let o = covi(dir.path(), &["train", "--out", "file/run"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    // warm-up cannot be skipped
    let o = covi(dir.path(), &["train", "--set", "warmup_epochs=0", "--set", "n_per_domain=50"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_outputs_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = covi(dir.path(), &["train", "--config", "small.cfg", "--out", "run", "--seed", "3", "--set", "checkpoint_every=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.txt", "dataset.csv", "metrics.csv", "warmup.ckpt", "epoch_18.ckpt", "epoch_21.ckpt", "final.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // nothing written next to the out dir
    let mut entries: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    assert_eq!(entries, ["run", "small.cfg"]);

    // the echoed config reproduces the run's settings
    let text = stdout(&o);
    let echo = text.split("# effective config\n").nth(1).unwrap().split("# end config").next().unwrap();
    let settings = parse_text(echo).unwrap();
    assert_eq!(settings.train.seed, 3);
    assert_eq!(settings.train.warmup_epochs, 15);
    assert_eq!(parse_text(&fs::read_to_string(run.join("config.txt")).unwrap()).unwrap(), settings);

    let bytes = fs::read(run.join("metrics.csv")).unwrap();
    assert!(!bytes.contains(&b'\r'));
    let t = read_table(&run.join("metrics.csv")).unwrap();
    assert_eq!(
        t.header.join(","),
        "step,r_emp,r_ct,r_cs,source_acc,target_acc,mean_lambda_star,ct_keep,cs_keep,agreement"
    );
    let steps = t.column("step").unwrap();
    assert_eq!(steps, (0..steps.len()).map(|s| s as f64).collect::<Vec<_>>());
    let first = String::from_utf8(bytes).unwrap().lines().nth(1).unwrap().to_owned();
    assert!(first.split(',').skip(1).all(|v| v.split('.').nth(1).map(str::len) == Some(6)), "{first}");
    let data = read_table(&run.join("dataset.csv")).unwrap();
    assert_eq!(data.rows.len(), 600);
}

#[test]
fn identical_runs_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for out in ["a", "b"] {
        let o = covi(dir.path(), &["train", "--config", "small.cfg", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let o = covi(dir.path(), &["train", "--config", "small.cfg", "--out", "c", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn warm_restart_matches_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = covi(dir.path(), &["train", "--config", "small.cfg", "--out", "full", "--set", "checkpoint_every=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let full = dir.path().join("full");

    // an interrupted run: epoch 18 checkpoint plus a metrics file written a little past it
    let part = dir.path().join("part");
    fs::create_dir(&part).unwrap();
    let metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let state = checkpoint::decode(&fs::read(full.join("epoch_18.ckpt")).unwrap()).unwrap();
    let cut: String = metrics.lines().take(state.steps_done + 4).map(|l| format!("{l}\n")).collect();
    fs::write(part.join("metrics.csv"), cut).unwrap();
    fs::copy(full.join("epoch_18.ckpt"), part.join("epoch_18.ckpt")).unwrap();

    let o = covi(
        dir.path(),
        &["train", "--config", "small.cfg", "--out", "part", "--set", "resume=part/epoch_18.ckpt", "--set", "checkpoint_every=3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(part.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(part.join("final.ckpt")).unwrap(), fs::read(full.join("final.ckpt")).unwrap());
    assert!(!part.join("warmup.ckpt").exists());
}

#[test]
fn no_adaptation_epochs_keeps_the_warmup_model() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = covi(dir.path(), &["train", "--config", "small.cfg", "--set", "covi_epochs=0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(fs::read(out.join("final.ckpt")).unwrap(), fs::read(out.join("warmup.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
}

fn printed(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("no {key} in output"))
}

#[test]
fn fresh_checkpoints_score_chance_on_average() {
    // A single random network can sit anywhere in [0, 1] on two balanced
    // classes; chance level is the average over initialisations.
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let ds = cfg.build_dataset().unwrap();
    let n = 10;
    let mut total = 0.0;
    for seed in 0..n {
        let p = init_model(cfg.model_dims(&ds), 100 + seed).unwrap();
        let name = format!("fresh_{seed}.ckpt");
        fs::write(dir.path().join(&name), checkpoint::encode_params(&p)).unwrap();
        let o = covi(dir.path(), &["eval", "--set", &format!("checkpoint={name}")]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = stdout(&o);
        total += (printed(&text, "source_acc") + printed(&text, "target_acc")) / 2.0;
    }
    let mean = total / n as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean accuracy {mean}");
}

#[test]
fn sweep_and_equilibrium_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(covi(dir.path(), &["train", "--config", "small.cfg"]).status.code(), Some(0));
    let o = covi(dir.path(), &["sweep", "--config", "small.cfg", "--set", "sweep_samples=64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let t = read_table(&out.join("sweep.csv")).unwrap();
    assert_eq!(t.header.join(","), "lambda,mean_entropy,source_dom,target_dom");
    assert_eq!(t.rows.len(), 21);
    assert_eq!(t.column("lambda").unwrap()[20], 1.0);
    assert!(fs::read_to_string(out.join("sweep_summary.txt")).unwrap().contains("sweep_emp_max_entropy"));

    // the same checkpoint on both sides gives identical curves
    let o = covi(
        dir.path(),
        &["equilibrium", "--config", "small.cfg", "--set", "before_checkpoint=out/final.ckpt", "--set", "sweep_steps=10"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let before = read_table(&out.join("equilibrium_before.csv")).unwrap();
    let after = read_table(&out.join("equilibrium_after.csv")).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.rows.len(), 11);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("equilibrated = false"), "{summary}");

    let o = covi(dir.path(), &["equilibrium", "--config", "small.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("before_emp_dominance_flip"));
}

#[test]
fn selftest_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = covi(dir.path(), &["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(120));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}
