//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::{render, Builder, Settings};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "covi", version, about = "Vicinal-space domain adaptation on synthetic domain pairs")]
pub struct Args {
    #[command(subcommand)]
    pub verb: Verb,

    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Output directory (same as `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Run seed (same as `seed`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Warm-up, then adaptation; writes metrics.csv and checkpoints.
    Train,
    /// Print source and target accuracy of a checkpoint.
    Eval,
    /// λ-sweep of one checkpoint: sweep.csv and a summary.
    Sweep,
    /// λ-sweeps of a before/after checkpoint pair and the equilibrium verdict.
    Equilibrium,
    /// Run the oracle suite; nonzero exit if any check fails.
    Selftest,
}

/// Config file, then `--set` overrides, then `--out` and `--seed`.
pub fn resolve(args: &Args) -> Result<Settings, CliError> {
    let mut b = Builder::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config '{}': {e}", path.display())))?;
        b.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
    }
    for o in &args.overrides {
        b.assign(o)
            .map_err(|e| CliError::Usage(format!("--set {o}: {}", e.message())))?;
    }
    if let Some(out) = &args.out {
        b.set("out_dir", &out.display().to_string())?;
    }
    if let Some(seed) = args.seed {
        b.set("seed", &seed.to_string())?;
    }
    b.finish()
}

pub fn execute(args: &Args, out: &mut dyn Write) -> Result<(), CliError> {
    if args.verb == Verb::Selftest {
        return commands::selftest(out);
    }
    let s = resolve(args)?;
    let _ = writeln!(out, "# effective config");
    let _ = write!(out, "{}", render(&s));
    let _ = writeln!(out, "# end config");
    match args.verb {
        Verb::Train => commands::train(&s, out).map(drop),
        Verb::Eval => commands::eval(&s, out).map(drop),
        Verb::Sweep => commands::sweep(&s, out).map(drop),
        Verb::Equilibrium => commands::equilibrium(&s, out).map(drop),
        Verb::Selftest => unreachable!("handled above"),
    }
}

/// Parses `argv` and runs; the return value is the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&args, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "covi: {e}");
            e.exit_code()
        }
    }
}
