#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

mod args;
mod config;
mod manifest;
mod plotdata;
mod run;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::Parser;

use args::{Cli, Command};
use config::FileConfig;
use manifest::{digests, Manifest, RunLock};

/// Bad flags, config values or run-directory state. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_NEGATIVE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<wmcert::Error>() {
            use wmcert::Error as E;
            return match e {
                E::InvalidArgument(_) | E::InvalidConfig(_) | E::InsufficientSamples { .. } | E::Format(_) | E::Io(_) | E::Json(_) => {
                    EXIT_USAGE
                }
                _ => EXIT_NUMERIC,
            };
        }
    }
    EXIT_NUMERIC
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn real_main(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(UsageError("--workers must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest);
    }
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let invocation = run::resolve(cli.command, &file)?;
    let seed = cli.global.seed.unwrap_or_else(wmcert::rng::entropy_seed);
    let run_dir = &cli.global.run_dir;
    let _lock = RunLock::acquire(run_dir)?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let done = run::execute(&invocation, run_dir, seed)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: invocation.name(),
        seed,
        seed_was_given: cli.global.seed.is_some(),
        inputs: digests(run_dir, &done.inputs)?,
        outputs: digests(run_dir, &done.outputs)?,
        invocation,
        started_unix: started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        duration_secs: clock.elapsed().as_secs_f64(),
    };
    let path = manifest.write(run_dir)?;
    println!("{}", done.summary);
    println!("seed {seed}; manifest {}", path.display());
    Ok(if done.negative { EXIT_NEGATIVE } else { 0 })
}

/// Re-runs a recorded invocation in a scratch copy of its inputs and compares
/// output digests.
fn replay(manifest_path: &Path) -> anyhow::Result<u8> {
    let recorded = Manifest::load(manifest_path)?;
    let run_dir = manifest_path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| UsageError(format!("{} is not inside <run-dir>/manifests", manifest_path.display())))?;
    let scratch = tempfile::tempdir_in(run_dir).context("creating replay directory")?;
    for input in &recorded.inputs {
        let src = run_dir.join(&input.path);
        if manifest::sha256_file(&src)? != input.sha256 {
            return Err(UsageError(format!("input {} changed since the recorded run", input.path.display())).into());
        }
        let dst = scratch.path().join(&input.path);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::copy(&src, &dst)?;
    }
    let done = run::execute(&recorded.invocation, scratch.path(), recorded.seed)?;
    let fresh = digests(scratch.path(), &done.outputs)?;
    let mut mismatched = 0;
    for want in &recorded.outputs {
        match fresh.iter().find(|d| d.path == want.path) {
            Some(got) if got.sha256 == want.sha256 => println!("match     {}", want.path.display()),
            Some(_) => {
                mismatched += 1;
                println!("MISMATCH  {}", want.path.display());
            }
            None => {
                mismatched += 1;
                println!("MISSING   {}", want.path.display());
            }
        }
    }
    println!("{} of {} outputs reproduced", recorded.outputs.len() - mismatched, recorded.outputs.len());
    Ok(if mismatched == 0 { 0 } else { EXIT_NEGATIVE })
}
