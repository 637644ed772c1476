//! `explab`: train, diagnose, gradient-check and compare runs.
//!
//! Exit codes: 0 ok, 2 config, 3 divergence, 4 artifact integrity,
//! 5 verification failure, 1 anything else.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use explab::checkpoint;
use explab::config::RunConfig;
use explab::diagnostics::{emit_plots, eos_histogram};
use explab::experiment::{compare_runs, evaluate, run_training, RunSummary, RunView};
use explab::gradcheck::Precision;
use explab::gradsuite;
use explab::tasks::Split;
use explab::trainer::{read_run_log, TrainStatus};
use explab::Error;

#[derive(Parser)]
#[command(name = "explab", version, about = "Hybrid teacher-forcing / free-running training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write its checkpoints and step log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory. Defaults to the config's output_dir under $EXPLAB_OUTPUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write accuracy, EOS and sequence reports.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.toml in the checkpoint's run directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "long_form")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replaces the per-precision tolerance.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Markdown comparison of run B against run A.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, default_value = "long_form")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with an explicit exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

const OUTPUT_ROOT: &str = "EXPLAB_OUTPUT_ROOT";

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = e.downcast_ref::<Exit>() {
        return *code;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::Divergence { .. }) => 3,
        Some(Error::Checkpoint { .. } | Error::Artifact { .. } | Error::Parse { .. } | Error::Io { .. }) => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Exit(2, format!("cannot read config {}: {source}", path.display())).into(),
        e => anyhow::Error::new(e).context(format!("config {}", path.display())),
    })
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> anyhow::Result<T> {
    r.map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
    .map_err(Into::into)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    io(std::fs::write(path, body), path)
}

fn manifest(dir: &Path, config_hash: &str, files: &[PathBuf], extra: serde_json::Value) -> anyhow::Result<()> {
    let names: Vec<String> = files
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    let mut m = serde_json::json!({ "config_hash": config_hash, "artifacts": names });
    if let (Some(m), serde_json::Value::Object(x)) = (m.as_object_mut(), extra) {
        m.extend(x);
    }
    write_json(&dir.join("manifest.json"), &m)
}

fn cmd_train(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| match std::env::var_os(OUTPUT_ROOT) {
        Some(root) => PathBuf::from(root).join(&cfg.output_dir),
        None => cfg.output_dir.clone(),
    });
    let hash = cfg.hash();
    let ckpt_dir = dir.join("checkpoints");
    io(std::fs::create_dir_all(&ckpt_dir), &ckpt_dir)?;
    let cfg_path = dir.join("config.toml");
    io(std::fs::write(&cfg_path, cfg.to_toml()), &cfg_path)?;

    let log_path = dir.join("run_log.jsonl");
    let mut log = std::io::BufWriter::new(io(std::fs::File::create(&log_path), &log_path)?);
    let mut files = vec![cfg_path, log_path.clone()];
    let every = cfg.checkpoint_every;
    let total = cfg.optimizer.steps;
    let output = run_training(&cfg, |rec, params| {
        writeln!(log, "{}", rec.to_line()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let done = rec.step + 1;
        if done % every == 0 && done < total {
            let p = ckpt_dir.join(format!("step_{done:06}.ckpt"));
            checkpoint::save(&p, params, &hash)?;
            files.push(p);
        }
        if done % 100 == 0 {
            eprintln!(
                "step {done}/{total} l_tf/token {} n {}",
                rec.l_tf_per_token.map_or("-".into(), |v| format!("{v:.4}")),
                rec.current_n
            );
        }
        Ok(())
    })?;
    io(log.flush(), &log_path)?;
    drop(log);

    let final_path = dir.join("model.ckpt");
    checkpoint::save(&final_path, &output.params, &hash)?;
    files.push(final_path);
    let status = match &output.status {
        TrainStatus::Completed => "completed".to_string(),
        TrainStatus::Diverged { step, .. } => format!("diverged at step {step}"),
    };
    manifest(&dir, &hash, &files, serde_json::json!({ "status": status, "steps_logged": output.log.len() }))?;
    println!("{}: {status}, {} steps, config {hash}", dir.display(), output.log.len());
    if let TrainStatus::Diverged { step, reason } = output.status {
        return Err(Error::Divergence { step, reason }.into());
    }
    Ok(())
}

/// The run directory a checkpoint belongs to: its own directory, or the
/// parent when it sits under `checkpoints/`.
fn run_dir_of(ckpt: &Path) -> PathBuf {
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    if dir.file_name().is_some_and(|n| n == "checkpoints") {
        dir.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        dir
    }
}

fn cmd_diagnose(ckpt_path: PathBuf, config: Option<PathBuf>, split: Split, out: Option<PathBuf>) -> anyhow::Result<()> {
    let run_dir = run_dir_of(&ckpt_path);
    let cfg_path = config.unwrap_or_else(|| run_dir.join("config.toml"));
    let cfg = load_config(Some(&cfg_path))?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    let hash = cfg.hash();
    if ckpt.config_hash != hash {
        return Err(Error::Artifact {
            path: ckpt_path,
            reason: format!("checkpoint was written by config {} but {} hashes to {hash}", ckpt.config_hash, cfg_path.display()),
        }
        .into());
    }
    if ckpt.params.config != cfg.model {
        return Err(Error::Artifact {
            path: ckpt_path,
            reason: "checkpoint shapes do not match the config's model section".into(),
        }
        .into());
    }
    let log_path = run_dir.join("run_log.jsonl");
    let (log, status) = if log_path.exists() {
        let log = read_run_log(&log_path)?;
        let status = match log.iter().find(|r| r.l_tf.is_none()) {
            Some(r) if log.len() < cfg.optimizer.steps as usize => TrainStatus::Diverged {
                step: r.step,
                reason: "non-finite loss".into(),
            },
            _ => TrainStatus::Completed,
        };
        (log, status)
    } else {
        (Vec::new(), TrainStatus::Completed)
    };
    let eval = evaluate(&ckpt.params, &cfg, split)?;
    let summary = RunSummary::new(&cfg, &log, &status, &eval);
    let dir = out.unwrap_or_else(|| run_dir.join("diagnostics").join(split.name()));
    let mut files = emit_plots(&dir, &eval.curve, &eos_histogram(&log), &eval.report)?;
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &serde_json::to_value(&summary)?)?;
    files.push(summary_path);
    manifest(&dir, &hash, &files, serde_json::json!({ "split": split.name() }))?;

    println!("split {} ({} examples), config {hash}", split.name(), eval.data.examples.len());
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("acc_tf {} acc_fr {} gap>=50 {}", f(summary.acc_tf), f(summary.acc_fr), f(summary.gap));
    println!(
        "ter {:.4} premature_eos {:.4} missing_eos {:.4} length_dev {:.4} repetition {:.4}",
        summary.ter, summary.premature_eos_rate, summary.missing_eos_rate, summary.length_dev, summary.repetition_rate
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, threshold: Option<f64>) -> anyhow::Result<()> {
    let mut failed = Vec::new();
    let mut worst_all = 0.0f64;
    for precision in [Precision::F32, Precision::F64] {
        let tol = threshold.unwrap_or_else(|| gradsuite::tolerance(precision));
        let reports = gradsuite::run_suite(precision, seed)?;
        for (case, r) in &reports {
            println!("{precision:?} {case:?} max_rel_err {:.3e}", r.max_rel_error);
            if !(r.max_rel_error < tol) {
                failed.push(format!("{precision:?} {case:?}"));
            }
            worst_all = worst_all.max(r.max_rel_error);
        }
    }
    let bk = gradsuite::key_bias_gradient::<f64>(seed)?;
    println!("F64 key-bias gradient max |g| {bk:.3e}");
    println!("max relative error {worst_all:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Exit(5, format!("above threshold: {}", failed.join(", "))).into())
    }
}

fn run_view(dir: &Path, split: Split) -> anyhow::Result<RunView> {
    let log = read_run_log(&dir.join("run_log.jsonl"))?;
    let candidates = [dir.join("diagnostics").join(split.name()).join("summary.json"), dir.join("summary.json")];
    let summary = match candidates.iter().find(|p| p.exists()) {
        Some(p) => {
            let text = io(std::fs::read_to_string(p), p)?;
            Some(serde_json::from_str::<RunSummary>(&text).map_err(|e| Error::Artifact {
                path: p.clone(),
                reason: format!("not a run summary: {e}"),
            })?)
        }
        None => None,
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunView { name, log, summary })
}

fn cmd_compare(a: PathBuf, b: PathBuf, split: Split, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut va = run_view(&a, split)?;
    let vb = run_view(&b, split)?;
    if va.name == vb.name {
        va.name = format!("{} (A)", va.name);
    }
    let md = compare_runs(&va, &vb);
    match out {
        Some(p) => io(std::fs::write(&p, &md), &p)?,
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(config, seed, out),
        Cmd::Diagnose {
            checkpoint,
            config,
            split,
            out,
        } => cmd_diagnose(checkpoint, config, split, out),
        Cmd::Gradcheck { seed, threshold } => cmd_gradcheck(seed, threshold),
        Cmd::Compare { run_a, run_b, split, out } => cmd_compare(run_a, run_b, split, out).context("compare"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
