//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The training experiments (3 seeds, four modes, three `n_max` settings)
//! take about an hour on one core. Each run's log and long-form summary is
//! cached under the cargo target tmp dir, keyed by config hash, so repeated
//! invocations only re-evaluate the criteria. Set `EXPLAB_ACCEPTANCE_FRESH=1`
//! to retrain everything.
//!
//! Exits 0 after printing the report. With `--strict` (or
//! `EXPLAB_ACCEPTANCE_STRICT=1`) any FAIL line makes the exit status 1.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use explab::checkpoint;
use explab::config::RunConfig;
use explab::experiment::{evaluate, run_training, RunSummary};
use explab::gradcheck::Precision;
use explab::gradsuite;
use explab::tasks::Split;
use explab::trainer::{audit_run_log, read_run_log, write_run_log, Phase, StepRecord, TrainStatus};

const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Mode {
    TfOnly,
    Full,
    NoPromptProtection,
    NoEosAdaptive,
}

struct Run {
    log: Vec<StepRecord>,
    summary: RunSummary,
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {n}. {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn experiments_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments")
}

fn config(mode: Mode, seed: u64, n_max: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&experiments_dir().join("full.toml")).expect("experiments/full.toml");
    cfg.seed = seed;
    cfg.trainer.n_max = n_max;
    cfg.flags.tf_only = mode == Mode::TfOnly;
    cfg.flags.no_prompt_protection = mode == Mode::NoPromptProtection;
    cfg.flags.no_eos_adaptive = mode == Mode::NoEosAdaptive;
    cfg
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh() -> bool {
    std::env::var("EXPLAB_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1")
}

fn run(mode: Mode, seed: u64, n_max: usize) -> Run {
    let cfg = config(mode, seed, n_max);
    let dir = cache_dir().join(cfg.hash());
    let (log_path, summary_path) = (dir.join("run_log.jsonl"), dir.join("summary.json"));
    if !fresh() && log_path.is_file() && summary_path.is_file() {
        let log = read_run_log(&log_path).expect("cached run log");
        let summary = serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).expect("cached summary");
        return Run { log, summary };
    }
    let t0 = Instant::now();
    let out = run_training(&cfg, |_, _| Ok(())).expect("training runs");
    let eval = evaluate(&out.params, &cfg, Split::LongForm).expect("evaluation runs");
    let summary = RunSummary::new(&cfg, &out.log, &out.status, &eval);
    std::fs::create_dir_all(&dir).unwrap();
    write_run_log(&log_path, &out.log).unwrap();
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap()).unwrap();
    eprintln!(
        "  trained {:?} seed {seed} n_max {n_max} in {:.0}s",
        mode,
        t0.elapsed().as_secs_f64()
    );
    Run { log: out.log, summary }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn gradients(r: &mut Report) {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 2];
    for (i, p) in [Precision::F32, Precision::F64].into_iter().enumerate() {
        for (_, rep) in gradsuite::run_suite(p, 0).expect("grad suite runs") {
            worst[i] = worst[i].max(rep.max_rel_error);
        }
    }
    let bk = gradsuite::key_bias_gradient::<f64>(0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst[0] < gradsuite::tolerance(Precision::F32)
        && worst[1] < gradsuite::tolerance(Precision::F64)
        && bk < 1e-12
        && secs < 60.0;
    r.line(
        1,
        pass,
        "gradient check, all ops and a 2-layer model",
        format!(
            "f32 {:.2e} (< 1e-3, denominator floor {:.0e}), f64 {:.2e} (< 1e-6), key-bias |g| {bk:.1e}, {secs:.1}s",
            worst[0],
            gradsuite::FLOOR_F32,
            worst[1]
        ),
    );
}

fn loss_oracles(r: &mut Report) {
    let (dev, identities) = common::loss_oracle_sweep(2024, 100);
    r.line(
        2,
        dev < 1e-6 && identities,
        "loss formulas vs extended-precision oracle",
        format!("100 instances, max deviation {dev:.2e} (< 1e-6), loss_fr(t1=T2) == loss_tf exactly: {identities}"),
    );
}

fn linearity(r: &mut Report) {
    let err = (0..3).map(common::linearity_error).fold(0.0, f64::max);
    r.line(
        3,
        err < 1e-5,
        "iteration weights act linearly on gradients",
        format!("max relative error {err:.2e} (< 1e-5)"),
    );
}

/// Step-contract violations across every hybrid run, and the steps audited.
fn audit(hybrid: &[(String, &Run, usize)]) -> (Vec<String>, usize) {
    let mut problems = Vec::new();
    let mut steps = 0;
    for (name, run, n_max) in hybrid {
        steps += run.log.len();
        problems.extend(audit_run_log(&run.log, *n_max).into_iter().map(|p| format!("{name}: {p}")));
    }
    (problems, steps)
}

/// Back-to-back 1000-step TF-only and full runs, uncached so both are timed
/// under the same conditions. Returns their logs.
fn timing_runs() -> (Vec<StepRecord>, Vec<StepRecord>) {
    let short = |mode| {
        let mut cfg = config(mode, SEEDS[0], 2);
        cfg.optimizer.steps = 1000;
        run_training(&cfg, |_, _| Ok(())).expect("training runs").log
    };
    (short(Mode::TfOnly), short(Mode::Full))
}

fn single_backward(r: &mut Report, audited: &(Vec<String>, usize), tf_log: &[StepRecord], full_log: &[StepRecord]) {
    let (problems, steps) = audited;
    let mut problems = problems.clone();
    problems.extend(audit_run_log(full_log, 2).into_iter().map(|p| format!("1k-step run: {p}")));
    let ms = |log: &[StepRecord], hybrid: bool| {
        mean(&log.iter().filter(|s| !hybrid || s.phase == Phase::Hybrid).map(|s| s.wall_ms).collect::<Vec<_>>())
    };
    let ratio = ms(full_log, true) / ms(tf_log, false);
    let pass = problems.is_empty() && (ratio - 1.5).abs() <= 0.3;
    let first = problems.first().cloned().unwrap_or_default();
    r.line(
        4,
        pass,
        "one backward per step, step cost",
        format!(
            "{} logged steps, {} contract violations {first}; n_max=2 hybrid/TF step cost {ratio:.2} (1.5 +- 0.3, {:.1} vs {:.1} ms)",
            steps + full_log.len(),
            problems.len(),
            ms(full_log, true),
            ms(tf_log, false)
        ),
    );
}

fn gap(r: &mut Report, tf: &[&Run], full: &[&Run]) {
    let g = |runs: &[&Run]| -> Vec<f64> { runs.iter().map(|r| r.summary.gap.unwrap_or(f64::NAN)).collect() };
    let (gt, gf) = (g(tf), g(full));
    let reduction = 1.0 - mean(&gf) / mean(&gt);
    let pass = gt.iter().all(|&x| x >= 0.05) && reduction >= 0.30;
    r.line(
        5,
        pass,
        "long-form TF/FR accuracy gap from position 50",
        format!("TF-only {gt:.3?} (each >= 0.05), hybrid {gf:.3?}, mean reduction {:.1}% (>= 30%)", reduction * 100.0),
    );
}

fn eos_shift(r: &mut Report, by_n: &[(usize, Vec<&Run>)], audited: &(Vec<String>, usize)) {
    let mut pass = audited.0.is_empty();
    let mut parts = Vec::new();
    for (n_max, runs) in by_n {
        let mut wins = 0;
        let mut moments = Vec::new();
        for run in runs {
            let h = &run.summary.histogram;
            let (early, late) = (h.first_moment(0), h.first_moment(2));
            if let (Some(e), Some(l)) = (early, late) {
                wins += (l > e) as usize;
            }
            moments.push(format!(
                "{}->{}",
                early.map_or("-".into(), |v| format!("{v:.2}")),
                late.map_or("-".into(), |v| format!("{v:.2}"))
            ));
        }
        pass &= wins >= 2;
        parts.push(format!("n_max {n_max}: {wins}/3 [{}]", moments.join(", ")));
    }
    r.line(
        6,
        pass,
        "premature-EOS iteration shifts later (first moment, first vs last third)",
        format!("{}; {} budget violations in {} steps", parts.join("; "), audited.0.len(), audited.1),
    );
}

fn ablation(r: &mut Report, full: &[&Run], noeos: &[&Run], nopp: &[&Run]) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for i in 0..SEEDS.len() {
        let (a, b, c) = (full[i].summary.ter, noeos[i].summary.ter, nopp[i].summary.ter);
        wins += (a < b && b < c) as usize;
        rows.push(format!("seed {}: {a:.3}/{b:.3}/{c:.3}", SEEDS[i]));
    }
    r.line(
        7,
        wins >= 2,
        "ablation TER order full < no-EOS-adaptive < no-prompt-protection",
        format!("{wins}/3 seeds ({})", rows.join(", ")),
    );
}

fn failure_proxies(r: &mut Report, tf: &[&Run], full: &[&Run]) {
    let m = |runs: &[&Run], f: fn(&RunSummary) -> f64| mean(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
    let (pt, pf) = (m(tf, |s| s.premature_eos_rate), m(full, |s| s.premature_eos_rate));
    let (lt, lf) = (m(tf, |s| s.length_dev), m(full, |s| s.length_dev));
    r.line(
        8,
        pf < pt && lf < lt,
        "premature EOS and length deviation, hybrid vs TF-only",
        format!("premature rate {pt:.4} -> {pf:.4}, mean |length ratio - 1| {lt:.4} -> {lf:.4}"),
    );
}

fn smoke_config() -> RunConfig {
    RunConfig::load(&experiments_dir().join("smoke.toml")).expect("experiments/smoke.toml")
}

fn determinism(r: &mut Report) {
    let cfg = smoke_config();
    let strip = |log: &[StepRecord]| -> Vec<String> {
        log.iter()
            .map(|rec| StepRecord { wall_ms: 0.0, ..rec.clone() }.to_line())
            .collect()
    };
    let a = run_training(&cfg, |_, _| Ok(())).unwrap();
    let b = run_training(&cfg, |_, _| Ok(())).unwrap();
    let logs_equal = strip(&a.log) == strip(&b.log) && a.params == b.params;
    let bytes = checkpoint::encode(&a.params, &cfg.hash());
    let back = checkpoint::decode(&bytes).unwrap();
    let bits_equal = back.config_hash == cfg.hash()
        && back.params.weights.named().iter().zip(a.params.weights.named()).all(|((n1, t1), (n2, t2))| {
            *n1 == n2 && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && checkpoint::encode(&back.params, &cfg.hash()) == bytes;
    let completed = a.status == TrainStatus::Completed;
    r.line(
        9,
        logs_equal && bits_equal && completed,
        "determinism and checkpoint round-trip",
        format!("{} steps, logs identical: {logs_equal}, checkpoint bit-exact: {bits_equal}", a.log.len()),
    );
}

fn main() {
    let strict = std::env::args().any(|a| a == "--strict")
        || std::env::var("EXPLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    // `cargo test -- --list` should not start an hour of training
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let t0 = Instant::now();
    let mut report = Report { failed: 0 };
    gradients(&mut report);
    loss_oracles(&mut report);
    linearity(&mut report);

    let t_exp = Instant::now();
    let mut runs = std::collections::BTreeMap::new();
    for seed in SEEDS {
        for (mode, n_max) in [
            (Mode::TfOnly, 2),
            (Mode::Full, 2),
            (Mode::NoEosAdaptive, 2),
            (Mode::NoPromptProtection, 2),
            (Mode::Full, 4),
            (Mode::Full, 6),
        ] {
            runs.insert((format!("{mode:?}"), n_max, seed), run(mode, seed, n_max));
        }
    }
    let pick = |mode: Mode, n_max: usize| -> Vec<&Run> { SEEDS.iter().map(|&s| &runs[&(format!("{mode:?}"), n_max, s)]).collect() };
    let (tf, full, noeos, nopp) = (
        pick(Mode::TfOnly, 2),
        pick(Mode::Full, 2),
        pick(Mode::NoEosAdaptive, 2),
        pick(Mode::NoPromptProtection, 2),
    );
    let hybrid: Vec<(String, &Run, usize)> = runs
        .iter()
        .filter(|((m, _, _), _)| m != "TfOnly")
        .map(|((m, n, s), run)| (format!("{m} n_max {n} seed {s}"), run, *n))
        .collect();
    let hybrid_phase_steps = hybrid
        .iter()
        .map(|(_, r, _)| r.log.iter().filter(|s| s.phase == Phase::Hybrid).count())
        .sum::<usize>();
    eprintln!(
        "  experiments ready in {:.0}s ({hybrid_phase_steps} hybrid-phase steps)",
        t_exp.elapsed().as_secs_f64()
    );
    let audited = audit(&hybrid);
    let (tf_log, full_log) = timing_runs();
    single_backward(&mut report, &audited, &tf_log, &full_log);
    gap(&mut report, &tf, &full);
    let by_n: Vec<(usize, Vec<&Run>)> = [2, 4, 6].into_iter().map(|n| (n, pick(Mode::Full, n))).collect();
    eos_shift(&mut report, &by_n, &audited);
    ablation(&mut report, &full, &noeos, &nopp);
    failure_proxies(&mut report, &tf, &full);
    determinism(&mut report);

    println!(
        "{} of 9 criteria passed ({:.0}s)",
        9 - report.failed,
        t0.elapsed().as_secs_f64()
    );
    if strict && report.failed > 0 {
        std::process::exit(1);
    }
}
