use explab::checkpoint;
use explab::config::RunConfig;
use explab::experiment::{evaluate, run_training};
use explab::model::ModelConfig;
use explab::par;
use explab::tasks::{Split, TaskSpec};
use explab::tensor::Tensor;
use explab::trainer::{audit_run_log, read_run_log, train_from, write_run_log, ModeFlags, Phase, TrainStatus};
use explab::{Error, ModelParams};

fn small_config(seed: u64) -> RunConfig {
    let task = TaskSpec {
        text_vocab: 6,
        speech_vocab: 16,
        expansion_min: 2,
        expansion_max: 3,
        text_len: (2, 5),
        eval_text_len: (2, 3),
        long_form_factor: 2,
        target_len_range: (2, 32),
        ..TaskSpec::default()
    };
    let mut cfg = RunConfig {
        seed,
        task,
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            text_vocab: 6,
            speech_vocab: 16,
            max_len: 48,
        },
        ..RunConfig::default()
    };
    cfg.optimizer.steps = 40;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.learning_rate = 3e-3;
    cfg.trainer.warmup_steps = 10;
    cfg.data.train_examples = 64;
    cfg.data.eval_examples = 8;
    cfg
}

fn bits(p: &ModelParams<f32>) -> Vec<u32> {
    p.weights.named().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn identical_config_reproduces_log_and_weights() {
    let cfg = small_config(3);
    let a = run_training(&cfg, |_, _| Ok(())).unwrap();
    let b = run_training(&cfg, |_, _| Ok(())).unwrap();
    let strip = |log: &[explab::trainer::StepRecord]| log.iter().map(|r| r.without_timing().to_line()).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(bits(&a.params), bits(&b.params));

    let c = run_training(&small_config(4), |_, _| Ok(())).unwrap();
    assert_ne!(bits(&a.params), bits(&c.params));
}

#[test]
fn sequential_fallback_matches_parallel() {
    let cfg = small_config(5);
    let a = run_training(&cfg, |_, _| Ok(())).unwrap();
    par::force_sequential(true);
    let b = run_training(&cfg, |_, _| Ok(()));
    par::force_sequential(false);
    let b = b.unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
}

#[test]
fn every_step_satisfies_the_step_contract() {
    for flags in [
        ModeFlags::default(),
        ModeFlags {
            no_eos_adaptive: true,
            ..ModeFlags::default()
        },
        ModeFlags {
            no_prompt_protection: true,
            ..ModeFlags::default()
        },
    ] {
        let mut cfg = small_config(1);
        cfg.flags = flags;
        cfg.trainer.n_max = 3;
        let out = run_training(&cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.status, TrainStatus::Completed);
        assert_eq!(audit_run_log(&out.log, 3), Vec::<String>::new());
        let hybrid: Vec<_> = out.log.iter().filter(|r| r.phase == Phase::Hybrid).collect();
        assert_eq!(hybrid.len(), 30);
        assert!(hybrid.iter().all(|r| r.current_n >= 1));
        if flags.no_eos_adaptive {
            assert!(hybrid.iter().all(|r| r.n_executed == 3));
        }
        if flags.no_prompt_protection {
            assert!(hybrid.iter().all(|r| r.t1_used.iter().all(|&t| t == 0)));
        }
    }
}

#[test]
fn tf_only_runs_no_iterations() {
    let mut cfg = small_config(2);
    cfg.flags.tf_only = true;
    let out = run_training(&cfg, |_, _| Ok(())).unwrap();
    assert!(out.log.iter().all(|r| r.phase == Phase::TfOnly && r.n_executed == 0 && r.forward_passes == 1));
}

#[test]
fn run_log_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(7);
    let out = run_training(&cfg, |_, _| Ok(())).unwrap();

    let log_path = dir.path().join("log.jsonl");
    write_run_log(&log_path, &out.log).unwrap();
    assert_eq!(read_run_log(&log_path).unwrap(), out.log);

    let ck = dir.path().join("model.ckpt");
    checkpoint::save(&ck, &out.params, &cfg.hash()).unwrap();
    let back = checkpoint::load(&ck).unwrap();
    assert_eq!(back.config_hash, cfg.hash());
    assert_eq!(bits(&back.params), bits(&out.params));
    assert_eq!(back.params.config, out.params.config);
    assert_eq!(checkpoint::encode(&back.params, &back.config_hash), std::fs::read(&ck).unwrap());

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&ck, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&ck), Err(Error::Checkpoint { .. })));
}

#[test]
fn resumed_training_continues_from_given_weights() {
    let cfg = small_config(8);
    let out = run_training(&cfg, |_, _| Ok(())).unwrap();
    let data = explab::experiment::training_set(&cfg).unwrap();
    let mut settings = cfg.train_settings();
    settings.steps = 5;
    let more = train_from(&data.examples, &settings, out.params.clone(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(more.log.len(), 5);
    assert_ne!(bits(&more.params), bits(&out.params));
}

#[test]
fn non_finite_weights_abort_after_patience() {
    let cfg = small_config(9);
    let data = explab::experiment::training_set(&cfg).unwrap();
    let mut params = ModelParams::<f32>::init(&cfg.model, 0).unwrap();
    params.weights.w_out = Tensor::full(params.weights.w_out.shape(), f32::NAN);
    let out = train_from(&data.examples, &cfg.train_settings(), params, &mut |_, _| Ok(())).unwrap();
    assert!(matches!(out.status, TrainStatus::Diverged { step: 2, .. }));
    assert_eq!(out.log.len(), 3);
    assert!(!audit_run_log(&out.log, cfg.trainer.n_max).is_empty());
}

#[test]
fn evaluation_covers_requested_examples() {
    let cfg = small_config(10);
    let out = run_training(&cfg, |_, _| Ok(())).unwrap();
    let ev = evaluate(&out.params, &cfg, Split::LongForm).unwrap();
    assert_eq!(ev.report.n, 8);
    assert_eq!(ev.predictions.free_running.len(), 8);
    assert!(!ev.curve.buckets.is_empty());
}
