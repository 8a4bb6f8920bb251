use clare_cli::config::ExperimentConfig;
use clare_cli::run::{read_eval_report, RunDir};
use clare_cli::{checkpoint, report, run_eval, run_learn, run_pretrain, CliError, LearnOptions, Method};
use std::path::{Path, PathBuf};

fn tiny(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default()
        .with_overrides(&[
            "suite.n_pretrain=3",
            "suite.n_stream=3",
            "suite.demos=4",
            "model.width=16",
            "model.ffn_hidden=24",
            "model.decoder_width=16",
            "model.decoder_hidden=24",
            "model.decoder_blocks=1",
            "model.time_embed_dim=8",
            "model.horizon=4",
            "model.exec_horizon=2",
            "model.euler_steps=3",
            "pretrain.steps=30",
            "pretrain.batch_size=8",
            "stage.adapter_steps=20",
            "stage.disc_steps=20",
            "stage.batch_size=8",
            "stage.adapter_rank=4",
            "stage.disc_rank=4",
            "eval.episodes=2",
        ])
        .unwrap();
    cfg.method.name = method;
    cfg
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// Pretrained stage-0 run shared by several tests in a fresh directory.
fn pretrained(dir: &Path, cfg: &ExperimentConfig) -> RunDir {
    let run = RunDir::new(dir.join("pre"));
    run_pretrain(cfg, &run).unwrap();
    run
}

fn init(pre: &RunDir) -> LearnOptions {
    LearnOptions {
        init: Some(pre.checkpoint(0)),
        ..LearnOptions::default()
    }
}

#[test]
fn interrupted_learning_resumes_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Clare);
    let pre = pretrained(tmp.path(), &cfg);

    let straight = RunDir::new(tmp.path().join("a"));
    run_learn(Some(&cfg), &straight, &init(&pre)).unwrap();

    let resumed = RunDir::new(tmp.path().join("b"));
    let first = LearnOptions {
        until: Some(1),
        ..init(&pre)
    };
    assert_eq!(run_learn(Some(&cfg), &resumed, &first).unwrap().len(), 1);
    let rest = LearnOptions {
        from_stage: Some(1),
        ..LearnOptions::default()
    };
    assert_eq!(run_learn(None, &resumed, &rest).unwrap().len(), 2);

    for n in 0..=3 {
        let (ja, ba) = checkpoint::paths(&straight.checkpoints(), &checkpoint::stage_stem(n));
        let (jb, bb) = checkpoint::paths(&resumed.checkpoints(), &checkpoint::stage_stem(n));
        assert_eq!(bytes(&ja), bytes(&jb), "manifest {n}");
        assert_eq!(bytes(&ba), bytes(&bb), "blob {n}");
    }
}

#[test]
fn clare_stages_keep_the_past_intact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Clare);
    let pre = pretrained(tmp.path(), &cfg);
    let run = RunDir::new(tmp.path().join("c"));
    let records = run_learn(Some(&cfg), &run, &init(&pre)).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert!(r.frozen_past);
        assert_eq!(r.past_task_reads, 0);
        assert!(r.clare.is_some());
    }
    assert_eq!(records[0].adapters, vec![1, 1, 1]);

    // Every tensor of stage n-1 is unchanged, by name, in stage n.
    for n in 1..=3 {
        let old = checkpoint::load(&run.checkpoint(n - 1)).unwrap();
        let new = checkpoint::load(&run.checkpoint(n)).unwrap();
        for e in old.store.entries() {
            let id = new.store.find(&e.name).unwrap();
            assert_eq!(e.tensor.to_f64_le_bytes(), new.store.get(id).to_f64_le_bytes(), "{}", e.name);
        }
    }

    let report = run_eval(None, &run).unwrap();
    assert!(report.routing_agreement.is_some());
    assert!(run.routing().exists());
}

#[test]
fn matrix_csv_matches_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Seqfft);
    let pre = pretrained(tmp.path(), &cfg);
    let run = RunDir::new(tmp.path().join("s"));
    run_learn(Some(&cfg), &run, &init(&pre)).unwrap();
    let report = run_eval(None, &run).unwrap();
    assert_eq!(read_eval_report(&run).unwrap(), report);

    let mut rd = csv::Reader::from_path(run.matrix()).unwrap();
    let rows: Vec<(usize, usize, f64)> = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    let n = cfg.suite.n_stream;
    assert_eq!(rows.len(), n * (n + 1) / 2);
    for (task, stage, r) in rows {
        assert!(stage >= task);
        assert_eq!(report.matrix.get(task - 1, stage - 1), Some(r));
    }
    let again = clare_core::eval::metrics(&report.matrix).unwrap();
    assert_eq!(again, report.metrics);
}

#[test]
fn sequential_finetuning_moves_every_weight_and_adds_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Seqfft);
    let pre = pretrained(tmp.path(), &cfg);
    let run = RunDir::new(tmp.path().join("s"));
    let records = run_learn(Some(&cfg), &run, &init(&pre)).unwrap();
    for r in &records {
        assert_eq!(r.adapters, vec![0, 0, 0]);
        assert_eq!(r.bank_params, 0);
        assert!(!r.frozen_past);
    }
    let before = checkpoint::load(&run.checkpoint(0)).unwrap();
    let after = checkpoint::load(&run.checkpoint(1)).unwrap();
    for (a, b) in before.store.entries().iter().zip(after.store.entries()) {
        assert_eq!(a.name, b.name);
        assert_ne!(a.tensor, b.tensor, "{} unchanged", a.name);
    }
}

#[test]
fn replay_mixes_half_old_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Er);
    cfg.stage.adapter_steps = 100;
    cfg.stage.batch_size = 16;
    let pre = pretrained(tmp.path(), &cfg);
    let run = RunDir::new(tmp.path().join("e"));
    let records = run_learn(Some(&cfg), &run, &init(&pre)).unwrap();
    assert_eq!(records[0].replayed_rows, 0);
    let rows = (cfg.stage.adapter_steps as usize * cfg.stage.batch_size) as f64;
    for r in &records[1..] {
        let frac = r.replayed_rows as f64 / rows;
        assert!((frac - 0.5).abs() <= 0.05, "stage {}: {frac}", r.stage);
    }
    assert_eq!(std::fs::read_dir(run.replay()).unwrap().count(), 3);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Clare);
    let pre = pretrained(tmp.path(), &cfg);

    // No checkpoint and no --init.
    let empty = RunDir::new(tmp.path().join("empty"));
    let e = run_learn(Some(&cfg), &empty, &LearnOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 4);

    // Resuming from the wrong stage.
    let run = RunDir::new(tmp.path().join("r"));
    let first = LearnOptions {
        until: Some(1),
        ..init(&pre)
    };
    run_learn(Some(&cfg), &run, &first).unwrap();
    let wrong = LearnOptions {
        from_stage: Some(2),
        ..LearnOptions::default()
    };
    assert_eq!(run_learn(None, &run, &wrong).unwrap_err().exit_code(), 4);

    // Evaluating before every stage exists.
    assert_eq!(run_eval(None, &run).unwrap_err().exit_code(), 4);

    // A different configuration for an existing run.
    let mut other = cfg.clone();
    other.stage.gamma = 1.0;
    assert_eq!(run_learn(Some(&other), &run, &LearnOptions::default()).unwrap_err().exit_code(), 2);

    // A run held by another process.
    let lock = run.lock().unwrap();
    let e = run_learn(None, &run, &LearnOptions::default()).unwrap_err();
    assert!(matches!(e, CliError::Locked(_)));
    drop(lock);
    run_learn(None, &run, &LearnOptions::default()).unwrap();

    // A stream checkpoint is not a valid --init.
    let fresh = RunDir::new(tmp.path().join("f"));
    let bad = LearnOptions {
        init: Some(run.checkpoint(2)),
        ..LearnOptions::default()
    };
    assert_eq!(run_learn(Some(&cfg), &fresh, &bad).unwrap_err().exit_code(), 4);
}

#[test]
fn config_is_recorded_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Clare);
    cfg.stage.gamma = f64::INFINITY;
    let pre = pretrained(tmp.path(), &cfg);
    let stored = ExperimentConfig::load(&pre.config()).unwrap();
    assert_eq!(stored, cfg);
    let text = std::fs::read_to_string(pre.config()).unwrap();
    assert!(text.contains("gamma = \"infinite\""), "{text}");
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["bogus = 1", "[stage]\nbogus = 1", "[model]\nbogus = 1", "[nope]\nx = 1"] {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
    assert!(ExperimentConfig::default().with_overrides(&["stage.nope=1"]).is_err());
    assert!(ExperimentConfig::from_toml("[model]\nwidth = 64").is_ok());
}

fn finished(dir: &Path, name: &str, cfg: &ExperimentConfig, pre: &RunDir) -> PathBuf {
    let run = RunDir::new(dir.join(name));
    run_learn(Some(cfg), &run, &init(pre)).unwrap();
    run_eval(None, &run).unwrap();
    run.root
}

#[test]
fn report_aggregates_seeds_and_refuses_mixed_setups() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny(Method::Clare);
    let pre = pretrained(tmp.path(), &base);
    let mut dirs = Vec::new();
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        dirs.push(finished(tmp.path(), &format!("seed{seed}"), &cfg, &pre));
    }

    let single = report::aggregate(&report::load_runs(&dirs[..1]).unwrap());
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].auc.std, 0.0);

    let runs = report::load_runs(&dirs).unwrap();
    let groups = report::aggregate(&runs);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].seeds, vec![0, 1, 2]);
    let aucs: Vec<f64> = runs.iter().map(|(_, r)| r.metrics.auc).collect();
    let want = report::Stat::of(&aucs);
    assert_eq!(groups[0].auc, want);
    let text = report::render(&groups);
    assert!(text.contains("clare"), "{text}");
    let csv_path = tmp.path().join("table.csv");
    report::write_csv(&groups, &csv_path).unwrap();
    assert!(std::fs::read_to_string(&csv_path).unwrap().lines().count() >= 2);

    let mut odd = base.clone();
    odd.eval.episodes = 4;
    let other = finished(tmp.path(), "odd", &odd, &pre);
    let mut mixed = dirs.clone();
    mixed.push(other);
    assert_eq!(report::load_runs(&mixed).unwrap_err().exit_code(), 2);
}

#[test]
fn sample_std_uses_n_minus_one() {
    let s = report::Stat::of(&[1.0, 2.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!((s.std - 1.0).abs() < 1e-12);
}

#[test]
fn expert_oracle_scores_full_marks() {
    use clare_core::eval::{evaluate, metrics, ExpertPolicy, SuccessMatrix};
    let suite = clare_core::tasks::generate_suite(0, 8, 5).unwrap();
    let expert = ExpertPolicy { horizon: 16, exec_horizon: 8 };
    let n = suite.stream.len();
    let mut m = SuccessMatrix::new(n, 10);
    for (i, t) in suite.stream.iter().enumerate() {
        let r = evaluate(&expert, t, 10, 1).unwrap().rate();
        for k in i..n {
            m.set(i, k, r).unwrap();
        }
    }
    let got = metrics(&m).unwrap();
    assert_eq!((got.auc, got.fwt, got.nbt), (100.0, 100.0, 0.0));
}
