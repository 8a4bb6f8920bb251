//! Run directories and the pretrain, learn and eval commands.
//!
//! ```text
//! <run>/config.toml          resolved configuration
//! <run>/run.json             summary, rewritten by each command
//! <run>/logs.jsonl           append-only event log
//! <run>/checkpoints/stage_NNN.{json,bin}
//! <run>/reports/pretrain.json, reports/stage_NNN.json
//! <run>/replay/              experience-replay buffer (er only)
//! <run>/matrix.csv, metrics.json, params.csv, routing.json
//! ```

use crate::baselines::{finetune, ReplayBuffer, ReplayMix};
use crate::checkpoint::{self, stage_stem};
use crate::config::{ExperimentConfig, Method};
use crate::data::DemoStore;
use crate::error::{CliError, CliResult};
use clare_core::clare::{learn_stage, StageReport};
use clare_core::eval::{evaluate, metrics, routing_audit, Metrics, RoutingAudit, SuccessMatrix};
use clare_core::optim::LrSchedule;
use clare_core::policy::{ActionNormalizer, ObsNormalizer, PolicyModel};
use clare_core::tasks::{collect_demos, generate_suite, Dataset, Suite};
use clare_core::train::{pretrain, ChunkSet, TrainConfig, UniformSampler};
use clare_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Demonstrations used for held-out routing audits are drawn with this seed
/// offset from the suite seed.
const HELD_OUT_SEED: u64 = 0x4E1D;
const HELD_OUT_DEMOS: usize = 10;

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn replay(&self) -> PathBuf {
        self.root.join("replay")
    }
    pub fn matrix(&self) -> PathBuf {
        self.root.join("matrix.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn params(&self) -> PathBuf {
        self.root.join("params.csv")
    }
    pub fn routing(&self) -> PathBuf {
        self.root.join("routing.json")
    }
    pub fn checkpoint(&self, stage: usize) -> PathBuf {
        self.checkpoints().join(format!("{}.json", stage_stem(stage)))
    }

    /// Takes the run's lock file; fails if another process holds it.
    pub fn lock(&self) -> CliResult<RunLock> {
        std::fs::create_dir_all(&self.root).map_err(CliError::io(&self.root))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(self.root.clone())),
            Err(e) => Err(CliError::io(&path)(e)),
        }
    }

    /// Resolves the configuration of this run. A configuration passed on the
    /// command line is recorded on first use and must match afterwards.
    pub fn resolve_config(&self, given: Option<&ExperimentConfig>) -> CliResult<ExperimentConfig> {
        let stored = if self.config().exists() {
            Some(ExperimentConfig::load(&self.config())?)
        } else {
            None
        };
        match (given, stored) {
            (Some(g), Some(s)) if *g != s => Err(CliError::Config(format!(
                "{} was created with a different configuration",
                self.root.display()
            ))),
            (Some(g), None) => {
                std::fs::create_dir_all(&self.root).map_err(CliError::io(&self.root))?;
                checkpoint::write_atomic(&self.config(), g.to_toml().as_bytes())?;
                Ok(g.clone())
            }
            (_, Some(s)) => Ok(s),
            (None, None) => Err(CliError::Config(format!(
                "{} has no config.toml; pass --config",
                self.root.display()
            ))),
        }
    }
}

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Append-only JSON-lines event log.
pub struct EventLog {
    file: File,
    path: PathBuf,
    start: Instant,
}

impl EventLog {
    pub fn open(path: PathBuf) -> CliResult<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(CliError::io(&path))?;
        Ok(EventLog {
            file,
            path,
            start: Instant::now(),
        })
    }

    pub fn event(&mut self, event: &str, fields: serde_json::Value) -> CliResult<()> {
        let mut record = serde_json::json!({ "event": event, "elapsed_s": self.start.elapsed().as_secs_f64() });
        if let (Some(r), serde_json::Value::Object(f)) = (record.as_object_mut(), fields) {
            r.extend(f);
        }
        log::info!("{event}");
        writeln!(self.file, "{record}").map_err(CliError::io(&self.path))
    }
}

/// Task suite and demonstrations of one configuration.
pub struct Workload {
    pub suite: Suite,
    pub pretrain: Vec<Dataset>,
    pub stream: DemoStore,
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig) -> CliResult<Self> {
        let s = &cfg.suite;
        let suite = generate_suite(s.seed, s.n_pretrain, s.n_stream)?;
        let collect = |tasks: &[clare_core::tasks::TaskSpec]| -> CliResult<Vec<Dataset>> {
            tasks
                .iter()
                .map(|t| collect_demos(t, s.demos, s.seed).map_err(CliError::from))
                .collect()
        };
        let pretrain = collect(&suite.pretrain)?;
        let stream = DemoStore::new(collect(&suite.stream)?);
        Ok(Workload {
            suite,
            pretrain,
            stream,
        })
    }
}

fn eval_seed(cfg: &ExperimentConfig, task_id: usize) -> u64 {
    cfg.eval.seed.wrapping_mul(1_000_003).wrapping_add(task_id as u64)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    checkpoint::write_atomic(path, format!("{text}\n").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn mean_tail(losses: &[f64], tail: bool) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    let k = (losses.len() / 10).max(1);
    let s = if tail { &losses[losses.len() - k..] } else { &losses[..k] };
    s.iter().sum::<f64>() / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub loss_first: f64,
    pub loss_last: f64,
    pub base_params: usize,
    /// Success rate per pretraining task, in task order.
    pub success: Vec<f64>,
    pub mean_success: f64,
    pub gate: f64,
    pub gate_passed: bool,
}

/// Trains the backbone on the pretraining tasks and writes `stage_000`.
pub fn run_pretrain(cfg: &ExperimentConfig, run: &RunDir) -> CliResult<PretrainReport> {
    let cfg = run.resolve_config(Some(cfg))?;
    let _lock = run.lock()?;
    let mut log = EventLog::open(run.logs())?;
    log.event("pretrain_start", serde_json::json!({ "seed": cfg.seed, "steps": cfg.pretrain.steps }))?;
    let work = Workload::build(&cfg)?;
    let spec = cfg.model.spec.clone();
    let actions = work
        .pretrain
        .iter()
        .flat_map(|d| d.episodes.iter().flat_map(|e| e.actions.iter().map(|a| &a[..])));
    let normalizer = ActionNormalizer::fit(spec.action_dim, actions)?;
    let rows: Vec<Vec<f64>> = work
        .pretrain
        .iter()
        .flat_map(|d| d.episodes.iter().flat_map(|e| e.observations.iter().map(|o| o.flat())))
        .collect();
    let obs_normalizer = ObsNormalizer::fit(spec.obs.total(), rows.iter().map(|r| &r[..]))?;

    let root = Rng::seed_from_u64(cfg.seed);
    let mut model = PolicyModel::new(spec.clone(), normalizer, &mut root.fork(0))?;
    model.obs_normalizer = obs_normalizer;
    model.euler_steps = cfg.model.euler_steps;
    let sets = work
        .pretrain
        .iter()
        .map(|d| ChunkSet::from_dataset(d, &spec, &model.normalizer))
        .collect::<clare_core::Result<Vec<_>>>()?;
    let tc = TrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        schedule: LrSchedule::Cosine {
            lr: cfg.pretrain.lr,
            total: cfg.pretrain.steps,
        },
    };
    let losses = pretrain(&mut model, &sets, &tc, &mut root.fork(1))?;
    checkpoint::save(&mut model, &run.checkpoints(), &stage_stem(0))?;

    let success = work
        .suite
        .pretrain
        .iter()
        .map(|t| Ok(evaluate(&model, t, cfg.eval.episodes, eval_seed(&cfg, t.id))?.rate()))
        .collect::<CliResult<Vec<f64>>>()?;
    let mean_success = success.iter().sum::<f64>() / success.len() as f64;
    let report = PretrainReport {
        steps: cfg.pretrain.steps,
        loss_first: mean_tail(&losses, false),
        loss_last: mean_tail(&losses, true),
        base_params: model.base_param_count(),
        success,
        mean_success,
        gate: cfg.eval.pretrain_gate,
        gate_passed: mean_success >= cfg.eval.pretrain_gate,
    };
    write_json(&run.reports().join("pretrain.json"), &report)?;
    log.event("pretrain_done", serde_json::to_value(&report).expect("serializable"))?;
    if !report.gate_passed {
        log::warn!(
            "mean pretraining success {:.3} is below the gate {:.3}",
            report.mean_success,
            report.gate
        );
    }
    update_summary(run, "pretrain", serde_json::to_value(&report).expect("serializable"))?;
    Ok(report)
}

/// Outcome of one stream stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub method: Method,
    pub task: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub base_params: usize,
    pub bank_params: usize,
    pub adapters: Vec<usize>,
    /// Accesses to earlier tasks' in-memory demonstrations during the stage.
    pub past_task_reads: u64,
    /// Whether every parameter that existed before the stage is unchanged.
    pub frozen_past: bool,
    /// Rows drawn from the replay buffer (er only).
    pub replayed_rows: u64,
    pub clare: Option<StageReport>,
}

#[derive(Debug, Clone, Default)]
pub struct LearnOptions {
    /// Pretrained checkpoint to start from when the run has none.
    pub init: Option<PathBuf>,
    /// Expected stage of the checkpoint being resumed.
    pub from_stage: Option<usize>,
    /// Last stage to learn; defaults to the end of the stream.
    pub until: Option<usize>,
}

fn param_hash(model: &PolicyModel, ids: &[clare_core::params::ParamId]) -> String {
    hex::encode(Sha256::digest(model.store.snapshot_bytes(ids.iter().copied())))
}

/// Learns stream stages after the latest checkpoint, saving one checkpoint
/// per stage.
pub fn run_learn(cfg: Option<&ExperimentConfig>, run: &RunDir, opts: &LearnOptions) -> CliResult<Vec<StageRecord>> {
    let cfg = run.resolve_config(cfg)?;
    let _lock = run.lock()?;
    let mut log = EventLog::open(run.logs())?;
    let n_stream = cfg.suite.n_stream;
    let until = opts.until.unwrap_or(n_stream);
    if until > n_stream {
        return Err(CliError::Config(format!("stage {until} beyond a stream of {n_stream} tasks")));
    }

    let (start, path) = match checkpoint::latest(&run.checkpoints())? {
        Some(found) => found,
        None => {
            let init = opts.init.as_ref().ok_or_else(|| {
                CliError::Checkpoint(format!(
                    "{} has no checkpoint; run pretrain first or pass --init",
                    run.root.display()
                ))
            })?;
            let mut model = checkpoint::load(init)?;
            if model.stage != 0 || !model.banks_empty() {
                return Err(CliError::Checkpoint(format!("{} is not a pretrained checkpoint", init.display())));
            }
            checkpoint::save(&mut model, &run.checkpoints(), &stage_stem(0))?;
            (0, run.checkpoint(0))
        }
    };
    if let Some(expected) = opts.from_stage {
        if expected != start {
            return Err(CliError::Checkpoint(format!(
                "asked to resume after stage {expected}, but the latest checkpoint is stage {start}"
            )));
        }
    }
    let mut model = checkpoint::load(&path)?;
    if model.stage != start {
        return Err(CliError::Checkpoint(format!("{} holds stage {}", path.display(), model.stage)));
    }
    if model.spec != cfg.model.spec {
        return Err(CliError::Config("checkpoint architecture differs from the configuration".into()));
    }

    let work = Workload::build(&cfg)?;
    let replay = ReplayBuffer::new(run.replay());
    let stage_cfg = cfg.stage.to_core();
    let mut records = Vec::new();
    for n in start + 1..=until {
        let before_reads = work.stream.reads();
        let existing: Vec<_> = model.store.ids().collect();
        let before_hash = param_hash(&model, &existing);
        let data = work.stream.get(n - 1);
        let set = ChunkSet::from_dataset(data, &model.spec, &model.normalizer)?;
        let mut rng = Rng::seed_from_u64(cfg.seed).fork(100 + n as u64);
        log.event("stage_start", serde_json::json!({ "stage": n, "method": cfg.method.name, "task": data.task }))?;

        let mut replayed_rows = 0;
        let (losses, clare) = match cfg.method.name {
            Method::Clare => {
                let report = learn_stage(&mut model, &set, &stage_cfg, &mut rng)?;
                (vec![report.adapter_loss_first, report.adapter_loss_last], Some(report))
            }
            Method::Seqfft => {
                let mut src = UniformSampler::new(vec![&set])?;
                let l = finetune(
                    &mut model,
                    &mut src,
                    stage_cfg.adapter_steps,
                    stage_cfg.batch_size,
                    cfg.method.finetune_lr,
                    &mut rng,
                )?;
                model.stage = n;
                (l, None)
            }
            Method::Er => {
                let past = replay.load_all()?;
                let past_sets = past
                    .iter()
                    .map(|d| ChunkSet::from_dataset(d, &model.spec, &model.normalizer))
                    .collect::<clare_core::Result<Vec<_>>>()?;
                let mut src = ReplayMix::new(&set, &past_sets, cfg.method.replay_fraction)?;
                let l = finetune(
                    &mut model,
                    &mut src,
                    stage_cfg.adapter_steps,
                    stage_cfg.batch_size,
                    cfg.method.finetune_lr,
                    &mut rng,
                )?;
                replayed_rows = src.replayed_rows;
                replay.insert(data, &model.spec.obs)?;
                model.stage = n;
                (l, None)
            }
        };
        let after_reads = work.stream.reads();
        let past_task_reads: u64 = (0..n - 1).map(|k| after_reads[k] - before_reads[k]).sum();
        let frozen_past = param_hash(&model, &existing) == before_hash;
        if cfg.method.name == Method::Clare && (!frozen_past || past_task_reads != 0) {
            return Err(CliError::Numerical(format!(
                "stage {n} modified earlier parameters or read earlier data"
            )));
        }
        let manifest = checkpoint::save(&mut model, &run.checkpoints(), &stage_stem(n))?;
        let record = StageRecord {
            stage: n,
            method: cfg.method.name,
            task: data.task,
            loss_first: mean_tail(&losses, false),
            loss_last: mean_tail(&losses, true),
            base_params: manifest.base_params,
            bank_params: manifest.bank_params,
            adapters: model.banks.iter().map(|b| b.num_adapters()).collect(),
            past_task_reads,
            frozen_past,
            replayed_rows,
            clare,
        };
        write_json(&run.reports().join(format!("{}.json", stage_stem(n))), &record)?;
        log.event("stage_done", serde_json::to_value(&record).expect("serializable"))?;
        records.push(record);
    }
    update_summary(run, "learned_stages", serde_json::json!(until.max(start)))?;
    Ok(records)
}

/// Routing audit of one stream task against the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRouting {
    pub task: usize,
    pub stage: usize,
    #[serde(flatten)]
    pub audit: RoutingAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seed: u64,
    #[serde(with = "crate::config::gamma_format")]
    pub gamma: f64,
    pub episodes: usize,
    pub matrix: SuccessMatrix,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Adapters per expandable layer after the last stage.
    pub adapters: Vec<usize>,
    pub total_adapters: usize,
    pub base_params: usize,
    pub final_bank_params: usize,
    /// Parameters added by each stage over the base count.
    pub added_fraction: Vec<f64>,
    /// Mean held-out routing agreement over tasks and layers (clare only).
    pub routing_agreement: Option<f64>,
}

/// Fills the success matrix from the per-stage checkpoints and writes the
/// metric files.
pub fn run_eval(cfg: Option<&ExperimentConfig>, run: &RunDir) -> CliResult<EvalReport> {
    let cfg = run.resolve_config(cfg)?;
    let _lock = run.lock()?;
    let mut log = EventLog::open(run.logs())?;
    let n_stream = cfg.suite.n_stream;
    let suite = generate_suite(cfg.suite.seed, cfg.suite.n_pretrain, n_stream)?;
    let mut matrix = SuccessMatrix::new(n_stream, cfg.eval.episodes);
    let mut params_rows = Vec::new();
    let mut model = None;
    let mut prev_bank = 0usize;
    let mut added_fraction = Vec::new();
    for m in 1..=n_stream {
        let path = run.checkpoint(m);
        if !path.exists() {
            return Err(CliError::Checkpoint(format!("missing checkpoint for stage {m}: {}", path.display())));
        }
        let mdl = checkpoint::load(&path)?;
        if mdl.stage != m {
            return Err(CliError::Checkpoint(format!("{} holds stage {}", path.display(), mdl.stage)));
        }
        for n in 1..=m {
            let task = &suite.stream[n - 1];
            let r = evaluate(&mdl, task, cfg.eval.episodes, eval_seed(&cfg, task.id))?.rate();
            matrix.set(n - 1, m - 1, r)?;
        }
        let bank = mdl.bank_param_count();
        let base = mdl.base_param_count();
        added_fraction.push((bank - prev_bank) as f64 / base as f64);
        prev_bank = bank;
        params_rows.push((
            m,
            base,
            bank,
            mdl.banks.iter().map(|b| b.num_adapters()).sum::<usize>(),
            mdl.banks.iter().map(|b| b.discriminators.len()).sum::<usize>(),
        ));
        log.event("eval_stage", serde_json::json!({ "stage": m, "row": (0..m).map(|n| matrix.get(n, m - 1)).collect::<Vec<_>>() }))?;
        model = Some(mdl);
    }
    let model = model.ok_or_else(|| CliError::Config("empty stream".into()))?;
    let metrics = metrics(&matrix)?;

    let routing_agreement = if cfg.method.name == Method::Clare {
        let mut audits = Vec::new();
        for (n, task) in suite.stream.iter().enumerate() {
            let held_out = collect_demos(task, HELD_OUT_DEMOS, cfg.suite.seed ^ HELD_OUT_SEED)?;
            let set = ChunkSet::from_dataset(&held_out, &model.spec, &model.normalizer)?;
            let mut rng = Rng::seed_from_u64(cfg.eval.seed).fork(task.id as u64);
            audits.push(TaskRouting {
                task: task.id,
                stage: n + 1,
                audit: routing_audit(&model, n + 1, &set, &mut rng)?,
            });
        }
        write_json(&run.routing(), &audits)?;
        let all: Vec<f64> = audits.iter().flat_map(|a| a.audit.agreement.clone()).collect();
        Some(all.iter().sum::<f64>() / all.len() as f64)
    } else {
        None
    };

    let mut w = csv::Writer::from_path(run.matrix()).map_err(|e| CliError::Config(e.to_string()))?;
    w.write_record(["task", "stage", "success"]).map_err(|e| CliError::Config(e.to_string()))?;
    for n in 0..n_stream {
        for m in n..n_stream {
            let r = matrix.get(n, m).expect("filled");
            w.write_record([(n + 1).to_string(), (m + 1).to_string(), format!("{r}")])
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
    }
    w.flush().map_err(CliError::io(run.matrix()))?;
    let mut w = csv::Writer::from_path(run.params()).map_err(|e| CliError::Config(e.to_string()))?;
    w.write_record(["stage", "base_params", "bank_params", "adapters", "discriminators", "added_fraction"])
        .map_err(|e| CliError::Config(e.to_string()))?;
    for (i, (m, base, bank, a, d)) in params_rows.iter().enumerate() {
        w.write_record([
            m.to_string(),
            base.to_string(),
            bank.to_string(),
            a.to_string(),
            d.to_string(),
            format!("{}", added_fraction[i]),
        ])
        .map_err(|e| CliError::Config(e.to_string()))?;
    }
    w.flush().map_err(CliError::io(run.params()))?;

    let adapters: Vec<usize> = model.banks.iter().map(|b| b.num_adapters()).collect();
    let report = EvalReport {
        method: cfg.method.name,
        seed: cfg.seed,
        gamma: cfg.stage.gamma,
        episodes: cfg.eval.episodes,
        matrix,
        metrics,
        total_adapters: adapters.iter().sum(),
        adapters,
        base_params: model.base_param_count(),
        final_bank_params: model.bank_param_count(),
        added_fraction,
        routing_agreement,
    };
    write_json(&run.metrics(), &report)?;
    log.event("eval_done", serde_json::json!({ "auc": metrics.auc, "fwt": metrics.fwt, "nbt": metrics.nbt }))?;
    update_summary(run, "metrics", serde_json::to_value(metrics).expect("serializable"))?;
    Ok(report)
}

pub fn read_eval_report(run: &RunDir) -> CliResult<EvalReport> {
    read_json(&run.metrics())
}

fn update_summary(run: &RunDir, key: &str, value: serde_json::Value) -> CliResult<()> {
    let mut summary: serde_json::Value = if run.summary().exists() {
        read_json(&run.summary())?
    } else {
        serde_json::json!({ "format_version": checkpoint::FORMAT_VERSION })
    };
    if let Some(obj) = summary.as_object_mut() {
        obj.insert(key.to_string(), value);
    }
    write_json(&run.summary(), &summary)
}
