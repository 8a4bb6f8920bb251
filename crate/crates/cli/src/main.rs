use clap::{Args, Parser, Subcommand};
use clare_cli::config::ExperimentConfig;
use clare_cli::run::{run_eval, run_learn, run_pretrain, LearnOptions, RunDir, Workload};
use clare_cli::{checkpoint, data, report, CliError, CliResult};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clare", version, about = "Continual imitation learning with adapters and autoencoder routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set stage.gamma=inf`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone and write stage 0.
    Pretrain(ConfigArgs),
    /// Learn stream stages after the latest checkpoint.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pretrained checkpoint manifest to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fail unless the latest checkpoint is this stage.
        #[arg(long)]
        from_stage: Option<usize>,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate every stage checkpoint and write the metric files.
    Eval(ConfigArgs),
    /// Pretrain, learn and evaluate in one go.
    All(ConfigArgs),
    /// Write the demonstration datasets of a configuration to files.
    Demos {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate finished runs (mean ± sample std across seeds).
    Report {
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Summarize a checkpoint manifest, dataset file or run directory.
    Inspect { path: PathBuf },
}

fn load_config(path: Option<&Path>, sets: &[String]) -> CliResult<Option<ExperimentConfig>> {
    let base = match path {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None if sets.is_empty() => None,
        None => Some(ExperimentConfig::default()),
    };
    base.map(|c| c.with_overrides(sets)).transpose()
}

/// Configuration for a command on `run`: the given one, or the stored one
/// patched with `sets`.
fn config_for(args: &ConfigArgs) -> CliResult<Option<ExperimentConfig>> {
    let run = RunDir::new(&args.run);
    if args.config.is_none() && run.config().exists() {
        if args.sets.is_empty() {
            return Ok(None);
        }
        return Ok(Some(ExperimentConfig::load(&run.config())?.with_overrides(&args.sets)?));
    }
    load_config(args.config.as_deref(), &args.sets)
}

fn require(cfg: Option<ExperimentConfig>) -> CliResult<ExperimentConfig> {
    cfg.ok_or_else(|| CliError::Config("pass --config or --set".into()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn inspect(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        let run = RunDir::new(path);
        let cfg = ExperimentConfig::load(&run.config())?;
        let latest = checkpoint::latest(&run.checkpoints())?.map(|(n, _)| n);
        println!("method      {}", cfg.method.name);
        println!("seed        {}", cfg.seed);
        println!("gamma       {}", cfg.stage.gamma);
        println!("checkpoint  {}", latest.map_or("none".into(), |n| format!("stage {n}")));
        if run.metrics().exists() {
            let r = clare_cli::run::read_eval_report(&run)?;
            println!("AUC {:.1}  FWT {:.1}  NBT {:.1}", r.metrics.auc, r.metrics.fwt, r.metrics.nbt);
        }
        return Ok(());
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let m = checkpoint::read_manifest(path)?;
            println!("stage {}  base params {}  bank params {}", m.stage, m.base_params, m.bank_params);
            for (l, b) in m.banks.iter().enumerate() {
                println!(
                    "  layer {l} {:?}: {} adapters, {} discriminators, links {:?}",
                    b.site,
                    b.adapters.len(),
                    b.discriminators.len(),
                    b.links
                );
            }
            Ok(())
        }
        Some("clds") => {
            let (ds, obs) = data::read(path)?;
            println!(
                "task {}  episodes {}  steps {}  discarded {}  obs {}",
                ds.task,
                ds.episodes.len(),
                ds.num_steps(),
                ds.discarded,
                obs.total()
            );
            Ok(())
        }
        _ => Err(CliError::Config(format!("cannot inspect {}", path.display()))),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = require(load_config(args.config.as_deref(), &args.sets)?)?;
            print_json(&run_pretrain(&cfg, &RunDir::new(&args.run))?);
        }
        Command::Learn {
            cfg,
            init,
            from_stage,
            until,
        } => {
            let c = config_for(&cfg)?;
            let opts = LearnOptions { init, from_stage, until };
            let records = run_learn(c.as_ref(), &RunDir::new(&cfg.run), &opts)?;
            for r in records {
                println!(
                    "stage {}  adapters {:?}  loss {:.4} -> {:.4}",
                    r.stage, r.adapters, r.loss_first, r.loss_last
                );
            }
        }
        Command::Eval(args) => {
            let c = config_for(&args)?;
            let r = run_eval(c.as_ref(), &RunDir::new(&args.run))?;
            println!("AUC {:.2}  FWT {:.2}  NBT {:.2}", r.metrics.auc, r.metrics.fwt, r.metrics.nbt);
        }
        Command::All(args) => {
            let cfg = require(load_config(args.config.as_deref(), &args.sets)?)?;
            let run = RunDir::new(&args.run);
            let pre = run_pretrain(&cfg, &run)?;
            println!("pretraining success {:.3}", pre.mean_success);
            run_learn(Some(&cfg), &run, &LearnOptions::default())?;
            let r = run_eval(Some(&cfg), &run)?;
            println!("AUC {:.2}  FWT {:.2}  NBT {:.2}", r.metrics.auc, r.metrics.fwt, r.metrics.nbt);
        }
        Command::Demos { config, sets, out } => {
            let cfg = load_config(config.as_deref(), &sets)?.unwrap_or_default();
            let work = Workload::build(&cfg)?;
            let obs = cfg.model.spec.obs;
            for ds in &work.pretrain {
                data::write(&out.join(format!("pretrain_{:03}.clds", ds.task)), ds, &obs)?;
            }
            for n in 0..work.stream.len() {
                let ds = work.stream.get(n);
                data::write(&out.join(format!("stream_{:03}.clds", ds.task)), ds, &obs)?;
            }
        }
        Command::Report { runs, csv } => {
            let loaded = report::load_runs(&runs)?;
            let groups = report::aggregate(&loaded);
            print!("{}", report::render(&groups));
            if let Some(path) = csv {
                report::write_csv(&groups, &path)?;
            }
        }
        Command::Inspect { path } => inspect(&path)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
