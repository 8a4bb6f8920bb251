//! Aggregation of finished runs into comparison tables.

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::run::{read_eval_report, EvalReport, RunDir};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Group {
    pub method: Method,
    #[serde(with = "crate::config::gamma_format")]
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub auc: Stat,
    pub fwt: Stat,
    pub nbt: Stat,
    pub total_adapters: Stat,
    /// Mean over stages of the per-stage added parameter fraction.
    pub added_fraction: Stat,
    pub routing_agreement: Option<Stat>,
}

/// Loads every run's configuration and metrics. All runs must share the
/// suite, architecture, pretraining and evaluation settings.
pub fn load_runs(dirs: &[PathBuf]) -> CliResult<Vec<(ExperimentConfig, EvalReport)>> {
    if dirs.is_empty() {
        return Err(CliError::Config("no runs given".into()));
    }
    let mut out = Vec::new();
    for d in dirs {
        let run = RunDir::new(d);
        let cfg = ExperimentConfig::load(&run.config())?;
        let report = read_eval_report(&run)?;
        out.push((cfg, report));
    }
    let key = out[0].0.comparison_key();
    for ((cfg, _), dir) in out.iter().zip(dirs) {
        if cfg.comparison_key() != key {
            return Err(CliError::Config(format!(
                "{} is not comparable with {}: suite, model, pretraining or evaluation settings differ",
                dir.display(),
                dirs[0].display()
            )));
        }
    }
    Ok(out)
}

/// Groups runs by method and `gamma` (baselines ignore `gamma`).
pub fn aggregate(runs: &[(ExperimentConfig, EvalReport)]) -> Vec<Group> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for (cfg, _) in runs {
        let k = group_key(cfg);
        if !keys.iter().any(|x| x.0 == k.0 && x.1.to_bits() == k.1.to_bits()) {
            keys.push(k);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(method, gamma)| {
            let members: Vec<&EvalReport> = runs
                .iter()
                .filter(|(c, _)| {
                    let k = group_key(c);
                    k.0 == method && k.1.to_bits() == gamma.to_bits()
                })
                .map(|(_, r)| r)
                .collect();
            let pick = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&members.iter().map(|r| f(r)).collect::<Vec<_>>());
            let routing: Vec<f64> = members.iter().filter_map(|r| r.routing_agreement).collect();
            Group {
                method,
                gamma,
                seeds: members.iter().map(|r| r.seed).collect(),
                auc: pick(&|r| r.metrics.auc),
                fwt: pick(&|r| r.metrics.fwt),
                nbt: pick(&|r| r.metrics.nbt),
                total_adapters: pick(&|r| r.total_adapters as f64),
                added_fraction: pick(&|r| {
                    r.added_fraction.iter().sum::<f64>() / r.added_fraction.len().max(1) as f64
                }),
                routing_agreement: (!routing.is_empty()).then(|| Stat::of(&routing)),
            }
        })
        .collect()
}

fn group_key(cfg: &ExperimentConfig) -> (Method, f64) {
    match cfg.method.name {
        Method::Clare => (Method::Clare, cfg.stage.gamma),
        m => (m, f64::NAN),
    }
}

fn gamma_label(g: f64) -> String {
    if g.is_nan() {
        "-".into()
    } else if g.is_infinite() {
        "inf".into()
    } else {
        format!("{g}")
    }
}

fn pm(s: Stat) -> String {
    format!("{:.1} ± {:.1}", s.mean, s.std)
}

/// Plain-text tables: all groups, then the `gamma` sweep when more than one
/// value was run.
pub fn render(groups: &[Group]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>6} {:>5} {:>14} {:>14} {:>14} {:>9} {:>9}",
        "method", "gamma", "runs", "AUC", "FWT", "NBT", "adapters", "added%"
    );
    for g in groups {
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>5} {:>14} {:>14} {:>14} {:>9.1} {:>9.2}",
            g.method.to_string(),
            gamma_label(g.gamma),
            g.seeds.len(),
            pm(g.auc),
            pm(g.fwt),
            pm(g.nbt),
            g.total_adapters.mean,
            100.0 * g.added_fraction.mean
        );
    }
    let sweep: Vec<&Group> = groups.iter().filter(|g| g.method == Method::Clare).collect();
    if sweep.len() > 1 {
        let _ = writeln!(out, "\ngamma sweep");
        let _ = writeln!(out, "{:>6} {:>9} {:>14} {:>14} {:>9}", "gamma", "adapters", "AUC", "NBT", "added%");
        for g in sweep {
            let _ = writeln!(
                out,
                "{:>6} {:>9.1} {:>14} {:>14} {:>9.2}",
                gamma_label(g.gamma),
                g.total_adapters.mean,
                pm(g.auc),
                pm(g.nbt),
                100.0 * g.added_fraction.mean
            );
        }
    }
    out
}

pub fn write_csv(groups: &[Group], path: &std::path::Path) -> CliResult<()> {
    let err = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "method", "gamma", "runs", "auc_mean", "auc_std", "fwt_mean", "fwt_std", "nbt_mean", "nbt_std",
        "adapters_mean", "added_fraction_mean",
    ])
    .map_err(err)?;
    for g in groups {
        w.write_record([
            g.method.to_string(),
            gamma_label(g.gamma),
            g.seeds.len().to_string(),
            g.auc.mean.to_string(),
            g.auc.std.to_string(),
            g.fwt.mean.to_string(),
            g.fwt.std.to_string(),
            g.nbt.mean.to_string(),
            g.nbt.std.to_string(),
            g.total_adapters.mean.to_string(),
            g.added_fraction.mean.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(CliError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
    }
}
