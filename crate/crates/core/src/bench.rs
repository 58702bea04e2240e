//! Experiment harness: single runs, noise-ratio sweeps, weight audits,
//! and summary reports. All artifacts are plain delimited text so they
//! diff cleanly and feed any plotting tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Method};
use crate::datagen::{
    gen_multilabel, gen_segmentation, inject_noise, split, DataError, Dataset, NoiseSpec, TaskKind,
};
use crate::metrics::mean_and_std;
use crate::model::save_checkpoint;
use crate::trainer::{train, RunOutcome, TrainError};

// Streams for dataset construction; independent of model/shuffle seeds
// and of the method, so every method sees identical data at a given
// (task, ratio, seed).
const DATA_STREAM: u64 = 0x8E5C_41F0_913B_2A67;
const SPLIT_STREAM: u64 = 0x17C3_99A4_6F0D_5E21;
const NOISE_STREAM: u64 = 0x5DA2_7730_CE44_8B19;

/// Train/validation/test fractions used by every run.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.52, 0.24, 0.24);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// One result row of a run or sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub task: TaskKind,
    pub method: Method,
    pub noise_ratio: f64,
    pub seed: u64,
    /// Test metric of the selected checkpoint (macro-F1 or OA); NaN on
    /// failure.
    pub metric: f64,
    pub micro_f1: Option<f64>,
    pub mean_weight_noisy: Option<f64>,
    pub mean_weight_clean: Option<f64>,
    pub runtime_secs: f64,
    pub failure: Option<String>,
}

impl SweepRow {
    pub const HEADER: &'static str = "task,method,noise_ratio,seed,metric,micro_f1,mean_weight_noisy,mean_weight_clean,runtime_secs,failure";

    fn to_csv(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.method,
            self.noise_ratio,
            self.seed,
            self.metric,
            opt(&self.micro_f1),
            opt(&self.mean_weight_noisy),
            opt(&self.mean_weight_clean),
            self.runtime_secs,
            self.failure.clone().unwrap_or_default(),
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.splitn(10, ',').collect();
        if fields.len() != 10 {
            return Err(BenchError::Malformed(format!(
                "expected 10 fields, got {}: {line}",
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| BenchError::Malformed(format!("{e}: {s}")))
        };
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s).map(Some)
            }
        };
        Ok(SweepRow {
            task: fields[0]
                .parse()
                .map_err(|_| BenchError::Malformed(format!("bad task {}", fields[0])))?,
            method: fields[1]
                .parse()
                .map_err(|_| BenchError::Malformed(format!("bad method {}", fields[1])))?,
            noise_ratio: parse_f(fields[2])?,
            seed: fields[3]
                .parse()
                .map_err(|e| BenchError::Malformed(format!("{e}: {}", fields[3])))?,
            metric: parse_f(fields[4])?,
            micro_f1: parse_opt(fields[5])?,
            mean_weight_noisy: parse_opt(fields[6])?,
            mean_weight_clean: parse_opt(fields[7])?,
            runtime_secs: parse_f(fields[8])?,
            failure: (!fields[9].is_empty()).then(|| fields[9].to_string()),
        })
    }
}

/// Builds the dataset for a config and splits it, injecting label noise
/// into the training split only. Data depends on (task, dims, ratio,
/// seed) but never on the method.
pub fn prepare_splits(cfg: &ExperimentConfig) -> Result<[Dataset; 3]> {
    let data = match cfg.task {
        TaskKind::Multilabel => gen_multilabel(&cfg.dataset.multilabel, cfg.seed ^ DATA_STREAM)?,
        TaskKind::Segmentation => {
            gen_segmentation(&cfg.dataset.segmentation, cfg.seed ^ DATA_STREAM)?
        }
    };
    let [mut train_split, val, test] = split(&data, SPLIT_FRACTIONS, cfg.seed ^ SPLIT_STREAM)?;
    inject_noise(
        &mut train_split,
        &NoiseSpec {
            ratio: cfg.noise_ratio,
            seed: cfg.seed ^ NOISE_STREAM,
        },
    )?;
    Ok([train_split, val, test])
}

/// Trains one configuration, writes all artifacts into `run_dir`, and
/// returns the result row.
pub fn run(cfg: &ExperimentConfig, run_dir: &Path) -> Result<SweepRow> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    let started = Instant::now();
    let splits = prepare_splits(cfg)?;
    let [train_split, val, test] = &splits;

    let outcome = match train(cfg, train_split, val, test) {
        Ok(o) => o,
        Err(TrainError::Aborted {
            epoch,
            batch,
            source,
            diagnostics,
        }) => {
            fs::write(
                run_dir.join("abort_dump.txt"),
                format!("{source}\n\n{diagnostics}\n"),
            )?;
            return Err(TrainError::Aborted {
                epoch,
                batch,
                source,
                diagnostics,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    write_artifacts(cfg, run_dir, &outcome)?;
    let last = outcome.reports.last();
    let row = SweepRow {
        task: cfg.task,
        method: cfg.method,
        noise_ratio: cfg.noise_ratio,
        seed: cfg.seed,
        metric: outcome.test.primary,
        micro_f1: outcome.test.micro_f1,
        mean_weight_noisy: last.and_then(|r| r.mean_weight_noisy),
        mean_weight_clean: last.and_then(|r| r.mean_weight_clean),
        runtime_secs: started.elapsed().as_secs_f64(),
        failure: None,
    };
    write_rows(&run_dir.join("result.csv"), std::slice::from_ref(&row))?;
    Ok(row)
}

fn write_artifacts(cfg: &ExperimentConfig, run_dir: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut epochs = String::from(
        "epoch,alpha,weighted_main,unweighted_main,weighted_svae,unweighted_svae,val_metric,mean_weight_noisy,mean_weight_clean\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &outcome.reports {
        epochs.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.alpha,
            r.weighted_main,
            r.unweighted_main,
            opt(r.weighted_svae),
            opt(r.unweighted_svae),
            r.val_metric,
            opt(r.mean_weight_noisy),
            opt(r.mean_weight_clean),
        ));
    }
    fs::write(run_dir.join("epochs.csv"), epochs)?;

    if cfg.train.audit_log {
        let mut audit =
            String::from("epoch,batch,sample_id,main_loss,svae_loss,gap,weight,is_noisy\n");
        for row in &outcome.audit {
            audit.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.epoch,
                row.batch,
                row.sample_id,
                row.main_loss,
                row.svae_loss,
                row.gap,
                row.weight,
                row.is_noisy.map(|b| b.to_string()).unwrap_or_default(),
            ));
        }
        fs::write(run_dir.join("audit.csv"), audit)?;
    }

    let named: Vec<(String, &crate::tensor::Tensor)> = outcome
        .checkpoint
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    save_checkpoint(&run_dir.join("checkpoint"), &named)?;
    Ok(())
}

/// Directory name for one run inside a sweep.
pub fn run_dir_name(task: TaskKind, method: Method, ratio: f64, seed: u64) -> String {
    format!(
        "{task}_{method}_rho{:03}_seed{seed}",
        (ratio * 100.0).round() as u32
    )
}

/// Full grid sweep. Runs execute in parallel worker threads; each run is
/// fully isolated and failures become explicit rows instead of aborting
/// the sweep. Rows come back sorted by (task, method, ratio, seed).
pub fn sweep(
    base: &ExperimentConfig,
    tasks: &[TaskKind],
    methods: &[Method],
    ratios: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out_dir)?;
    let mut jobs = Vec::new();
    for &task in tasks {
        for &method in methods {
            for &ratio in ratios {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.task = task;
                    cfg.method = method;
                    cfg.noise_ratio = ratio;
                    cfg.seed = seed;
                    jobs.push(cfg);
                }
            }
        }
    }
    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|cfg| {
            let dir = out_dir.join(run_dir_name(cfg.task, cfg.method, cfg.noise_ratio, cfg.seed));
            run(cfg, &dir).unwrap_or_else(|e| SweepRow {
                task: cfg.task,
                method: cfg.method,
                noise_ratio: cfg.noise_ratio,
                seed: cfg.seed,
                metric: f64::NAN,
                micro_f1: None,
                mean_weight_noisy: None,
                mean_weight_clean: None,
                runtime_secs: 0.0,
                failure: Some(e.to_string().replace(['\n', ','], ";")),
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (format!("{}", a.task), format!("{}", a.method))
            .cmp(&(format!("{}", b.task), format!("{}", b.method)))
            .then(a.noise_ratio.total_cmp(&b.noise_ratio))
            .then(a.seed.cmp(&b.seed))
    });
    write_rows(&out_dir.join("results.csv"), &rows)?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = format!("{}\n", SweepRow::HEADER);
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(SweepRow::from_csv)
        .collect()
}

/// Sample ranking from a run's weight audit trail.
#[derive(Debug)]
pub struct AuditReport {
    /// `(sample_id, mean weight over the final K epochs, flag)` sorted
    /// ascending by weight, ties broken by sample id.
    pub ranked: Vec<(usize, f64, Option<bool>)>,
    /// Precision of the lowest-weight `floor(ratio * N)` samples against
    /// the hidden flags; `None` when the run had no noise or no flags.
    pub precision_at_noise_count: Option<f64>,
    pub epochs_used: usize,
}

/// Ranks training samples by mean importance weight over the final
/// `last_k` epochs of a finished run with audit logging enabled.
pub fn audit(run_dir: &Path, last_k: usize) -> Result<AuditReport> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let audit_path = run_dir.join("audit.csv");
    if !audit_path.exists() {
        return Err(BenchError::Malformed(format!(
            "no audit log at {}; rerun with train.audit_log=true",
            audit_path.display()
        )));
    }
    let text = fs::read_to_string(&audit_path)?;
    let mut rows: Vec<(usize, usize, f64, Option<bool>)> = Vec::new(); // (epoch, id, w, flag)
    let mut max_epoch = 0usize;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(BenchError::Malformed(format!("bad audit row: {line}")));
        }
        let epoch: usize = f[0]
            .parse()
            .map_err(|e| BenchError::Malformed(format!("{e}")))?;
        let id: usize = f[2]
            .parse()
            .map_err(|e| BenchError::Malformed(format!("{e}")))?;
        let w: f64 = f[6]
            .parse()
            .map_err(|e| BenchError::Malformed(format!("{e}")))?;
        let flag = match f[7] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(BenchError::Malformed(format!("bad flag {other}"))),
        };
        max_epoch = max_epoch.max(epoch);
        rows.push((epoch, id, w, flag));
    }
    if rows.is_empty() {
        return Err(BenchError::Malformed("audit log has no rows".into()));
    }
    let first_epoch = (max_epoch + 1).saturating_sub(last_k);
    let mut acc: std::collections::BTreeMap<usize, (f64, usize, Option<bool>)> =
        std::collections::BTreeMap::new();
    let mut epochs_seen = std::collections::BTreeSet::new();
    for (epoch, id, w, flag) in rows {
        if epoch < first_epoch {
            continue;
        }
        epochs_seen.insert(epoch);
        let entry = acc.entry(id).or_insert((0.0, 0, flag));
        entry.0 += w;
        entry.1 += 1;
        entry.2 = flag;
    }
    let mut ranked: Vec<(usize, f64, Option<bool>)> = acc
        .into_iter()
        .map(|(id, (sum, n, flag))| (id, sum / n as f64, flag))
        .collect();
    // Ascending mean weight; sample id breaks ties.
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let n = ranked.len();
    let k = (cfg.noise_ratio * n as f64).floor() as usize;
    let flags_known = ranked.iter().all(|(_, _, f)| f.is_some());
    let precision = (k > 0 && flags_known).then(|| {
        let hits = ranked[..k]
            .iter()
            .filter(|(_, _, f)| f.unwrap_or(false))
            .count();
        hits as f64 / k as f64
    });

    let mut out = String::from("rank,sample_id,mean_weight,is_noisy\n");
    for (rank, (id, w, flag)) in ranked.iter().enumerate() {
        out.push_str(&format!(
            "{rank},{id},{w},{}\n",
            flag.map(|b| b.to_string()).unwrap_or_default()
        ));
    }
    fs::write(run_dir.join("audit_report.csv"), out)?;
    Ok(AuditReport {
        ranked,
        precision_at_noise_count: precision,
        epochs_used: epochs_seen.len(),
    })
}

/// Aggregated summary over seeds for one (task, method, ratio) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub task: TaskKind,
    pub method: Method,
    pub noise_ratio: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub failures: usize,
}

/// Aggregates rows into per-cell mean +- std, writes an aligned text
/// table and per-(task, method) series files, and returns the cells.
pub fn report(rows: &[SweepRow], out_dir: &Path) -> Result<(Vec<SummaryCell>, String)> {
    if rows.is_empty() {
        return Err(BenchError::Malformed("no rows to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut cells: Vec<SummaryCell> = Vec::new();
    let mut keys: Vec<(TaskKind, Method, f64)> = rows
        .iter()
        .map(|r| (r.task, r.method, r.noise_ratio))
        .collect();
    keys.sort_by(|a, b| {
        (format!("{}", a.0), format!("{}", a.1))
            .cmp(&(format!("{}", b.0), format!("{}", b.1)))
            .then(a.2.total_cmp(&b.2))
    });
    keys.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2 == b.2);
    for (task, method, ratio) in keys {
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.task == task && r.method == method && r.noise_ratio == ratio)
            .collect();
        let ok: Vec<f64> = group
            .iter()
            .filter(|r| r.failure.is_none() && r.metric.is_finite())
            .map(|r| r.metric)
            .collect();
        let (mean, std) = mean_and_std(&ok);
        cells.push(SummaryCell {
            task,
            method,
            noise_ratio: ratio,
            mean,
            std,
            seeds: ok.len(),
            failures: group.len() - ok.len(),
        });
    }

    // Table: per (task, ratio), methods ordered by mean metric.
    let mut table = format!(
        "{:<14} {:>6}  {:<16} {:>9} {:>9} {:>6} {:>6}\n",
        "task", "noise", "method", "mean", "std", "seeds", "fails"
    );
    let mut blocks: Vec<(TaskKind, f64)> =
        cells.iter().map(|c| (c.task, c.noise_ratio)).collect();
    blocks.sort_by(|a, b| format!("{}", a.0).cmp(&format!("{}", b.0)).then(a.1.total_cmp(&b.1)));
    blocks.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    for (task, ratio) in blocks {
        let mut in_block: Vec<&SummaryCell> = cells
            .iter()
            .filter(|c| c.task == task && c.noise_ratio == ratio)
            .collect();
        in_block.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        for c in in_block {
            table.push_str(&format!(
                "{:<14} {:>6.2}  {:<16} {:>9.4} {:>9.4} {:>6} {:>6}\n",
                format!("{}", c.task),
                c.noise_ratio,
                format!("{}", c.method),
                c.mean,
                c.std,
                c.seeds,
                c.failures
            ));
        }
    }
    fs::write(out_dir.join("summary.txt"), &table)?;

    // Plot-ready series: one file per (task, method), ratio-ascending.
    let mut series_keys: Vec<(TaskKind, Method)> =
        cells.iter().map(|c| (c.task, c.method)).collect();
    series_keys.sort_by_key(|k| (format!("{}", k.0), format!("{}", k.1)));
    series_keys.dedup();
    for (task, method) in series_keys {
        let mut text = String::from("noise_ratio,mean,std,seeds\n");
        let mut in_series: Vec<&SummaryCell> = cells
            .iter()
            .filter(|c| c.task == task && c.method == method)
            .collect();
        in_series.sort_by(|a, b| a.noise_ratio.total_cmp(&b.noise_ratio));
        for c in in_series {
            text.push_str(&format!(
                "{},{},{},{}\n",
                c.noise_ratio, c.mean, c.std, c.seeds
            ));
        }
        fs::write(out_dir.join(format!("series_{task}_{method}.csv")), text)?;
    }
    Ok((cells, table))
}

/// Convenience: a run directory path under the configured output dir.
pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .join(run_dir_name(cfg.task, cfg.method, cfg.noise_ratio, cfg.seed))
}
