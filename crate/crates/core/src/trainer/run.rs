//! Driving runs to completion: output directories, metrics stream, KL
//! snapshots, periodic checkpoints, resumption, and multi-seed summaries.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{read_metrics, DiagnosticsRecord, MetricsWriter};
use crate::diversity::{closest_file_name, kl_file_name, write_kl};
use crate::error::{Error, Result};
use crate::exec::{map_chunks, Parallelism};
use crate::nets::Networks;

use super::checkpoint::{checkpoint, restore};
use super::{kl_due, networks, train_iteration, EnsembleConfig, RunState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("ckpt_{iteration:04}.bin"))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<DiagnosticsRecord>,
    pub state: RunState,
}

fn prepare_dir(cfg: &EnsembleConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join(RESOLVED_FILE);
    std::fs::write(&resolved, cfg.to_resolved_string()).map_err(|e| Error::io(&resolved, e))
}

fn drive(
    cfg: &EnsembleConfig,
    nets: &Networks,
    mut state: RunState,
    mut writer: MetricsWriter,
    mut records: Vec<DiagnosticsRecord>,
) -> Result<RunOutcome> {
    let dir = cfg.out_dir.clone();
    while state.iteration < cfg.iterations {
        let out = train_iteration(nets, &mut state, cfg)?;
        let it = out.record.iteration;
        if let Some(kl) = &out.kl {
            write_kl(&dir, it, kl)?;
        }
        writer.emit(&out.record)?;
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            checkpoint(&state, cfg, &checkpoint_path(&dir, it))?;
        }
        if it % cfg.diag_interval == 0 {
            info!(
                "{}: iter {it} return {:?} dev {:.4} ess_rate {:.4} lr {:.2e}",
                dir.display(),
                out.record.leader_return,
                out.record.mean_is_deviation,
                out.record.ess_rate,
                out.record.lr
            );
        }
        records.push(out.record);
    }
    checkpoint(&state, cfg, &dir.join(FINAL_CHECKPOINT))?;
    Ok(RunOutcome { dir, records, state })
}

/// Fresh run into `cfg.out_dir`.
pub fn run_single(cfg: &EnsembleConfig) -> Result<RunOutcome> {
    let cfg = cfg.clone().resolve()?;
    prepare_dir(&cfg)?;
    let nets = networks(&cfg);
    let state = RunState::new(&cfg, &nets)?;
    let writer = MetricsWriter::create(&cfg.out_dir.join(METRICS_FILE))?;
    drive(&cfg, &nets, state, writer, Vec::new())
}

/// Continues a run from `checkpoint_file` up to `cfg.iterations`. Metrics
/// past the checkpoint's iteration are discarded and regenerated.
pub fn resume_run(cfg: &EnsembleConfig, checkpoint_file: &Path) -> Result<RunOutcome> {
    let cfg = cfg.clone().resolve()?;
    let (state, _) = restore(checkpoint_file, &cfg)?;
    prepare_dir(&cfg)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    let keep = state.iteration as usize;
    let mut records = if metrics.exists() {
        read_metrics(&metrics)?
    } else {
        Vec::new()
    };
    records.truncate(keep);
    if records.len() < keep {
        warn!(
            "{} holds {} records but the checkpoint is at iteration {keep}",
            metrics.display(),
            records.len()
        );
    }
    // The shorter run snapshotted its last iteration; an uninterrupted run
    // would not have, unless the schedule also lands there.
    for rec in &mut records {
        if rec.kl_matrix.is_some() && !kl_due(&cfg, rec.iteration) {
            for name in [kl_file_name(rec.iteration), closest_file_name(rec.iteration)] {
                let path = cfg.out_dir.join(name);
                match std::fs::remove_file(&path) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&path, e)),
                    _ => {}
                }
            }
            rec.kl_matrix = None;
        }
    }
    let writer = MetricsWriter::rewrite(&metrics, &records)?;
    drive(&cfg, &networks(&cfg), state, writer, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Stat {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub env_steps: u64,
    pub leader_return: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub failures: Vec<(u64, String)>,
    pub curve: Vec<CurvePoint>,
    pub final_return: Option<Stat>,
    pub final_is_deviation: Option<Stat>,
    pub final_ess_rate: Option<Stat>,
}

/// Aggregates per-seed metric streams iteration by iteration.
pub fn summarize(runs: &[Vec<DiagnosticsRecord>]) -> Summary {
    let len = runs.iter().map(Vec::len).max().unwrap_or(0);
    let curve = (0..len)
        .map(|i| {
            let at: Vec<&DiagnosticsRecord> = runs.iter().filter_map(|r| r.get(i)).collect();
            let returns: Vec<f64> = at.iter().filter_map(|r| r.leader_return).collect();
            CurvePoint {
                iteration: at[0].iteration,
                env_steps: at[0].env_steps,
                leader_return: mean_std(&returns),
            }
        })
        .collect();
    let finals: Vec<&DiagnosticsRecord> = runs.iter().filter_map(|r| r.last()).collect();
    let collect = |f: &dyn Fn(&DiagnosticsRecord) -> Option<f64>| {
        mean_std(&finals.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    Summary {
        seeds: Vec::new(),
        failures: Vec::new(),
        curve,
        final_return: collect(&|r| r.leader_return),
        final_is_deviation: collect(&|r| Some(r.mean_is_deviation)),
        final_ess_rate: collect(&|r| Some(r.ess_rate)),
    }
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,env_steps,mean_return,std_return,seeds\n");
        for p in &self.curve {
            let (m, s, n) = match p.leader_return {
                Some(st) => (st.mean.to_string(), st.std.to_string(), st.n),
                None => (String::new(), String::new(), 0),
            };
            out.push_str(&format!("{},{},{m},{s},{n}\n", p.iteration, p.env_steps));
        }
        out
    }
}

/// Output directory of `seed` within an experiment rooted at `base`.
pub fn seed_dir(base: &Path, seed: u64, num_seeds: usize) -> PathBuf {
    if num_seeds == 1 {
        base.to_path_buf()
    } else {
        base.join(format!("seed_{seed}"))
    }
}

/// Runs every seed (in parallel when `parallel` and the `parallel` feature
/// are on). A failing seed is recorded and the others continue. A single
/// seed writes straight into `cfg.out_dir`.
pub fn run_experiment(cfg: &EnsembleConfig, seeds: &[u64], parallel: bool) -> Result<Summary> {
    if seeds.is_empty() {
        return Err(Error::Config("an experiment needs at least one seed".into()));
    }
    let base = cfg.out_dir.clone();
    let par = if parallel {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    };
    let results = map_chunks(par, seeds.len(), |i| {
        let mut c = cfg.clone();
        c.seed = seeds[i];
        c.out_dir = seed_dir(&base, seeds[i], seeds.len());
        run_single(&c).map(|o| o.records).map_err(|e| e.to_string())
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(records) => ok.push(records),
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                failures.push((*seed, e));
            }
        }
    }
    let mut summary = summarize(&ok);
    summary.seeds = seeds.to_vec();
    summary.failures = failures;
    std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let json = base.join(SUMMARY_JSON);
    std::fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))?;
    let csv = base.join(SUMMARY_CSV);
    std::fs::write(&csv, summary.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(summary)
}
