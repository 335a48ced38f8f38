use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use epg_core::diversity::{
    closest_agents, closest_file_name, closest_from_csv, closest_to_csv, kl_file_name, KlMatrix,
};
use epg_core::envs::reference_return;
use epg_core::report::{comparison_csv, labels, load_run, window_csv, window_summary};
use epg_core::trainer::checkpoint::restore;
use epg_core::trainer::run::{FINAL_CHECKPOINT, RESOLVED_FILE};
use epg_core::trainer::{evaluate_agent, networks, EnsembleConfig};
use log::warn;

use crate::Usage;

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories holding metrics.jsonl (at least two).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Centre of the eleven-iteration summary window (default: last
    /// iteration every run reached).
    #[arg(long)]
    at: Option<u64>,
    /// Write comparison.csv and window.csv here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn compare(a: CompareArgs) -> Result<()> {
    if a.runs.len() < 2 {
        return Err(Usage(format!(
            "compare needs at least two run directories, got {}",
            a.runs.len()
        ))
        .into());
    }
    let dirs: Vec<&Path> = a.runs.iter().map(PathBuf::as_path).collect();
    let names = labels(&dirs);
    let mut runs = Vec::with_capacity(dirs.len());
    for (name, dir) in names.into_iter().zip(&dirs) {
        runs.push((name, load_run(dir)?));
    }
    let common_last = runs
        .iter()
        .map(|(_, r)| r.last().map_or(0, |x| x.iteration))
        .min()
        .unwrap_or(0);
    let at = a.at.unwrap_or(common_last);
    let windows = runs
        .iter()
        .map(|(name, records)| {
            window_summary(records, at)
                .map(|w| (name.clone(), w))
                .with_context(|| format!("{name}: no records to summarize"))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = comparison_csv(&runs);
    let window = window_csv(&windows);
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("comparison.csv"), table)?;
            std::fs::write(dir.join("window.csv"), &window)?;
            print!("{window}");
        }
        None => {
            print!("{table}");
            println!();
            print!("{window}");
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    run: PathBuf,
    /// Snapshot iteration; the nearest earlier snapshot is used otherwise.
    #[arg(long)]
    iteration: u64,
    /// Destination directory (default `<run>/export`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Iterations with a KL matrix file in `dir`, ascending.
fn snapshots(dir: &Path) -> Result<Vec<u64>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut its: Vec<u64> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("kl_")?.strip_suffix(".csv")?.parse().ok()
        })
        .collect();
    its.sort_unstable();
    Ok(its)
}

pub fn export_kl(a: ExportArgs) -> Result<()> {
    let its = snapshots(&a.run)?;
    if its.is_empty() {
        bail!("{}: no KL snapshots", a.run.display());
    }
    let Some(&it) = its.iter().rev().find(|&&i| i <= a.iteration) else {
        bail!(
            "{}: no KL snapshot at or before iteration {} (first is {})",
            a.run.display(),
            a.iteration,
            its[0]
        );
    };
    if it != a.iteration {
        eprintln!("note: no snapshot at iteration {}; using iteration {it}", a.iteration);
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join("export"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let src = a.run.join(kl_file_name(it));
    let bytes = std::fs::read(&src).with_context(|| format!("reading {}", src.display()))?;
    let text = String::from_utf8_lossy(&bytes);
    let kl = KlMatrix::from_csv(&text).with_context(|| src.display().to_string())?;
    let dst = out.join(kl_file_name(it));
    std::fs::write(&dst, &bytes).with_context(|| format!("writing {}", dst.display()))?;

    let side_src = a.run.join(closest_file_name(it));
    let side_dst = out.join(closest_file_name(it));
    if side_src.exists() {
        let side = std::fs::read(&side_src)?;
        closest_from_csv(&String::from_utf8_lossy(&side)).with_context(|| side_src.display().to_string())?;
        std::fs::write(&side_dst, side)?;
    } else {
        warn!("{} missing; recomputing it from the matrix", side_src.display());
        std::fs::write(&side_dst, closest_to_csv(&closest_agents(&kl)?))?;
    }
    println!("{}", dst.display());
    println!("{}", side_dst.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    run: PathBuf,
    /// Checkpoint to evaluate (default `<run>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.episodes == 0 {
        return Err(Usage("--episodes must be positive".into()).into());
    }
    let cfg = EnsembleConfig::from_file(&a.run.join(RESOLVED_FILE))?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join(FINAL_CHECKPOINT));
    let (state, _) = restore(&ckpt, &cfg)?;
    let nets = networks(&cfg);
    let best = reference_return(cfg.task, cfg.episode_len, a.episodes, cfg.seed);
    println!(
        "iteration {}  task {}  episodes {}",
        state.iteration, cfg.task, a.episodes
    );
    println!("agent,mean_return,fraction_of_reference");
    for agent in 0..cfg.num_agents {
        let ret = evaluate_agent(&nets, &state.policy, &cfg, agent, a.episodes)?;
        println!("{agent},{ret:.6},{:.4}", ret / best);
    }
    println!("reference,{best:.6},1.0000");
    Ok(())
}
