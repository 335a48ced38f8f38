use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use epg_core::envs::Task;
use epg_core::trainer::config::parse_pairs;
use epg_core::trainer::run::{resume_run, run_experiment};
use epg_core::trainer::{Algo, EnsembleConfig};
use epg_core::Parallelism;
use log::info;

use crate::{out_root, Usage};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// ppo, sapg or cpo (default cpo, or the config file's value).
    #[arg(long)]
    algo: Option<Algo>,
    /// point-goal or ridge-world.
    #[arg(long)]
    task: Option<Task>,
    /// Ensemble size; the leader is agent 0.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    envs_per_agent: Option<usize>,
    /// Rollout steps per env per iteration.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    episode_len: Option<u32>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; each gets its own `seed_<s>` subdirectory.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Temperature of the exp-advantage weight on the followers' coupling term.
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Weight of the followers' coupling term.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the followers' adversarial diversity reward.
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden layer widths, e.g. 64,64.
    #[arg(long)]
    hidden: Option<String>,
    /// Drop the coupling term (beta = 0).
    #[arg(long)]
    no_klc: bool,
    /// Drop the adversarial reward (lambda_adv = 0).
    #[arg(long)]
    no_adr: bool,
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides using config-file keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default `$EPG_OUT_ROOT/<algo>_<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded execution, seeds one after another.
    #[arg(long)]
    sequential: bool,
    /// Continue from a checkpoint into `--out` (single seed only).
    #[arg(long)]
    resume: Option<PathBuf>,
}

struct ConfigFile {
    text: String,
    algo: Option<Algo>,
    has_out_dir: bool,
}

fn read_config_file(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs = parse_pairs(&text).with_context(|| format!("parsing {}", path.display()))?;
    let algo = pairs
        .iter()
        .find(|(_, k, _)| k == "algo")
        .map(|(_, _, v)| v.parse::<Algo>())
        .transpose()?;
    let has_out_dir = pairs.iter().any(|(_, k, _)| k == "out_dir");
    Ok(ConfigFile {
        text,
        algo,
        has_out_dir,
    })
}

/// Defaults for the algorithm, then the config file, then flags.
pub fn build_config(a: &TrainArgs) -> Result<(EnsembleConfig, Vec<u64>)> {
    let file = a.config.as_deref().map(read_config_file).transpose()?;
    let algo = a.algo.or(file.as_ref().and_then(|f| f.algo)).unwrap_or(Algo::Cpo);
    let mut cfg = EnsembleConfig::for_algo(algo);
    if let Some(f) = &file {
        cfg.apply_text(&f.text)?;
    }
    cfg.algo = algo;
    if let Some(v) = a.task {
        cfg.task = v;
    }
    if let Some(v) = a.agents {
        cfg.num_agents = v;
    }
    if let Some(v) = a.envs_per_agent {
        cfg.envs_per_agent = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.episode_len {
        cfg.episode_len = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.lambda_f {
        cfg.lambda_f = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.lambda_adv {
        cfg.lambda_adv = v;
    }
    if let Some(v) = a.entropy_coef {
        cfg.entropy_coef = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = &a.hidden {
        cfg.set("hidden", v)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if a.no_klc {
        if a.beta.is_some_and(|b| b != 0.0) {
            return Err(Usage("--no-klc contradicts a non-zero --beta".into()).into());
        }
        cfg.beta = 0.0;
    }
    if a.no_adr {
        if a.lambda_adv.is_some_and(|l| l != 0.0) {
            return Err(Usage("--no-adr contradicts a non-zero --lambda-adv".into()).into());
        }
        cfg.lambda_adv = 0.0;
    }
    if a.sequential {
        cfg.parallelism = Parallelism::Sequential;
    }
    let seeds = match (&a.seeds, a.seed) {
        (Some(s), _) if s.is_empty() => return Err(Usage("--seeds needs at least one seed".into()).into()),
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s],
        (None, None) => vec![cfg.seed],
    };
    cfg.seed = seeds[0];
    cfg.out_dir = match &a.out {
        Some(p) => p.clone(),
        None if file.as_ref().is_some_and(|f| f.has_out_dir) => cfg.out_dir.clone(),
        None => out_root().join(format!("{}_{}", cfg.algo, cfg.task)),
    };
    Ok((cfg.resolve()?, seeds))
}

pub fn run(a: TrainArgs) -> Result<()> {
    let (cfg, seeds) = build_config(&a)?;
    if let Some(ckpt) = &a.resume {
        if seeds.len() != 1 {
            return Err(Usage("--resume continues a single seed".into()).into());
        }
        let out = resume_run(&cfg, ckpt)?;
        info!("resumed {} to iteration {}", out.dir.display(), out.state.iteration);
        return Ok(());
    }
    info!(
        "training {} on {} with {} agents x {} envs, {} iterations, seeds {seeds:?} -> {}",
        cfg.algo,
        cfg.task,
        cfg.num_agents,
        cfg.envs_per_agent,
        cfg.iterations,
        cfg.out_dir.display()
    );
    let summary = run_experiment(&cfg, &seeds, !a.sequential)?;
    if let Some(r) = summary.final_return {
        info!("final leader return {:.4} +- {:.4} over {} seeds", r.mean, r.std, r.n);
    }
    if !summary.failures.is_empty() {
        for (seed, e) in &summary.failures {
            eprintln!("seed {seed} failed: {e}");
        }
        anyhow::bail!("{} of {} seeds failed", summary.failures.len(), seeds.len());
    }
    Ok(())
}
