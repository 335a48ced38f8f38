//! Run configuration: defaults, the flat `key = value` file format, the
//! resolved snapshot written into every run directory, and its hash.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diversity::DEFAULT_PROBES;
use crate::envs::{EnvSpec, Task};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::nets::DEFAULT_HIDDEN;
use crate::objectives::LossWeights;
use crate::rollout::AdvantageConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Single-policy PPO.
    Ppo,
    /// Leader with off-policy follower data; no follower coupling.
    Sapg,
    /// Followers coupled to the leader plus the diversity reward.
    Cpo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Ppo => "ppo",
            Algo::Sapg => "sapg",
            Algo::Cpo => "cpo",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Algo::Ppo),
            "sapg" => Ok(Algo::Sapg),
            "cpo" => Ok(Algo::Cpo),
            other => Err(Error::Config(format!(
                "unknown algo '{other}' (expected ppo, sapg or cpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub algo: Algo,
    pub task: Task,
    pub num_agents: usize,
    pub envs_per_agent: usize,
    pub horizon: usize,
    pub episode_len: u32,
    pub iterations: u64,
    pub gamma: f64,
    pub tau: f64,
    pub normalize_advantages: bool,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub critic_coef: f64,
    pub bounds_coef: f64,
    pub beta: f64,
    pub lambda_f: f64,
    pub lambda_r: f64,
    pub lambda_adv: f64,
    pub w_max: f64,
    pub lr: f64,
    pub kl_threshold: f64,
    pub adaptive_lr: bool,
    pub grad_norm: f64,
    /// Rows per minibatch across all agents; `None` means 4 × total envs.
    pub minibatch_size: Option<usize>,
    pub mini_epochs: usize,
    pub seed: u64,
    pub diag_interval: u64,
    pub checkpoint_interval: u64,
    pub probes: usize,
    pub hidden: Vec<usize>,
    pub out_dir: PathBuf,
    pub parallelism: Parallelism,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self::for_algo(Algo::Cpo)
    }
}

impl EnsembleConfig {
    pub fn for_algo(algo: Algo) -> Self {
        Self {
            algo,
            task: Task::RidgeWorld,
            num_agents: if algo == Algo::Ppo { 1 } else { 6 },
            envs_per_agent: 64,
            horizon: 16,
            episode_len: 32,
            iterations: 200,
            gamma: 0.99,
            tau: 0.95,
            normalize_advantages: true,
            clip_eps: 0.2,
            entropy_coef: 0.005,
            critic_coef: 4.0,
            bounds_coef: 1e-4,
            beta: if algo == Algo::Cpo { 0.001 } else { 0.0 },
            lambda_f: 0.2,
            lambda_r: 0.0,
            lambda_adv: if algo == Algo::Cpo { 0.01 } else { 0.0 },
            w_max: 20.0,
            lr: 5e-4,
            kl_threshold: 0.016,
            adaptive_lr: true,
            grad_norm: 1.0,
            minibatch_size: None,
            mini_epochs: 5,
            seed: 0,
            diag_interval: 10,
            checkpoint_interval: 50,
            probes: DEFAULT_PROBES,
            hidden: DEFAULT_HIDDEN.to_vec(),
            out_dir: PathBuf::from("runs/default"),
            parallelism: Parallelism::default(),
        }
    }

    pub fn num_envs(&self) -> usize {
        self.num_agents * self.envs_per_agent
    }

    pub fn batch_rows(&self) -> usize {
        self.horizon * self.num_envs()
    }

    pub fn minibatch_rows(&self) -> usize {
        self.minibatch_size.unwrap_or(4 * self.num_envs())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::new(self.task, self.episode_len, self.num_envs(), self.num_agents)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            critic_coef: self.critic_coef,
            bounds_coef: self.bounds_coef,
            beta: self.beta,
            lambda_f: self.lambda_f,
            lambda_r: self.lambda_r,
            w_max: self.w_max,
        }
    }

    pub fn advantage_config(&self) -> AdvantageConfig {
        AdvantageConfig {
            gamma: self.gamma,
            tau: self.tau,
            normalize: self.normalize_advantages,
        }
    }

    /// Applies the mode rules (`sapg` drops the coupling term) and checks
    /// every invariant.
    pub fn resolve(mut self) -> Result<Self> {
        match self.algo {
            Algo::Ppo if self.num_agents != 1 => {
                return Err(Error::Config(format!(
                    "algo ppo runs a single agent, got {} agents",
                    self.num_agents
                )));
            }
            Algo::Sapg if self.beta != 0.0 => {
                log::warn!("algo sapg ignores beta = {}; using 0", self.beta);
                self.beta = 0.0;
            }
            Algo::Sapg | Algo::Cpo if self.num_agents < 2 => {
                return Err(Error::Config(format!("algo {} needs at least 2 agents", self.algo)));
            }
            _ => {}
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.advantage_config().validate()?;
        self.env_spec()?;
        let finite = [self.lambda_adv, self.lr, self.kl_threshold, self.grad_norm];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        if self.lambda_adv < 0.0 {
            return Err(Error::Config("lambda_adv must be non-negative".into()));
        }
        if self.lr <= 0.0 || self.grad_norm <= 0.0 || self.kl_threshold <= 0.0 {
            return Err(Error::Config("lr, grad_norm and kl_threshold must be positive".into()));
        }
        if self.horizon == 0 || self.mini_epochs == 0 || self.probes == 0 || self.hidden.is_empty() {
            return Err(Error::Config(
                "horizon, mini_epochs, probes and hidden must be non-empty".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.diag_interval == 0 {
            return Err(Error::Config("diag_interval must be positive".into()));
        }
        let mb = self.minibatch_rows();
        if mb == 0 || !self.batch_rows().is_multiple_of(mb) {
            return Err(Error::Config(format!(
                "minibatch size {mb} must divide the batch of {} rows",
                self.batch_rows()
            )));
        }
        if !mb.is_multiple_of(self.num_agents) {
            return Err(Error::Config(format!(
                "minibatch size {mb} must split evenly across {} agents",
                self.num_agents
            )));
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
        }
        match key {
            "algo" => self.algo = parse(key, value)?,
            "task" => self.task = parse(key, value)?,
            "agents" => self.num_agents = parse(key, value)?,
            "envs_per_agent" => self.envs_per_agent = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "episode_len" => self.episode_len = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "normalize_advantages" => self.normalize_advantages = parse(key, value)?,
            "clip_eps" => self.clip_eps = parse(key, value)?,
            "entropy_coef" => self.entropy_coef = parse(key, value)?,
            "critic_coef" => self.critic_coef = parse(key, value)?,
            "bounds_coef" => self.bounds_coef = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_f" => self.lambda_f = parse(key, value)?,
            "lambda_r" => self.lambda_r = parse(key, value)?,
            "lambda_adv" => self.lambda_adv = parse(key, value)?,
            "w_max" => self.w_max = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "kl_threshold" => self.kl_threshold = parse(key, value)?,
            "adaptive_lr" => self.adaptive_lr = parse(key, value)?,
            "grad_norm" => self.grad_norm = parse(key, value)?,
            "minibatch_size" => {
                self.minibatch_size = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "mini_epochs" => self.mini_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "diag_interval" => self.diag_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "probes" => self.probes = parse(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse::<usize>(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "parallelism" => {
                self.parallelism = match value {
                    "sequential" => Parallelism::Sequential,
                    "rayon" => Parallelism::Rayon,
                    other => return Err(Error::Config(format!("unknown parallelism '{other}'"))),
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key in file order. Values print in shortest round-trip form so
    /// a resolved file reproduces the run exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        vec![
            ("algo", self.algo.to_string()),
            ("task", self.task.to_string()),
            ("agents", self.num_agents.to_string()),
            ("envs_per_agent", self.envs_per_agent.to_string()),
            ("horizon", self.horizon.to_string()),
            ("episode_len", self.episode_len.to_string()),
            ("iterations", self.iterations.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("normalize_advantages", self.normalize_advantages.to_string()),
            ("clip_eps", self.clip_eps.to_string()),
            ("entropy_coef", self.entropy_coef.to_string()),
            ("critic_coef", self.critic_coef.to_string()),
            ("bounds_coef", self.bounds_coef.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda_f", self.lambda_f.to_string()),
            ("lambda_r", self.lambda_r.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("w_max", self.w_max.to_string()),
            ("lr", self.lr.to_string()),
            ("kl_threshold", self.kl_threshold.to_string()),
            ("adaptive_lr", self.adaptive_lr.to_string()),
            ("grad_norm", self.grad_norm.to_string()),
            ("minibatch_size", self.minibatch_rows().to_string()),
            ("mini_epochs", self.mini_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("diag_interval", self.diag_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("probes", self.probes.to_string()),
            ("hidden", hidden.join(",")),
            ("out_dir", self.out_dir.display().to_string()),
            (
                "parallelism",
                match self.parallelism {
                    Parallelism::Sequential => "sequential",
                    Parallelism::Rayon => "rayon",
                }
                .to_string(),
            ),
        ]
    }

    pub fn to_resolved_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 over every key that affects results. Output location,
    /// iteration budget and parallelism are left out: they change neither
    /// the trajectory nor the meaning of a checkpoint.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if matches!(k, "out_dir" | "iterations" | "parallelism" | "checkpoint_interval") {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_pairs(text)? {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    /// Parses a full config file. The algo key, if present, picks the
    /// defaults the remaining keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let algo = parse_pairs(text)?
            .into_iter()
            .rev()
            .find(|(_, k, _)| k == "algo")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Algo::Cpo);
        let mut cfg = Self::for_algo(algo);
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Splits `key = value` lines without interpreting them; yields
/// `(line number, key, value)`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", ln + 1)))?;
        out.push((ln + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
