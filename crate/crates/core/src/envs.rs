//! Vectorized toy continuous-control tasks on the square `[−1, 1]²`.
//!
//! A point mass with damped velocity is pushed by a 2-D action in `[−1, 1]²`.
//! `point-goal` rewards proximity to one goal; `ridge-world` has a near,
//! half-height decoy peak and a far full-height peak.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_row_chunks, Parallelism};
use crate::rng::{stream, Purpose};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

pub const POINT_GOAL: [f64; 2] = [0.7, 0.7];
pub const DECOY_GOAL: [f64; 2] = [-0.3, -0.3];
pub const FAR_GOAL: [f64; 2] = [0.8, 0.8];

const DAMPING: f64 = 0.8;
const THRUST: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    PointGoal,
    RidgeWorld,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PointGoal => "point-goal",
            Task::RidgeWorld => "ridge-world",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-goal" => Ok(Task::PointGoal),
            "ridge-world" => Ok(Task::RidgeWorld),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl Task {
    pub fn reward(self, pos: [f64; 2]) -> f64 {
        match self {
            Task::PointGoal => (-4.0 * dist2(pos, POINT_GOAL)).exp(),
            Task::RidgeWorld => {
                let decoy = 0.5 * (-8.0 * dist2(pos, DECOY_GOAL)).exp();
                let far = (-8.0 * dist2(pos, FAR_GOAL)).exp();
                decoy.max(far)
            }
        }
    }

    /// Goal with the highest attainable per-step reward.
    pub fn best_goal(self) -> [f64; 2] {
        match self {
            Task::PointGoal => POINT_GOAL,
            Task::RidgeWorld => FAR_GOAL,
        }
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: Task,
    pub episode_len: u32,
    pub num_envs: usize,
    pub num_agents: usize,
}

impl EnvSpec {
    pub fn new(task: Task, episode_len: u32, num_envs: usize, num_agents: usize) -> Result<Self> {
        let spec = Self {
            task,
            episode_len,
            num_envs,
            num_agents,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 || self.num_envs == 0 {
            return Err(Error::Config("need at least one env and one agent".into()));
        }
        if !self.num_envs.is_multiple_of(self.num_agents) {
            return Err(Error::Config(format!(
                "{} envs cannot be split evenly among {} agents",
                self.num_envs, self.num_agents
            )));
        }
        if self.episode_len == 0 {
            return Err(Error::Config("episode_len must be positive".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn envs_per_agent(&self) -> usize {
        self.num_envs / self.num_agents
    }

    /// Agent owning env `env`: `⌊e·M/N⌋`.
    pub fn agent_of(&self, env: usize) -> usize {
        env * self.num_agents / self.num_envs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub master_seed: u64,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub step: Vec<u32>,
    /// Episodes started so far per env; keys the reset stream.
    pub episode: Vec<u64>,
    /// Environment reward accumulated in the running episode.
    pub running_return: Vec<f64>,
}

/// One synchronous step across all envs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Episode return for envs whose episode ended on this step.
    pub finished_returns: Vec<Option<f64>>,
}

fn initial_position(master_seed: u64, env: usize, episode: u64) -> [f64; 2] {
    let mut rng = stream(master_seed, Purpose::Reset, &[env as u64, episode]);
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

/// Fresh state for every env: uniform positions, zero velocity, zero counters.
pub fn reset_all(spec: &EnvSpec, master_seed: u64) -> EnvState {
    let n = spec.num_envs;
    EnvState {
        master_seed,
        pos: (0..n).map(|e| initial_position(master_seed, e, 0)).collect(),
        vel: vec![[0.0; 2]; n],
        step: vec![0; n],
        episode: vec![0; n],
        running_return: vec![0.0; n],
    }
}

/// Pure transition of one env. Returns (pos, vel, reward).
pub fn transition(task: Task, pos: [f64; 2], vel: [f64; 2], action: [f64; 2]) -> ([f64; 2], [f64; 2], f64) {
    let mut next_pos = [0.0; 2];
    let mut next_vel = [0.0; 2];
    for k in 0..2 {
        next_vel[k] = DAMPING * vel[k] + THRUST * action[k].clamp(-1.0, 1.0);
        next_pos[k] = (pos[k] + next_vel[k]).clamp(-1.0, 1.0);
    }
    (next_pos, next_vel, task.reward(next_pos))
}

impl EnvState {
    pub fn num_envs(&self) -> usize {
        self.pos.len()
    }

    /// Observation rows `[x, y, vx, vy]`.
    pub fn observations(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_envs(), STATE_DIM), |(e, k)| match k {
            0 | 1 => self.pos[e][k],
            _ => self.vel[e][k - 2],
        })
    }

    /// Advances every env by one step; envs reaching `episode_len` auto-reset.
    pub fn step_all(&mut self, spec: &EnvSpec, actions: ArrayView2<'_, f64>, par: Parallelism) -> Result<StepOutput> {
        let n = self.num_envs();
        if actions.dim() != (n, ACTION_DIM) {
            return Err(Error::Config(format!(
                "step_all: actions shape {:?}, expected ({n}, {ACTION_DIM})",
                actions.dim()
            )));
        }
        if let Some((e, _)) = actions
            .outer_iter()
            .enumerate()
            .find(|(_, row)| row.iter().any(|a| !a.is_finite()))
        {
            return Err(Error::numerical(format!("env {e}"), "non-finite action"));
        }
        let this = &*self;
        let chunks = map_row_chunks(par, n, |range| {
            range
                .map(|e| {
                    let a = [actions[[e, 0]], actions[[e, 1]]];
                    let (pos, vel, reward) = transition(spec.task, this.pos[e], this.vel[e], a);
                    let ret = this.running_return[e] + reward;
                    let done = this.step[e] + 1 >= spec.episode_len;
                    if done {
                        let episode = this.episode[e] + 1;
                        let fresh = initial_position(this.master_seed, e, episode);
                        (fresh, [0.0; 2], 0, episode, 0.0, reward, true, Some(ret))
                    } else {
                        (pos, vel, this.step[e] + 1, this.episode[e], ret, reward, false, None)
                    }
                })
                .collect::<Vec<_>>()
        });
        let mut out = StepOutput {
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            finished_returns: Vec::with_capacity(n),
        };
        for (e, (pos, vel, step, episode, ret, reward, done, finished)) in chunks.into_iter().flatten().enumerate() {
            self.pos[e] = pos;
            self.vel[e] = vel;
            self.step[e] = step;
            self.episode[e] = episode;
            self.running_return[e] = ret;
            out.rewards.push(reward);
            out.dones.push(done);
            out.finished_returns.push(finished);
        }
        Ok(out)
    }
}

/// Scripted proportional-derivative controller steering toward `goal`.
pub fn reference_action(pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) -> [f64; 2] {
    let mut a = [0.0; 2];
    for k in 0..2 {
        a[k] = (4.0 * (goal[k] - pos[k]) - 6.0 * vel[k]).clamp(-1.0, 1.0);
    }
    a
}

/// Start position of evaluation episode `episode`; independent of the
/// training reset streams.
pub fn eval_start(seed: u64, episode: u64) -> [f64; 2] {
    let mut rng = stream(seed, Purpose::Eval, &[episode]);
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

/// Environment return of one `episode_len` episode from rest at `start`
/// under `controller(pos, vel)`.
pub fn episode_return<F>(task: Task, episode_len: u32, start: [f64; 2], mut controller: F) -> Result<f64>
where
    F: FnMut([f64; 2], [f64; 2]) -> Result<[f64; 2]>,
{
    let (mut pos, mut vel, mut ret) = (start, [0.0; 2], 0.0);
    for _ in 0..episode_len {
        let (p, v, r) = transition(task, pos, vel, controller(pos, vel)?);
        pos = p;
        vel = v;
        ret += r;
    }
    Ok(ret)
}

/// Mean episode return of the scripted controller aimed at the task's best
/// goal, over the first `episodes` evaluation starts.
pub fn reference_return(task: Task, episode_len: u32, episodes: usize, seed: u64) -> f64 {
    let goal = task.best_goal();
    let total: f64 = (0..episodes as u64)
        .map(|ep| {
            episode_return(task, episode_len, eval_start(seed, ep), |p, v| {
                Ok(reference_action(p, v, goal))
            })
            .expect("scripted controller is infallible")
        })
        .sum();
    total / episodes as f64
}
