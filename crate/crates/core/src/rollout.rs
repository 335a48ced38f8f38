//! Fixed-horizon trajectory collection, GAE, and the cross-agent advantage
//! recomputations used by the leader's off-policy term and the followers'
//! leader-data term.
//!
//! Slab rows are time-major: row `t * envs + k` is step `t` of the agent's
//! `k`-th env.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::nets::{log_prob_row, phi, with_phi, PolicyNet, PolicyParams, ValueNet, ValueParams};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub tau: f64,
    pub normalize: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.95,
            normalize: true,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// One agent's share of an iteration's data.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSlab {
    /// Agent index `y`; 0 is the leader.
    pub agent: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub behavior_log_probs: Array1<f64>,
    pub env_rewards: Array1<f64>,
    pub adv_rewards: Array1<f64>,
    pub dones: Array1<f64>,
    pub values: Array1<f64>,
    /// States reached after the final step, one row per env.
    pub bootstrap_states: Array2<f64>,
    pub bootstrap_values: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl AgentSlab {
    pub fn rows(&self) -> usize {
        self.states.nrows()
    }

    /// Reward stream this agent optimizes: env reward plus adversarial reward.
    pub fn shaped_rewards(&self) -> Array1<f64> {
        &self.env_rewards + &self.adv_rewards
    }
}

/// Advantages recomputed across agents for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAdvantages {
    /// Follower `j` whose data feeds the leader's off-policy term.
    pub follower: usize,
    /// A^L on follower `j`'s slab (leader value head, env rewards only).
    pub leader_on_follower: Array1<f64>,
    /// `followers_on_leader[i - 1]` = A^{F_i} on the leader's slab
    /// (follower `i` value head, env + adversarial reward for label `i`).
    pub followers_on_leader: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub envs_per_agent: usize,
    pub slabs: Vec<AgentSlab>,
    /// Episode returns (env reward only) that finished during collection.
    pub finished_returns: Vec<Vec<f64>>,
    pub cross: Option<CrossAdvantages>,
}

impl RolloutBatch {
    pub fn num_agents(&self) -> usize {
        self.slabs.len()
    }

    pub fn transitions(&self) -> usize {
        self.slabs.iter().map(AgentSlab::rows).sum()
    }

    pub fn leader(&self) -> &AgentSlab {
        &self.slabs[0]
    }

    /// All states of all agents stacked in agent order.
    pub fn pooled_states(&self) -> Array2<f64> {
        let views: Vec<_> = self.slabs.iter().map(|s| s.states.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("slabs share state width")
    }
}

/// Rolls every env forward `horizon` steps under the shared policy, each env
/// acting with its owning agent's embedding.
#[allow(clippy::too_many_arguments)]
pub fn collect(
    policy: &PolicyNet,
    policy_params: &PolicyParams,
    value: &ValueNet,
    value_params: &ValueParams,
    spec: &EnvSpec,
    envs: &mut EnvState,
    horizon: usize,
    iteration: u64,
    par: Parallelism,
) -> Result<RolloutBatch> {
    spec.validate()?;
    policy.check(policy_params)?;
    let (n_total, m) = (spec.num_envs, spec.num_agents);
    let per = spec.envs_per_agent();
    let (sd, ad) = (spec.state_dim(), spec.action_dim());
    let env_phi: Array1<f64> = (0..n_total).map(|e| phi(spec.agent_of(e), m)).collect();
    let log_std = policy.log_std(policy_params).to_vec();
    let mut noise: Vec<ChaCha8Rng> = (0..n_total)
        .map(|e| stream(envs.master_seed, Purpose::Action, &[e as u64, iteration]))
        .collect();

    let rows = horizon * n_total;
    let mut states = Array2::zeros((rows, sd));
    let mut actions = Array2::zeros((rows, ad));
    let mut logp = Array1::zeros(rows);
    let mut rewards = Array1::zeros(rows);
    let mut dones = Array1::zeros(rows);
    let mut values = Array1::zeros(rows);
    let mut finished = vec![Vec::new(); m];

    let embed = |obs: &Array2<f64>| {
        let mut x = with_phi(obs.view(), 0.0);
        x.column_mut(sd).assign(&env_phi);
        x
    };

    for t in 0..horizon {
        let obs = envs.observations();
        let inputs = embed(&obs);
        let means = policy.means(policy_params, inputs.view(), par);
        let v = value.values(value_params, inputs.view(), par);
        let mut act = Array2::zeros((n_total, ad));
        for e in 0..n_total {
            for k in 0..ad {
                let z: f64 = StandardNormal.sample(&mut noise[e]);
                act[[e, k]] = means[[e, k]] + log_std[k].exp() * z;
            }
            logp[t * n_total + e] = log_prob_row(
                means.row(e).as_slice().unwrap(),
                &log_std,
                act.row(e).as_slice().unwrap(),
            );
        }
        let out = envs
            .step_all(spec, act.view(), par)
            .map_err(|err| Error::numerical(format!("collect step {t}"), err.to_string()))?;
        let r0 = t * n_total;
        states.slice_mut(s![r0..r0 + n_total, ..]).assign(&obs);
        actions.slice_mut(s![r0..r0 + n_total, ..]).assign(&act);
        values.slice_mut(s![r0..r0 + n_total]).assign(&v);
        for e in 0..n_total {
            rewards[r0 + e] = out.rewards[e];
            dones[r0 + e] = if out.dones[e] { 1.0 } else { 0.0 };
            if let Some(ret) = out.finished_returns[e] {
                finished[spec.agent_of(e)].push(ret);
            }
        }
    }
    let final_obs = envs.observations();
    let final_values = value.values(value_params, embed(&final_obs).view(), par);

    // regroup env-major blocks into per-agent time-major slabs
    let slabs = (0..m)
        .map(|agent| {
            let env_rows: Vec<usize> = (0..horizon)
                .flat_map(|t| (0..per).map(move |k| t * n_total + agent * per + k))
                .collect();
            let boot: Vec<usize> = (agent * per..(agent + 1) * per).collect();
            AgentSlab {
                agent,
                states: states.select(Axis(0), &env_rows),
                actions: actions.select(Axis(0), &env_rows),
                behavior_log_probs: logp.select(Axis(0), &env_rows),
                env_rewards: rewards.select(Axis(0), &env_rows),
                adv_rewards: Array1::zeros(env_rows.len()),
                dones: dones.select(Axis(0), &env_rows),
                values: values.select(Axis(0), &env_rows),
                bootstrap_states: final_obs.select(Axis(0), &boot),
                bootstrap_values: final_values.select(Axis(0), &boot),
                advantages: Array1::zeros(env_rows.len()),
                returns: Array1::zeros(env_rows.len()),
            }
        })
        .collect();
    Ok(RolloutBatch {
        horizon,
        envs_per_agent: per,
        slabs,
        finished_returns: finished,
        cross: None,
    })
}

/// Generalized advantage estimation over `envs` interleaved trajectories.
///
/// `δ_t = r_t + γ V(s_{t+1})(1 − done_t) − V(s_t)`,
/// `A_t = δ_t + γτ(1 − done_t) A_{t+1}`, `R̂_t = A_t + V(s_t)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[f64],
    bootstrap_values: &[f64],
    cfg: &AdvantageConfig,
) -> (Vec<f64>, Vec<f64>) {
    let envs = bootstrap_values.len();
    assert!(envs > 0, "gae needs at least one trajectory");
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    assert_eq!(rewards.len() % envs, 0, "rows must be horizon x envs");
    let horizon = rewards.len() / envs;
    let mut adv = vec![0.0; rewards.len()];
    for k in 0..envs {
        let mut next_value = bootstrap_values[k];
        let mut next_adv = 0.0;
        for t in (0..horizon).rev() {
            let i = t * envs + k;
            let live = 1.0 - dones[i];
            let delta = rewards[i] + cfg.gamma * next_value * live - values[i];
            next_adv = delta + cfg.gamma * cfg.tau * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Fills each slab's advantages and returns from its own value estimates and
/// its own (shaped) reward stream.
pub fn estimate_advantages(batch: &mut RolloutBatch, cfg: &AdvantageConfig) {
    for slab in &mut batch.slabs {
        let rewards = slab.shaped_rewards();
        let (adv, ret) = gae(
            rewards.as_slice().unwrap(),
            slab.values.as_slice().unwrap(),
            slab.dones.as_slice().unwrap(),
            slab.bootstrap_values.as_slice().unwrap(),
            cfg,
        );
        slab.advantages = Array1::from(adv);
        slab.returns = Array1::from(ret);
    }
}

fn values_under(
    value: &ValueNet,
    params: &ValueParams,
    states: ArrayView2<'_, f64>,
    phi: f64,
    par: Parallelism,
) -> Array1<f64> {
    value.values(params, with_phi(states, phi).view(), par)
}

/// Leader advantages on follower `j`'s data and each follower's advantages
/// on the leader's data.
///
/// `leader_adv_rewards[i - 1]` holds follower `i`'s adversarial reward on the
/// leader's (s, a) pairs; the leader's own stream never sees these.
pub fn recompute_cross(
    batch: &RolloutBatch,
    value: &ValueNet,
    value_params: &ValueParams,
    follower: usize,
    leader_adv_rewards: &[Array1<f64>],
    cfg: &AdvantageConfig,
    par: Parallelism,
) -> Result<CrossAdvantages> {
    let m = batch.num_agents();
    if m < 2 {
        return Err(Error::Contract(
            "cross recomputation needs at least one follower".into(),
        ));
    }
    if follower == 0 || follower >= m {
        return Err(Error::Contract(format!("follower index {follower} outside 1..{m}")));
    }
    if leader_adv_rewards.len() != m - 1 {
        return Err(Error::Contract(format!(
            "expected {} follower reward streams on leader data, got {}",
            m - 1,
            leader_adv_rewards.len()
        )));
    }
    let run = |slab: &AgentSlab, phi: f64, rewards: &Array1<f64>| -> Array1<f64> {
        let v = values_under(value, value_params, slab.states.view(), phi, par);
        let boot = values_under(value, value_params, slab.bootstrap_states.view(), phi, par);
        let (adv, _) = gae(
            rewards.as_slice().unwrap(),
            v.as_slice().unwrap(),
            slab.dones.as_slice().unwrap(),
            boot.as_slice().unwrap(),
            cfg,
        );
        Array1::from(adv)
    };
    let fj = &batch.slabs[follower];
    let leader_on_follower = run(fj, phi(0, m), &fj.env_rewards);
    let leader = batch.leader();
    let followers_on_leader = (1..m)
        .map(|i| {
            let rewards = &leader.env_rewards + &leader_adv_rewards[i - 1];
            run(leader, phi(i, m), &rewards)
        })
        .collect();
    Ok(CrossAdvantages {
        follower,
        leader_on_follower,
        followers_on_leader,
    })
}

/// Zero mean, unit population std (std floored at 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpField {
    pub name: String,
    pub agent: usize,
    pub shape: Vec<usize>,
    /// Offset into the binary slab, in f64 elements.
    pub offset: usize,
}

/// JSON sidecar describing a binary batch dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub horizon: usize,
    pub envs_per_agent: usize,
    pub num_agents: usize,
    pub fields: Vec<DumpField>,
}

const SLAB_FIELDS: [&str; 12] = [
    "states",
    "actions",
    "behavior_log_probs",
    "env_rewards",
    "adv_rewards",
    "dones",
    "values",
    "bootstrap_states",
    "bootstrap_values",
    "advantages",
    "returns",
    "finished_returns",
];

impl RolloutBatch {
    /// Flat little-endian f64 slab plus a manifest of field shapes. Cross
    /// advantages are derived data and are not dumped.
    pub fn dump(&self) -> (Vec<u8>, DumpManifest) {
        let mut data: Vec<f64> = Vec::new();
        let mut fields = Vec::new();
        for (slab, finished) in self.slabs.iter().zip(&self.finished_returns) {
            for name in SLAB_FIELDS {
                let (shape, values): (Vec<usize>, Vec<f64>) = match name {
                    "states" => (slab.states.shape().to_vec(), slab.states.iter().copied().collect()),
                    "actions" => (slab.actions.shape().to_vec(), slab.actions.iter().copied().collect()),
                    "bootstrap_states" => (
                        slab.bootstrap_states.shape().to_vec(),
                        slab.bootstrap_states.iter().copied().collect(),
                    ),
                    "finished_returns" => (vec![finished.len()], finished.clone()),
                    _ => {
                        let v = match name {
                            "behavior_log_probs" => &slab.behavior_log_probs,
                            "env_rewards" => &slab.env_rewards,
                            "adv_rewards" => &slab.adv_rewards,
                            "dones" => &slab.dones,
                            "values" => &slab.values,
                            "bootstrap_values" => &slab.bootstrap_values,
                            "advantages" => &slab.advantages,
                            _ => &slab.returns,
                        };
                        (vec![v.len()], v.to_vec())
                    }
                };
                fields.push(DumpField {
                    name: name.to_string(),
                    agent: slab.agent,
                    shape,
                    offset: data.len(),
                });
                data.extend(values);
            }
        }
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = DumpManifest {
            horizon: self.horizon,
            envs_per_agent: self.envs_per_agent,
            num_agents: self.slabs.len(),
            fields,
        };
        (bytes, manifest)
    }

    pub fn load(bytes: &[u8], manifest: &DumpManifest) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Integrity("batch slab length is not a multiple of 8".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let take = |agent: usize, name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let f = manifest
                .fields
                .iter()
                .find(|f| f.agent == agent && f.name == name)
                .ok_or_else(|| Error::Integrity(format!("manifest lacks {name} for agent {agent}")))?;
            let len: usize = f.shape.iter().product();
            let values = data
                .get(f.offset..f.offset + len)
                .ok_or_else(|| Error::Integrity(format!("{name} for agent {agent} runs past the slab")))?;
            Ok((f.shape.clone(), values.to_vec()))
        };
        let mat = |agent: usize, name: &str| -> Result<Array2<f64>> {
            let (shape, v) = take(agent, name)?;
            if shape.len() != 2 {
                return Err(Error::Integrity(format!("{name} must be 2-D")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| Error::Integrity(e.to_string()))
        };
        let vec = |agent: usize, name: &str| -> Result<Array1<f64>> { Ok(Array1::from(take(agent, name)?.1)) };
        let mut slabs = Vec::new();
        let mut finished = Vec::new();
        for agent in 0..manifest.num_agents {
            slabs.push(AgentSlab {
                agent,
                states: mat(agent, "states")?,
                actions: mat(agent, "actions")?,
                behavior_log_probs: vec(agent, "behavior_log_probs")?,
                env_rewards: vec(agent, "env_rewards")?,
                adv_rewards: vec(agent, "adv_rewards")?,
                dones: vec(agent, "dones")?,
                values: vec(agent, "values")?,
                bootstrap_states: mat(agent, "bootstrap_states")?,
                bootstrap_values: vec(agent, "bootstrap_values")?,
                advantages: vec(agent, "advantages")?,
                returns: vec(agent, "returns")?,
            });
            finished.push(take(agent, "finished_returns")?.1);
        }
        Ok(Self {
            horizon: manifest.horizon,
            envs_per_agent: manifest.envs_per_agent,
            slabs,
            finished_returns: finished,
            cross: None,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn write_dump(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        let (bytes, manifest) = self.dump();
        let bin = dir.join(format!("{stem}.bin"));
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
