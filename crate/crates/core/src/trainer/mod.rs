//! One training iteration end to end, plus the state it carries between
//! iterations.
//!
//! Phase order per iteration: collect, discriminator loss, adversarial
//! reward, advantage estimation, follower sampling, the two cross-agent
//! recomputations, then minibatch optimization of policy and value, and
//! finally the discriminator step. The adversarial reward is computed with
//! the discriminator as it was before this iteration's update.

pub mod checkpoint;
pub mod config;
pub mod reference;
pub mod run;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ess_from_log, mean_is_deviation, DiagnosticsRecord};
use crate::diversity::{
    adversarial_reward, disc_loss, disc_update, kl_file_name, pairwise_kl, sample_probes, DiscBatch, DiscUpdate,
    KlMatrix,
};
use crate::envs::{episode_return, eval_start, reset_all, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::nets::{
    entropy_of, log_prob_row, phi, quantize, state_action, with_phi, DiscParams, Networks, PolicyNet, PolicyParams,
    ValueParams,
};
use crate::objectives::{evaluate, LossBreakdown, LossTerm, Minibatch, PolicySegment, SegmentKind, ValueSegment};
use crate::optim::Adam;
use crate::rng::{stream, Purpose};
use crate::rollout::{collect, estimate_advantages, normalize_advantages, recompute_cross, AgentSlab, RolloutBatch};

pub use config::{Algo, EnsembleConfig};

pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Collect,
    DiscriminatorLoss,
    AdversarialReward,
    AdvantageEstimation,
    SampleFollower,
    RecomputeLeaderOnFollower,
    RecomputeFollowersOnLeader,
    PolicyLossAggregation,
    ValueLoss,
    ParameterUpdates,
}

/// Full phase sequence of an ensemble iteration.
pub const PHASE_ORDER: [Phase; 10] = [
    Phase::Collect,
    Phase::DiscriminatorLoss,
    Phase::AdversarialReward,
    Phase::AdvantageEstimation,
    Phase::SampleFollower,
    Phase::RecomputeLeaderOnFollower,
    Phase::RecomputeFollowersOnLeader,
    Phase::PolicyLossAggregation,
    Phase::ValueLoss,
    Phase::ParameterUpdates,
];

/// `lr / 1.5` above twice the threshold, `lr · 1.5` below half of it,
/// clamped to `[1e-6, 1e-2]`.
pub fn adapt_lr(lr: f64, approx_kl: f64, threshold: f64) -> f64 {
    let next = if approx_kl > 2.0 * threshold {
        lr / 1.5
    } else if approx_kl < 0.5 * threshold {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(LR_MIN, LR_MAX)
}

/// Follower whose data feeds the leader's off-policy term this iteration,
/// uniform over `1..num_agents`.
pub fn sample_follower(seed: u64, iteration: u64, num_agents: usize) -> usize {
    assert!(num_agents >= 2, "sampling a follower needs at least two agents");
    stream(seed, Purpose::Follower, &[iteration]).random_range(1..num_agents)
}

/// Networks sized for the toy tasks and the configured ensemble.
pub fn networks(cfg: &EnsembleConfig) -> Networks {
    Networks::new(STATE_DIM, ACTION_DIM, cfg.num_agents, &cfg.hidden)
}

/// Everything carried from one iteration to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed iterations.
    pub iteration: u64,
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub disc: DiscParams,
    pub policy_adam: Adam,
    pub value_adam: Adam,
    pub disc_adam: Adam,
    pub lr: f64,
    pub envs: crate::envs::EnvState,
    pub env_steps: u64,
    /// Most recent finished-episode mean return per agent.
    pub last_returns: Vec<Option<f64>>,
}

impl RunState {
    pub fn new(cfg: &EnsembleConfig, nets: &Networks) -> Result<Self> {
        let spec = cfg.env_spec()?;
        let policy = nets.policy.init(cfg.seed);
        let value = nets.value.init(cfg.seed);
        let disc = nets.disc.init(cfg.seed);
        Ok(Self {
            iteration: 0,
            policy_adam: Adam::new(policy.len()),
            value_adam: Adam::new(value.len()),
            disc_adam: Adam::new(disc.len()),
            policy,
            value,
            disc,
            lr: cfg.lr,
            envs: reset_all(&spec, cfg.seed),
            env_steps: 0,
            last_returns: vec![None; cfg.num_agents],
        })
    }
}

/// Output of the data phases, ready for optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub batch: RolloutBatch,
    pub disc_batch: Option<DiscBatch>,
    pub disc_loss: Option<f64>,
}

impl Prepared {
    pub fn follower(&self) -> Option<usize> {
        self.batch.cross.as_ref().map(|c| c.follower)
    }
}

fn disc_rows(slab: &AgentSlab) -> DiscBatch {
    DiscBatch {
        inputs: state_action(slab.states.view(), slab.actions.view()),
        labels: vec![slab.agent; slab.rows()],
    }
}

/// Collection through cross-agent recomputation for the iteration that
/// follows `state.iteration` completed ones.
pub fn prepare(
    nets: &Networks,
    state: &mut RunState,
    cfg: &EnsembleConfig,
    hook: &mut dyn FnMut(Phase),
) -> Result<Prepared> {
    let spec = cfg.env_spec()?;
    let (m, par, it) = (cfg.num_agents, cfg.parallelism, state.iteration);
    let adv_cfg = cfg.advantage_config();

    hook(Phase::Collect);
    let mut batch = collect(
        &nets.policy,
        &state.policy,
        &nets.value,
        &state.value,
        &spec,
        &mut state.envs,
        cfg.horizon,
        it,
        par,
    )?;

    let mut disc_batch = None;
    let mut disc_loss_value = None;
    let mut leader_adv = Vec::new();
    if m >= 2 {
        hook(Phase::DiscriminatorLoss);
        let parts: Vec<DiscBatch> = batch.slabs.iter().map(disc_rows).collect();
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let db = DiscBatch {
            inputs: ndarray::concatenate(Axis(0), &views).expect("slabs share width"),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        };
        disc_loss_value = Some(disc_loss(&nets.disc, &state.disc, &db, par)?);
        disc_batch = Some(db);

        hook(Phase::AdversarialReward);
        let leader_rows = disc_rows(batch.leader());
        for i in 1..m {
            let own = disc_rows(&batch.slabs[i]);
            batch.slabs[i].adv_rewards = adversarial_reward(&nets.disc, &state.disc, &own, cfg.lambda_adv, par)?;
            let on_leader = DiscBatch {
                inputs: leader_rows.inputs.clone(),
                labels: vec![i; leader_rows.len()],
            };
            leader_adv.push(if cfg.beta != 0.0 {
                adversarial_reward(&nets.disc, &state.disc, &on_leader, cfg.lambda_adv, par)?
            } else {
                Array1::zeros(leader_rows.len())
            });
        }
    }

    hook(Phase::AdvantageEstimation);
    estimate_advantages(&mut batch, &adv_cfg);

    if m >= 2 {
        hook(Phase::SampleFollower);
        let j = sample_follower(cfg.seed, it, m);
        hook(Phase::RecomputeLeaderOnFollower);
        hook(Phase::RecomputeFollowersOnLeader);
        batch.cross = Some(recompute_cross(
            &batch,
            &nets.value,
            &state.value,
            j,
            &leader_adv,
            &adv_cfg,
            par,
        )?);
    }
    Ok(Prepared {
        batch,
        disc_batch,
        disc_loss: disc_loss_value,
    })
}

fn pick(a: &Array1<f64>, rows: &[usize], normalize: bool) -> Array1<f64> {
    let mut v = a.select(Axis(0), rows);
    if normalize {
        normalize_advantages(v.as_slice_mut().unwrap());
    }
    v
}

fn segment(
    kind: SegmentKind,
    phi: f64,
    slab: &AgentSlab,
    adv: &Array1<f64>,
    rows: &[usize],
    normalize: bool,
) -> PolicySegment {
    PolicySegment {
        kind,
        phi,
        states: slab.states.select(Axis(0), rows),
        actions: slab.actions.select(Axis(0), rows),
        behavior_log_probs: slab.behavior_log_probs.select(Axis(0), rows),
        advantages: pick(adv, rows, normalize),
    }
}

/// Policy and value segments for the slab rows `rows` (the same row indices
/// are taken from every agent's slab).
pub fn build_minibatch(prepared: &Prepared, rows: &[usize], cfg: &EnsembleConfig) -> Minibatch {
    let batch = &prepared.batch;
    let m = batch.num_agents();
    let norm = cfg.normalize_advantages;
    let leader = batch.leader();
    let mut policy = vec![segment(
        SegmentKind::LeaderOn,
        phi(0, m),
        leader,
        &leader.advantages,
        rows,
        norm,
    )];
    if let Some(cross) = &batch.cross {
        let fj = &batch.slabs[cross.follower];
        policy.push(segment(
            SegmentKind::LeaderOff,
            phi(0, m),
            fj,
            &cross.leader_on_follower,
            rows,
            norm,
        ));
    }
    for i in 1..m {
        let slab = &batch.slabs[i];
        policy.push(segment(
            SegmentKind::FollowerOn(i),
            phi(i, m),
            slab,
            &slab.advantages,
            rows,
            norm,
        ));
    }
    if cfg.beta != 0.0 {
        if let Some(cross) = &batch.cross {
            for i in 1..m {
                policy.push(segment(
                    SegmentKind::ForwardKl(i),
                    phi(i, m),
                    leader,
                    &cross.followers_on_leader[i - 1],
                    rows,
                    norm,
                ));
            }
        }
    }
    let value = batch
        .slabs
        .iter()
        .map(|slab| ValueSegment {
            phi: phi(slab.agent, m),
            states: slab.states.select(Axis(0), rows),
            returns: slab.returns.select(Axis(0), rows),
        })
        .collect();
    Minibatch {
        num_agents: m,
        policy,
        value,
    }
}

/// Log-probs of `slab`'s actions under head `agent_phi`.
pub fn log_probs_under(
    policy: &PolicyNet,
    params: &PolicyParams,
    slab: &AgentSlab,
    agent_phi: f64,
    par: Parallelism,
) -> Vec<f64> {
    let means = policy.means(params, with_phi(slab.states.view(), agent_phi).view(), par);
    let log_std = policy.log_std(params);
    (0..slab.rows())
        .map(|r| {
            log_prob_row(
                means.row(r).as_slice().unwrap(),
                log_std,
                slab.actions.row(r).as_slice().unwrap(),
            )
        })
        .collect()
}

/// IS statistics at collection time: mean |1 − π_L/π_{F_i}| over all
/// follower samples, and the ESS of the leader's update weights (its own
/// samples plus follower `j`'s).
pub fn collection_is_stats(
    policy: &PolicyNet,
    params: &PolicyParams,
    batch: &RolloutBatch,
    par: Parallelism,
) -> Result<(f64, f64, usize)> {
    let m = batch.num_agents();
    let leader_phi = phi(0, m);
    let log_ratio = |slab: &AgentSlab| -> Vec<f64> {
        log_probs_under(policy, params, slab, leader_phi, par)
            .into_iter()
            .zip(slab.behavior_log_probs.iter())
            .map(|(lp, b)| lp - b)
            .collect()
    };
    let mut follower_ratios = Vec::new();
    let mut off_j = Vec::new();
    let j = batch.cross.as_ref().map(|c| c.follower);
    for i in 1..m {
        let lr = log_ratio(&batch.slabs[i]);
        follower_ratios.extend(lr.iter().map(|l| l.exp()));
        if Some(i) == j {
            off_j = lr;
        }
    }
    let mut pooled = log_ratio(batch.leader());
    pooled.extend(off_j);
    let n = pooled.len();
    Ok((mean_is_deviation(&follower_ratios), ess_from_log(&pooled)?, n))
}

/// Sums of per-minibatch optimization statistics.
#[derive(Debug, Clone, Default)]
pub(crate) struct OptStats {
    pub losses: Option<LossBreakdown>,
    pub count: usize,
    pub max_clipped_norm: f64,
}

/// Runs the configured mini-epochs over `prepared` and updates policy and
/// value parameters in place.
pub(crate) fn optimize(
    nets: &Networks,
    state: &mut RunState,
    prepared: &Prepared,
    cfg: &EnsembleConfig,
    hook: &mut dyn FnMut(Phase),
) -> Result<OptStats> {
    let it = state.iteration;
    let rows_per_agent = prepared.batch.leader().rows();
    let n_mb = cfg.batch_rows() / cfg.minibatch_rows();
    let chunk = rows_per_agent / n_mb;
    let weights = cfg.loss_weights();
    let mut stats = OptStats::default();
    hook(Phase::PolicyLossAggregation);
    hook(Phase::ValueLoss);
    hook(Phase::ParameterUpdates);
    for epoch in 0..cfg.mini_epochs {
        let mut perm: Vec<usize> = (0..rows_per_agent).collect();
        perm.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[it, epoch as u64]));
        for b in 0..n_mb {
            let rows = &perm[b * chunk..(b + 1) * chunk];
            let mb = build_minibatch(prepared, rows, cfg);
            let eval = evaluate(
                &nets.policy,
                &state.policy,
                &nets.value,
                &state.value,
                &mb,
                &weights,
                LossTerm::Total,
                cfg.parallelism,
            )
            .map_err(|e| {
                Error::numerical(
                    format!("iteration {} epoch {epoch} minibatch {b} rows {rows:?}", it + 1),
                    e.to_string(),
                )
            })?;
            let mut pg = eval.policy_grad;
            let mut vg = eval.value_grad;
            if let Some(k) = pg.first_non_finite().or(vg.first_non_finite()) {
                return Err(Error::numerical(
                    format!("iteration {} epoch {epoch} minibatch {b} rows {rows:?}", it + 1),
                    format!("non-finite gradient entry {k}; losses {:?}", eval.breakdown),
                ));
            }
            pg.clip_norm(cfg.grad_norm);
            vg.clip_norm(cfg.grad_norm);
            stats.max_clipped_norm = stats.max_clipped_norm.max(pg.norm()).max(vg.norm());
            state
                .policy_adam
                .step(state.policy.as_mut_slice(), pg.as_slice(), state.lr);
            nets.policy.clamp_log_std(&mut state.policy);
            quantize(state.policy.as_mut_slice());
            state
                .value_adam
                .step(state.value.as_mut_slice(), vg.as_slice(), state.lr);
            quantize(state.value.as_mut_slice());
            match &mut stats.losses {
                None => stats.losses = Some(eval.breakdown),
                Some(acc) => acc.accumulate(&eval.breakdown, 1.0),
            }
            stats.count += 1;
        }
    }
    if let Some(acc) = &mut stats.losses {
        let k = 1.0 / stats.count as f64;
        let sum = acc.clone();
        *acc = LossBreakdown::empty(cfg.num_agents);
        acc.accumulate(&sum, k);
    }
    Ok(stats)
}

/// Post-update `mean(log π_old − log π_new)` and clipped fraction over all
/// agents' own samples.
pub(crate) fn update_kl(
    nets: &Networks,
    params: &PolicyParams,
    batch: &RolloutBatch,
    cfg: &EnsembleConfig,
) -> (f64, f64) {
    let m = batch.num_agents();
    let (mut kl, mut clipped, mut n) = (0.0, 0usize, 0usize);
    for slab in &batch.slabs {
        let new = log_probs_under(&nets.policy, params, slab, phi(slab.agent, m), cfg.parallelism);
        for (lp, old) in new.iter().zip(slab.behavior_log_probs.iter()) {
            kl += old - lp;
            if ((lp - old).exp() - 1.0).abs() > cfg.clip_eps {
                clipped += 1;
            }
            n += 1;
        }
    }
    (kl / n as f64, clipped as f64 / n as f64)
}

/// Whether iteration `iteration` (1-based) writes a KL matrix.
pub fn kl_due(cfg: &EnsembleConfig, iteration: u64) -> bool {
    cfg.num_agents >= 2 && (iteration == 1 || iteration.is_multiple_of(cfg.diag_interval) || iteration == cfg.iterations)
}

/// Record fields shared by every training path.
pub(crate) struct IterationSummary {
    pub disc_loss: Option<f64>,
    pub follower: Option<usize>,
    pub is_stats: (f64, f64, usize),
    pub opt: OptStats,
    pub lr_used: f64,
}

/// Finishes an iteration: LR adaptation, returns, counters, KL snapshot,
/// and the metrics record.
pub(crate) fn finish_iteration(
    nets: &Networks,
    state: &mut RunState,
    prepared: &Prepared,
    cfg: &EnsembleConfig,
    summary: IterationSummary,
) -> Result<IterationOutput> {
    let batch = &prepared.batch;
    let (approx_kl, clip_fraction) = update_kl(nets, &state.policy, batch, cfg);
    if cfg.adaptive_lr {
        state.lr = adapt_lr(state.lr, approx_kl, cfg.kl_threshold);
    }
    for (agent, finished) in batch.finished_returns.iter().enumerate() {
        if !finished.is_empty() {
            state.last_returns[agent] = Some(finished.iter().sum::<f64>() / finished.len() as f64);
        }
    }
    let it0 = state.iteration;
    state.iteration += 1;
    state.env_steps += batch.transitions() as u64;
    let iteration = state.iteration;

    let kl = if kl_due(cfg, iteration) {
        let probes = sample_probes(batch.pooled_states().view(), cfg.probes, cfg.seed, it0)?;
        Some(pairwise_kl(
            &nets.policy,
            &state.policy,
            probes.view(),
            cfg.num_agents,
            cfg.parallelism,
        )?)
    } else {
        None
    };
    let (dev, ess, ess_n) = summary.is_stats;
    let record = DiagnosticsRecord {
        iteration,
        env_steps: state.env_steps,
        agent_returns: state.last_returns.clone(),
        leader_return: state.last_returns[0],
        mean_is_deviation: dev,
        ess,
        ess_rate: ess / ess_n as f64,
        ess_samples: ess_n,
        approx_kl,
        entropy: entropy_of(nets.policy.log_std(&state.policy)),
        lr: summary.lr_used,
        losses: summary
            .opt
            .losses
            .unwrap_or_else(|| LossBreakdown::empty(cfg.num_agents)),
        kl_matrix: kl.as_ref().map(|_| kl_file_name(iteration)),
        disc_loss: summary.disc_loss,
        follower_index: summary.follower,
        grad_norm: summary.opt.max_clipped_norm,
        clip_fraction,
    };
    record.check()?;
    Ok(IterationOutput { record, kl })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub record: DiagnosticsRecord,
    /// This iteration's KL matrix, on diagnostic iterations.
    pub kl: Option<KlMatrix>,
}

/// One full iteration. `hook` sees every phase as it starts.
pub fn train_iteration_with_hook(
    nets: &Networks,
    state: &mut RunState,
    cfg: &EnsembleConfig,
    hook: &mut dyn FnMut(Phase),
) -> Result<IterationOutput> {
    let lr_used = state.lr;
    let prepared = prepare(nets, state, cfg, hook)?;
    let is_stats = collection_is_stats(&nets.policy, &state.policy, &prepared.batch, cfg.parallelism)?;
    let opt = optimize(nets, state, &prepared, cfg, hook)?;
    if let Some(db) = &prepared.disc_batch {
        let settings = DiscUpdate {
            lr: cfg.lr,
            minibatch: cfg.minibatch_rows(),
            grad_norm: cfg.grad_norm,
        };
        disc_update(
            &nets.disc,
            &mut state.disc,
            &mut state.disc_adam,
            db,
            settings,
            cfg.seed,
            state.iteration,
            cfg.parallelism,
        )?;
    }
    let summary = IterationSummary {
        disc_loss: prepared.disc_loss,
        follower: prepared.follower(),
        is_stats,
        opt,
        lr_used,
    };
    finish_iteration(nets, state, &prepared, cfg, summary)
}

pub fn train_iteration(nets: &Networks, state: &mut RunState, cfg: &EnsembleConfig) -> Result<IterationOutput> {
    train_iteration_with_hook(nets, state, cfg, &mut |_| {})
}

/// Mean return of `agent` acting on its mean action from the first
/// `episodes` evaluation starts.
pub fn evaluate_agent(
    nets: &Networks,
    params: &PolicyParams,
    cfg: &EnsembleConfig,
    agent: usize,
    episodes: usize,
) -> Result<f64> {
    if agent >= cfg.num_agents || episodes == 0 {
        return Err(Error::Config(format!(
            "evaluate_agent: agent {agent} of {}, {episodes} episodes",
            cfg.num_agents
        )));
    }
    let agent_phi = phi(agent, cfg.num_agents);
    let mut total = 0.0;
    for ep in 0..episodes as u64 {
        total += episode_return(cfg.task, cfg.episode_len, eval_start(cfg.seed, ep), |p, v| {
            let head = nets.policy.forward(params, &[p[0], p[1], v[0], v[1]], agent_phi)?;
            Ok([head.mean[0], head.mean[1]])
        })?;
    }
    Ok(total / episodes as f64)
}
