//! Plain single-policy PPO, written without any ensemble machinery. The
//! ensemble trainer in `ppo` mode must reproduce it exactly; tests compare
//! the two metric streams.

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nets::{quantize, Networks};
use crate::objectives::{evaluate, LossBreakdown, LossTerm, Minibatch, PolicySegment, SegmentKind, ValueSegment};
use crate::rng::{stream, Purpose};
use crate::rollout::{collect, gae, normalize_advantages};

use super::{
    collection_is_stats, finish_iteration, EnsembleConfig, IterationOutput, IterationSummary, OptStats, Prepared,
    RunState,
};

pub fn reference_ppo_iteration(nets: &Networks, state: &mut RunState, cfg: &EnsembleConfig) -> Result<IterationOutput> {
    if cfg.num_agents != 1 {
        return Err(Error::Config("the reference PPO path runs exactly one agent".into()));
    }
    let lr_used = state.lr;
    let spec = cfg.env_spec()?;
    let mut batch = collect(
        &nets.policy,
        &state.policy,
        &nets.value,
        &state.value,
        &spec,
        &mut state.envs,
        cfg.horizon,
        state.iteration,
        cfg.parallelism,
    )?;
    {
        let slab = &mut batch.slabs[0];
        let (adv, ret) = gae(
            slab.env_rewards.as_slice().unwrap(),
            slab.values.as_slice().unwrap(),
            slab.dones.as_slice().unwrap(),
            slab.bootstrap_values.as_slice().unwrap(),
            &cfg.advantage_config(),
        );
        slab.advantages = Array1::from(adv);
        slab.returns = Array1::from(ret);
    }
    let is_stats = collection_is_stats(&nets.policy, &state.policy, &batch, cfg.parallelism)?;

    let slab = &batch.slabs[0];
    let n = slab.rows();
    let n_mb = cfg.batch_rows() / cfg.minibatch_rows();
    let chunk = n / n_mb;
    let weights = cfg.loss_weights();
    let mut sum: Option<LossBreakdown> = None;
    let mut count = 0usize;
    let mut max_norm: f64 = 0.0;
    for epoch in 0..cfg.mini_epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(
            cfg.seed,
            Purpose::Shuffle,
            &[state.iteration, epoch as u64],
        ));
        for rows in perm.chunks(chunk) {
            let mut adv = slab.advantages.select(Axis(0), rows);
            if cfg.normalize_advantages {
                normalize_advantages(adv.as_slice_mut().unwrap());
            }
            let mb = Minibatch {
                num_agents: 1,
                policy: vec![PolicySegment {
                    kind: SegmentKind::LeaderOn,
                    phi: 0.0,
                    states: slab.states.select(Axis(0), rows),
                    actions: slab.actions.select(Axis(0), rows),
                    behavior_log_probs: slab.behavior_log_probs.select(Axis(0), rows),
                    advantages: adv,
                }],
                value: vec![ValueSegment {
                    phi: 0.0,
                    states: slab.states.select(Axis(0), rows),
                    returns: slab.returns.select(Axis(0), rows),
                }],
            };
            let eval = evaluate(
                &nets.policy,
                &state.policy,
                &nets.value,
                &state.value,
                &mb,
                &weights,
                LossTerm::Total,
                cfg.parallelism,
            )?;
            let (mut pg, mut vg) = (eval.policy_grad, eval.value_grad);
            pg.clip_norm(cfg.grad_norm);
            vg.clip_norm(cfg.grad_norm);
            max_norm = max_norm.max(pg.norm()).max(vg.norm());
            state
                .policy_adam
                .step(state.policy.as_mut_slice(), pg.as_slice(), state.lr);
            nets.policy.clamp_log_std(&mut state.policy);
            quantize(state.policy.as_mut_slice());
            state
                .value_adam
                .step(state.value.as_mut_slice(), vg.as_slice(), state.lr);
            quantize(state.value.as_mut_slice());
            match &mut sum {
                None => sum = Some(eval.breakdown),
                Some(acc) => acc.accumulate(&eval.breakdown, 1.0),
            }
            count += 1;
        }
    }
    let losses = sum.map(|s| {
        let mut mean = LossBreakdown::empty(1);
        mean.accumulate(&s, 1.0 / count as f64);
        mean
    });
    let prepared = Prepared {
        batch,
        disc_batch: None,
        disc_loss: None,
    };
    let summary = IterationSummary {
        disc_loss: None,
        follower: None,
        is_stats,
        opt: OptStats {
            losses,
            count,
            max_clipped_norm: max_norm,
        },
        lr_used,
    };
    finish_iteration(nets, state, &prepared, cfg, summary)
}
