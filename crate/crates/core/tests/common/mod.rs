#![allow(dead_code)]

use epg_core::diversity::{disc_loss, disc_loss_and_grad, DiscBatch};
use epg_core::exec::Parallelism;
use epg_core::nets::{log_prob_row, phi, with_phi, DiscNet, PolicyNet, PolicyParams, ValueNet, ValueParams};
use epg_core::objectives::{evaluate, LossTerm, LossWeights, Minibatch, PolicySegment, SegmentKind, ValueSegment};
use epg_core::rng::{stream, Purpose};
use ndarray::{Array1, Array2};
use rand::Rng;

pub struct GradFixture {
    pub policy: PolicyNet,
    pub policy_params: PolicyParams,
    pub value: ValueNet,
    pub value_params: ValueParams,
    pub minibatch: Minibatch,
    pub weights: LossWeights,
}

/// A three-agent minibatch over small nets (under 100 parameters each) with
/// every policy segment kind, some clipped ratios, capped weights, and
/// means outside the action bounds.
pub fn grad_fixture(seed: u64) -> GradFixture {
    let m = 3;
    let (sd, ad) = (3, 2);
    let policy = PolicyNet::new(sd, ad, &[6]);
    let value = ValueNet::new(sd, &[6]);
    let mut rng = stream(seed, Purpose::Synthetic, &[99]);
    let gauss = |scale: f64, rng: &mut rand_chacha::ChaCha8Rng| scale * (rng.random::<f64>() - 0.5) * 2.0;
    let pp: Vec<f64> = (0..policy.param_count()).map(|_| gauss(1.2, &mut rng)).collect();
    let mut policy_params = PolicyParams(pp);
    let n_ls = policy.param_count() - ad;
    for k in 0..ad {
        policy_params.as_mut_slice()[n_ls + k] = -0.3 + 0.2 * k as f64;
    }
    let value_params = ValueParams((0..value.param_count()).map(|_| gauss(0.8, &mut rng)).collect());

    let rows = 10;
    let segment = |kind: SegmentKind, agent_phi: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let states = Array2::from_shape_fn((rows, sd), |_| gauss(1.0, rng));
        let means = policy.means(
            &policy_params,
            with_phi(states.view(), agent_phi).view(),
            Parallelism::Sequential,
        );
        let actions = Array2::from_shape_fn((rows, ad), |(r, c)| means[[r, c]] + gauss(1.0, rng));
        let log_std = policy.log_std(&policy_params).to_vec();
        let behavior = Array1::from_shape_fn(rows, |r| {
            let lp = log_prob_row(
                means.row(r).as_slice().unwrap(),
                &log_std,
                actions.row(r).as_slice().unwrap(),
            );
            lp + gauss(0.45, rng)
        });
        let advantages = Array1::from_shape_fn(rows, |_| gauss(1.0, rng));
        PolicySegment {
            kind,
            phi: agent_phi,
            states,
            actions,
            behavior_log_probs: behavior,
            advantages,
        }
    };
    let mut policy_segments = vec![
        segment(SegmentKind::LeaderOn, 0.0, &mut rng),
        segment(SegmentKind::LeaderOff, 0.0, &mut rng),
    ];
    for i in 1..m {
        policy_segments.push(segment(SegmentKind::FollowerOn(i), phi(i, m), &mut rng));
        policy_segments.push(segment(SegmentKind::ForwardKl(i), phi(i, m), &mut rng));
    }
    let value_segments = (0..m)
        .map(|i| ValueSegment {
            phi: phi(i, m),
            states: Array2::from_shape_fn((rows, sd), |_| gauss(1.0, &mut rng)),
            returns: Array1::from_shape_fn(rows, |_| gauss(2.0, &mut rng)),
        })
        .collect();
    GradFixture {
        policy,
        policy_params,
        value,
        value_params,
        minibatch: Minibatch {
            num_agents: m,
            policy: policy_segments,
            value: value_segments,
        },
        weights: LossWeights {
            beta: 0.7,
            entropy_coef: 0.05,
            bounds_coef: 0.3,
            critic_coef: 2.0,
            ..LossWeights::default()
        },
    }
}

pub fn all_terms(num_agents: usize) -> Vec<LossTerm> {
    let mut terms = vec![LossTerm::LeaderOn, LossTerm::LeaderOff];
    for i in 1..num_agents {
        terms.push(LossTerm::FollowerOn(i));
        terms.push(LossTerm::ForwardKl(i));
    }
    terms.extend([LossTerm::Entropy, LossTerm::Bounds, LossTerm::Value, LossTerm::Total]);
    terms
}

/// Relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)` between the analytic gradient
/// of `term` and central differences over policy parameters (value
/// parameters for the value term, both for the total).
pub fn gradient_rel_error(fx: &GradFixture, term: LossTerm) -> (f64, f64) {
    let eval = |pp: &PolicyParams, vp: &ValueParams| {
        evaluate(
            &fx.policy,
            pp,
            &fx.value,
            vp,
            &fx.minibatch,
            &fx.weights,
            term,
            Parallelism::Sequential,
        )
        .unwrap()
        .breakdown
        .term(term)
    };
    let analytic = evaluate(
        &fx.policy,
        &fx.policy_params,
        &fx.value,
        &fx.value_params,
        &fx.minibatch,
        &fx.weights,
        term,
        Parallelism::Sequential,
    )
    .unwrap();
    let h = 1e-6;
    let mut diff2 = 0.0;
    let mut g2 = 0.0;
    let mut f2 = 0.0;
    let mut visit = |g: f64, fd: f64| {
        diff2 += (g - fd).powi(2);
        g2 += g * g;
        f2 += fd * fd;
    };
    if term != LossTerm::Value {
        for k in 0..fx.policy_params.len() {
            let mut up = fx.policy_params.clone();
            up.as_mut_slice()[k] += h;
            let mut dn = fx.policy_params.clone();
            dn.as_mut_slice()[k] -= h;
            let fd = (eval(&up, &fx.value_params) - eval(&dn, &fx.value_params)) / (2.0 * h);
            visit(analytic.policy_grad.0[k], fd);
        }
    }
    if matches!(term, LossTerm::Value | LossTerm::Total) {
        for k in 0..fx.value_params.len() {
            let mut up = fx.value_params.clone();
            up.as_mut_slice()[k] += h;
            let mut dn = fx.value_params.clone();
            dn.as_mut_slice()[k] -= h;
            let fd = (eval(&fx.policy_params, &up) - eval(&fx.policy_params, &dn)) / (2.0 * h);
            visit(analytic.value_grad.0[k], fd);
        }
    }
    let scale = g2.sqrt().max(f2.sqrt());
    (if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale }, g2.sqrt())
}

/// Same relative error for the discriminator's cross-entropy on a small
/// random three-class batch. Returns (rel_err, param_count).
pub fn disc_rel_error(seed: u64) -> (f64, usize) {
    let net = DiscNet::new(3, 2, 3, &[6]);
    let mut rng = stream(seed, Purpose::Synthetic, &[98]);
    let params = epg_core::nets::DiscParams((0..net.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let rows = 12;
    let batch = DiscBatch {
        inputs: Array2::from_shape_fn((rows, 5), |_| rng.random_range(-1.0..1.0)),
        labels: (0..rows).map(|r| r % 3).collect(),
    };
    let (_, g) = disc_loss_and_grad(&net, &params, &batch, Parallelism::Sequential).unwrap();
    let h = 1e-6;
    let (mut diff2, mut g2, mut f2) = (0.0, 0.0, 0.0);
    for k in 0..params.len() {
        let mut up = params.clone();
        up.as_mut_slice()[k] += h;
        let mut dn = params.clone();
        dn.as_mut_slice()[k] -= h;
        let fd = (disc_loss(&net, &up, &batch, Parallelism::Sequential).unwrap()
            - disc_loss(&net, &dn, &batch, Parallelism::Sequential).unwrap())
            / (2.0 * h);
        diff2 += (g.0[k] - fd).powi(2);
        g2 += g.0[k].powi(2);
        f2 += fd * fd;
    }
    ((diff2 / g2.max(f2)).sqrt(), params.len())
}
