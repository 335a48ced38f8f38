//! Training losses and their exact gradients.
//!
//! Scalar helpers (`clipped_surrogate`, `follower_forward_kl_loss`, ...) work
//! on ratios and log-probabilities directly. [`evaluate`] assembles the full
//! ensemble objective for one minibatch and backpropagates it through the
//! shared policy and value networks.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::nets::{
    entropy_of, log_prob_grad_row, log_prob_row, with_phi, GradientVector, PolicyNet, PolicyParams, ValueNet,
    ValueParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub critic_coef: f64,
    pub bounds_coef: f64,
    /// Scale of the followers' leader-data term.
    pub beta: f64,
    /// Temperature of the exponential advantage weight.
    pub lambda_f: f64,
    /// Reverse-KL temperature; only 0 is supported.
    pub lambda_r: f64,
    /// Cap on the exponential advantage weight.
    pub w_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            entropy_coef: 0.005,
            critic_coef: 4.0,
            bounds_coef: 1e-4,
            beta: 0.001,
            lambda_f: 0.2,
            lambda_r: 0.0,
            w_max: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.clip_eps,
            self.entropy_coef,
            self.critic_coef,
            self.bounds_coef,
            self.beta,
            self.lambda_f,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss coefficients must be finite".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip epsilon {} outside (0, 1)", self.clip_eps)));
        }
        if self.lambda_f <= 0.0 {
            return Err(Error::Config(format!(
                "lambda_f must be positive, got {}",
                self.lambda_f
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.w_max.is_nan() || self.w_max <= 1.0 {
            return Err(Error::Config(format!("w_max must exceed 1, got {}", self.w_max)));
        }
        if self.lambda_r != 0.0 {
            return Err(Error::Config("only lambda_r = 0 is supported".into()));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub leader_on: f64,
    pub leader_off: f64,
    /// Indexed by follower `i − 1`.
    pub follower_on: Vec<f64>,
    /// Indexed by follower `i − 1`.
    pub follower_fkl: Vec<f64>,
    pub entropy: f64,
    pub value: f64,
    pub bounds: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the parts.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.leader_on
            + self.leader_off
            + self.follower_on.iter().sum::<f64>()
            + w.beta * self.follower_fkl.iter().sum::<f64>()
            - w.entropy_coef * self.entropy
            + w.critic_coef * self.value
            + w.bounds_coef * self.bounds
    }

    /// Value of a single term; `Total` returns the stored total.
    pub fn term(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::LeaderOn => self.leader_on,
            LossTerm::LeaderOff => self.leader_off,
            LossTerm::FollowerOn(i) => self.follower_on[i - 1],
            LossTerm::ForwardKl(i) => self.follower_fkl[i - 1],
            LossTerm::Entropy => self.entropy,
            LossTerm::Bounds => self.bounds,
            LossTerm::Value => self.value,
            LossTerm::Total => self.total,
        }
    }

    pub fn empty(num_agents: usize) -> Self {
        let f = num_agents.saturating_sub(1);
        Self {
            follower_on: vec![0.0; f],
            follower_fkl: vec![0.0; f],
            ..Default::default()
        }
    }

    /// Running mean helper for per-iteration reporting.
    pub fn accumulate(&mut self, other: &LossBreakdown, k: f64) {
        self.leader_on += k * other.leader_on;
        self.leader_off += k * other.leader_off;
        for (a, b) in self.follower_on.iter_mut().zip(&other.follower_on) {
            *a += k * b;
        }
        for (a, b) in self.follower_fkl.iter_mut().zip(&other.follower_fkl) {
            *a += k * b;
        }
        self.entropy += k * other.entropy;
        self.value += k * other.value;
        self.bounds += k * other.bounds;
        self.total += k * other.total;
    }
}

#[inline]
fn surrogate_row(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

/// `−mean(min(r·A, clip(r, 1−ε, 1+ε)·A))`
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() {
        return Err(Error::Config("ratios and advantages differ in length".into()));
    }
    if ratios.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, (&r, &a)) in ratios.iter().zip(advantages).enumerate() {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::numerical("clipped_surrogate", format!("ratio {r} at row {i}")));
        }
        sum += surrogate_row(r, a, eps).0;
    }
    Ok(-sum / ratios.len() as f64)
}

/// True when the clipped branch is the active (strictly smaller) one.
pub fn is_clipped(ratio: f64, adv: f64, eps: f64) -> bool {
    surrogate_row(ratio, adv, eps).1
}

/// Leader objective: clipped surrogate on its own data plus clipped surrogate
/// on follower `j`'s data with ratio `π_L / π_{F_j,old}`.
pub fn sapg_leader_loss(on: (&[f64], &[f64]), off: (&[f64], &[f64]), eps: f64) -> Result<f64> {
    Ok(clipped_surrogate(on.0, on.1, eps)? + clipped_surrogate(off.0, off.1, eps)?)
}

/// Follower objective on its own data.
pub fn follower_on_policy_loss(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    clipped_surrogate(ratios, advantages, eps)
}

/// `min(exp(A/λ_f), W_max)`, computed without overflow for finite inputs.
pub fn exp_advantage_weight(adv: f64, lambda_f: f64, w_max: f64) -> Result<f64> {
    let z = adv / lambda_f;
    if z.is_nan() || z == f64::INFINITY && w_max.is_infinite() {
        return Err(Error::numerical(
            "forward-KL weight",
            format!("exp({adv}/{lambda_f}) is not finite"),
        ));
    }
    if w_max.is_finite() && z >= w_max.ln() {
        return Ok(w_max);
    }
    let w = z.exp();
    if !w.is_finite() {
        return Err(Error::numerical(
            "forward-KL weight",
            format!("exp({adv}/{lambda_f}) overflows"),
        ));
    }
    Ok(w)
}

/// `−mean(log π_F(a|s) · min(exp(A/λ_f), W_max))` over leader samples.
pub fn follower_forward_kl_loss(log_probs: &[f64], advantages: &[f64], lambda_f: f64, w_max: f64) -> Result<f64> {
    if log_probs.len() != advantages.len() {
        return Err(Error::Config("log-probs and advantages differ in length".into()));
    }
    if log_probs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (&lp, &a) in log_probs.iter().zip(advantages) {
        sum += lp * exp_advantage_weight(a, lambda_f, w_max)?;
    }
    Ok(-sum / log_probs.len() as f64)
}

/// `mean_rows Σ_k max(0, |μ_k| − 1)²`
pub fn bounds_loss(means: ArrayView2<'_, f64>) -> f64 {
    if means.nrows() == 0 {
        return 0.0;
    }
    means.iter().map(|m| (m.abs() - 1.0).max(0.0).powi(2)).sum::<f64>() / means.nrows() as f64
}

/// Mean squared error.
pub fn value_loss(predicted: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(predicted.len(), returns.len());
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(returns).map(|(v, r)| (v - r).powi(2)).sum::<f64>() / predicted.len() as f64
}

/// Which rows a policy segment holds and how they enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    /// Leader on its own data.
    LeaderOn,
    /// Leader on follower `j`'s data, ratio against the follower's behavior.
    LeaderOff,
    /// Follower `i` on its own data.
    FollowerOn(usize),
    /// Follower `i` head on leader data, exp-advantage weighted likelihood.
    ForwardKl(usize),
}

impl SegmentKind {
    fn is_own(self) -> bool {
        matches!(self, SegmentKind::LeaderOn | SegmentKind::FollowerOn(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySegment {
    pub kind: SegmentKind,
    /// Embedding of the head being evaluated.
    pub phi: f64,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// Behavior log-probs (ratio denominators); unused by `ForwardKl`.
    pub behavior_log_probs: Array1<f64>,
    pub advantages: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSegment {
    pub phi: f64,
    pub states: Array2<f64>,
    pub returns: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub num_agents: usize,
    pub policy: Vec<PolicySegment>,
    pub value: Vec<ValueSegment>,
}

/// A single term to differentiate, or the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    LeaderOn,
    LeaderOff,
    FollowerOn(usize),
    ForwardKl(usize),
    Entropy,
    Bounds,
    Value,
    Total,
}

#[derive(Debug, Clone, Copy)]
struct Coefficients {
    leader_on: f64,
    leader_off: f64,
    follower_on: f64,
    fkl: f64,
    follower_sel: Option<usize>,
    entropy: f64,
    bounds: f64,
    value: f64,
}

impl Coefficients {
    fn for_term(term: LossTerm, w: &LossWeights) -> Self {
        let zero = Coefficients {
            leader_on: 0.0,
            leader_off: 0.0,
            follower_on: 0.0,
            fkl: 0.0,
            follower_sel: None,
            entropy: 0.0,
            bounds: 0.0,
            value: 0.0,
        };
        match term {
            LossTerm::Total => Coefficients {
                leader_on: 1.0,
                leader_off: 1.0,
                follower_on: 1.0,
                fkl: w.beta,
                follower_sel: None,
                entropy: -w.entropy_coef,
                bounds: w.bounds_coef,
                value: w.critic_coef,
            },
            LossTerm::LeaderOn => Coefficients { leader_on: 1.0, ..zero },
            LossTerm::LeaderOff => Coefficients {
                leader_off: 1.0,
                ..zero
            },
            LossTerm::FollowerOn(i) => Coefficients {
                follower_on: 1.0,
                follower_sel: Some(i),
                ..zero
            },
            LossTerm::ForwardKl(i) => Coefficients {
                fkl: 1.0,
                follower_sel: Some(i),
                ..zero
            },
            LossTerm::Entropy => Coefficients { entropy: 1.0, ..zero },
            LossTerm::Bounds => Coefficients { bounds: 1.0, ..zero },
            LossTerm::Value => Coefficients { value: 1.0, ..zero },
        }
    }

    fn segment(&self, kind: SegmentKind) -> f64 {
        let selected = |i: usize| self.follower_sel.is_none_or(|s| s == i);
        match kind {
            SegmentKind::LeaderOn => self.leader_on,
            SegmentKind::LeaderOff => self.leader_off,
            SegmentKind::FollowerOn(i) if selected(i) => self.follower_on,
            SegmentKind::ForwardKl(i) if selected(i) => self.fkl,
            _ => 0.0,
        }
    }
}

/// Result of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub policy_grad: GradientVector,
    pub value_grad: GradientVector,
}

struct RowInfo {
    segment: usize,
    local: usize,
}

/// Evaluates the ensemble objective on `mb` and the gradient of `term`
/// (usually [`LossTerm::Total`]) with respect to policy and value parameters.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &PolicyNet,
    policy_params: &PolicyParams,
    value: &ValueNet,
    value_params: &ValueParams,
    mb: &Minibatch,
    weights: &LossWeights,
    term: LossTerm,
    par: Parallelism,
) -> Result<Evaluation> {
    policy.check(policy_params)?;
    let coef = Coefficients::for_term(term, weights);
    let ad = policy.action_dim();
    let log_std = policy.log_std(policy_params).to_vec();

    // Stack every segment into one input matrix.
    let segs: Vec<&PolicySegment> = mb.policy.iter().filter(|s| s.states.nrows() > 0).collect();
    let mut rows = Vec::new();
    let mut inputs_parts = Vec::new();
    for (si, seg) in segs.iter().enumerate() {
        if seg.actions.nrows() != seg.states.nrows() || seg.advantages.len() != seg.states.nrows() {
            return Err(Error::Contract(format!("segment {:?} has misaligned rows", seg.kind)));
        }
        inputs_parts.push(with_phi(seg.states.view(), seg.phi));
        rows.extend((0..seg.states.nrows()).map(|local| RowInfo { segment: si, local }));
    }
    let own_rows: usize = segs.iter().filter(|s| s.kind.is_own()).map(|s| s.states.nrows()).sum();
    let fkl_weights: Vec<Option<Vec<f64>>> = segs
        .iter()
        .map(|seg| match seg.kind {
            SegmentKind::ForwardKl(_) => seg
                .advantages
                .iter()
                .map(|&a| exp_advantage_weight(a, weights.lambda_f, weights.w_max))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let n_segs = segs.len();
    let (mlp_grad, sides) = if rows.is_empty() {
        (vec![0.0; policy.mlp().param_count()], Vec::new())
    } else {
        let views: Vec<_> = inputs_parts.iter().map(|p| p.view()).collect();
        let inputs = ndarray::concatenate(ndarray::Axis(0), &views).expect("segments share input width");
        let mlp_params = policy.mlp_params(policy_params);
        policy
            .mlp()
            .forward_backward_with(mlp_params, inputs.view(), par, |range, means| {
                let mut d_out = Array2::zeros(means.raw_dim());
                let mut seg_loss = vec![0.0; n_segs];
                let mut bounds = 0.0;
                let mut d_log_std = vec![0.0; ad];
                let mut err: Option<Error> = None;
                for (local_row, global) in range.enumerate() {
                    let info = &rows[global];
                    let seg = segs[info.segment];
                    let n = seg.states.nrows() as f64;
                    let mean = means.row(local_row);
                    let mean = mean.as_slice().unwrap();
                    let action = seg.actions.row(info.local);
                    let action = action.as_slice().unwrap();
                    let lp = log_prob_row(mean, &log_std, action);
                    let c = coef.segment(seg.kind);
                    let d_lp = match seg.kind {
                        SegmentKind::ForwardKl(_) => {
                            let w = fkl_weights[info.segment].as_ref().unwrap()[info.local];
                            seg_loss[info.segment] -= lp * w / n;
                            -w / n
                        }
                        _ => {
                            let ratio = (lp - seg.behavior_log_probs[info.local]).exp();
                            if !ratio.is_finite() {
                                err.get_or_insert_with(|| {
                                    Error::numerical(
                                        format!("{:?}", seg.kind),
                                        format!("non-finite ratio at row {}", info.local),
                                    )
                                });
                                continue;
                            }
                            let adv = seg.advantages[info.local];
                            let (surr, clipped) = surrogate_row(ratio, adv, weights.clip_eps);
                            seg_loss[info.segment] -= surr / n;
                            if clipped {
                                0.0
                            } else {
                                -ratio * adv / n
                            }
                        }
                    };
                    let mut d_mean = d_out.row_mut(local_row);
                    let d_mean = d_mean.as_slice_mut().unwrap();
                    if c != 0.0 && d_lp != 0.0 {
                        log_prob_grad_row(mean, &log_std, action, c * d_lp, d_mean, &mut d_log_std);
                    }
                    if seg.kind.is_own() {
                        let nb = own_rows as f64;
                        for k in 0..ad {
                            let excess = (mean[k].abs() - 1.0).max(0.0);
                            bounds += excess * excess / nb;
                            if coef.bounds != 0.0 && excess > 0.0 {
                                d_mean[k] += coef.bounds * 2.0 * excess * mean[k].signum() / nb;
                            }
                        }
                    }
                }
                (d_out, (seg_loss, bounds, d_log_std, err))
            })
    };

    let mut breakdown = LossBreakdown::empty(mb.num_agents);
    let mut d_log_std = vec![0.0; ad];
    for (seg_loss, bounds, dls, err) in sides {
        if let Some(e) = err {
            return Err(e);
        }
        for (si, l) in seg_loss.into_iter().enumerate() {
            match segs[si].kind {
                SegmentKind::LeaderOn => breakdown.leader_on += l,
                SegmentKind::LeaderOff => breakdown.leader_off += l,
                SegmentKind::FollowerOn(i) => breakdown.follower_on[i - 1] += l,
                SegmentKind::ForwardKl(i) => breakdown.follower_fkl[i - 1] += l,
            }
        }
        breakdown.bounds += bounds;
        for (a, b) in d_log_std.iter_mut().zip(dls) {
            *a += b;
        }
    }

    // Entropy of each agent's head, one term per agent with own data.
    let own_segments = segs.iter().filter(|s| s.kind.is_own()).count();
    breakdown.entropy = own_segments as f64 * entropy_of(&log_std);
    for d in d_log_std.iter_mut() {
        *d += coef.entropy * own_segments as f64;
    }

    // Value loss: Σ_agents mean (V − R̂)².
    let mut value_grad = vec![0.0; value.param_count()];
    let vsegs: Vec<&ValueSegment> = mb.value.iter().filter(|s| s.states.nrows() > 0).collect();
    if !vsegs.is_empty() {
        let parts: Vec<_> = vsegs.iter().map(|s| with_phi(s.states.view(), s.phi)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let inputs = ndarray::concatenate(ndarray::Axis(0), &views).expect("value segments share width");
        let mut owner = Vec::with_capacity(inputs.nrows());
        for (si, seg) in vsegs.iter().enumerate() {
            owner.extend((0..seg.states.nrows()).map(|local| (si, local)));
        }
        let (g, sides) =
            value
                .mlp()
                .forward_backward_with(value_params.as_slice(), inputs.view(), par, |range, out| {
                    let mut d_out = Array2::zeros(out.raw_dim());
                    let mut loss = 0.0;
                    for (lr, global) in range.enumerate() {
                        let (si, local) = owner[global];
                        let n = vsegs[si].states.nrows() as f64;
                        let diff = out[[lr, 0]] - vsegs[si].returns[local];
                        loss += diff * diff / n;
                        d_out[[lr, 0]] = coef.value * 2.0 * diff / n;
                    }
                    (d_out, loss)
                });
        value_grad = g;
        breakdown.value = sides.into_iter().sum();
    }

    breakdown.total = breakdown.weighted_total(weights);
    if !breakdown.total.is_finite() {
        return Err(Error::numerical("total loss", format!("{breakdown:?}")));
    }
    let mut policy_grad = mlp_grad;
    policy_grad.extend(d_log_std);
    Ok(Evaluation {
        breakdown,
        policy_grad: GradientVector(policy_grad),
        value_grad: GradientVector(value_grad),
    })
}

/// Gradient of a single loss term (or the total) with respect to the policy
/// parameters; the value-network gradient for [`LossTerm::Value`].
#[allow(clippy::too_many_arguments)]
pub fn backprop(
    term: LossTerm,
    policy: &PolicyNet,
    policy_params: &PolicyParams,
    value: &ValueNet,
    value_params: &ValueParams,
    mb: &Minibatch,
    weights: &LossWeights,
    par: Parallelism,
) -> Result<GradientVector> {
    let eval = evaluate(policy, policy_params, value, value_params, mb, weights, term, par)?;
    let grad = if term == LossTerm::Value {
        eval.value_grad
    } else {
        eval.policy_grad
    };
    if let Some(i) = grad.first_non_finite() {
        return Err(Error::numerical(
            format!("gradient of {term:?}"),
            format!("entry {i} is not finite"),
        ));
    }
    Ok(grad)
}

/// Slices `rows` out of a segment (used to build minibatches).
pub fn select_rows(seg: &PolicySegment, rows: &[usize]) -> PolicySegment {
    PolicySegment {
        kind: seg.kind,
        phi: seg.phi,
        states: seg.states.select(ndarray::Axis(0), rows),
        actions: seg.actions.select(ndarray::Axis(0), rows),
        behavior_log_probs: seg.behavior_log_probs.select(ndarray::Axis(0), rows),
        advantages: seg.advantages.select(ndarray::Axis(0), rows),
    }
}
