//! Shared policy, value and discriminator networks.
//!
//! One policy parameter vector serves every agent of the ensemble; agents
//! differ only through the scalar embedding φ appended to the state.

mod gaussian;
mod mlp;
pub mod snapshot;

pub use gaussian::{entropy_of, kl_gaussian, kl_rows, log_prob_grad_row, log_prob_row, GaussianHead, HALF_LN_2PI};
pub use mlp::{Mlp, Tape};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::rng::{stream, Purpose};

pub const LOG_STD_MIN: f64 = -4.605_170_185_988_091; // ln 0.01
pub const LOG_STD_MAX: f64 = std::f64::consts::LN_2;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Embedding of agent `index` among `num_agents`: `i / (M − 1)`, leader at 0.
pub fn phi(index: usize, num_agents: usize) -> f64 {
    if num_agents <= 1 {
        0.0
    } else {
        index as f64 / (num_agents - 1) as f64
    }
}

/// Rounds every entry to the nearest `f32`. Parameters are kept
/// f32-representable so the checkpoint format stores them losslessly.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

macro_rules! param_vector {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }
            pub fn len(&self) -> usize {
                self.0.len()
            }
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

param_vector!(
    /// Policy MLP weights followed by the state-independent log-std vector.
    PolicyParams
);
param_vector!(ValueParams);
param_vector!(DiscParams);
param_vector!(
    /// Gradient aligned index-for-index with its parameter vector.
    GradientVector
);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to norm at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            self.0.iter_mut().for_each(|g| *g *= k);
        }
        norm
    }

    pub fn add_scaled(&mut self, other: &[f64], k: f64) {
        assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += k * b;
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|g| !g.is_finite())
    }
}

/// Appends a constant embedding column to a batch of states.
pub fn with_phi(states: ArrayView2<'_, f64>, phi: f64) -> Array2<f64> {
    let (n, d) = states.dim();
    let mut out = Array2::from_elem((n, d + 1), phi);
    out.slice_mut(s![.., ..d]).assign(&states);
    out
}

/// Concatenates state and action batches column-wise.
pub fn state_action(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[states, actions]).expect("state/action rows must match")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl PolicyNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![state_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Self {
            mlp: Mlp::new(sizes),
            state_dim,
            action_dim,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.action_dim
    }

    pub fn mlp_params<'p>(&self, params: &'p PolicyParams) -> &'p [f64] {
        &params.0[..self.mlp.param_count()]
    }

    pub fn log_std<'p>(&self, params: &'p PolicyParams) -> &'p [f64] {
        &params.0[self.mlp.param_count()..]
    }

    pub fn init(&self, seed: u64) -> PolicyParams {
        let mut rng = stream(seed, Purpose::Init, &[0]);
        let mut values = self.mlp.init(&mut rng, 5.0 / 3.0, 0.01);
        values.extend(std::iter::repeat_n(0.0, self.action_dim));
        quantize(&mut values);
        PolicyParams(values)
    }

    pub fn check(&self, params: &PolicyParams) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Config(format!(
                "policy parameter vector has {} entries, architecture needs {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Gaussian head for one state under embedding `phi`.
    pub fn forward(&self, params: &PolicyParams, state: &[f64], phi: f64) -> Result<GaussianHead> {
        self.check(params)?;
        if state.len() != self.state_dim {
            return Err(Error::Config(format!(
                "policy_forward: state has {} dims, expected {}",
                state.len(),
                self.state_dim
            )));
        }
        let mut input = state.to_vec();
        input.push(phi);
        let x = ArrayView2::from_shape((1, input.len()), &input).unwrap();
        let tape = self.mlp.forward(self.mlp_params(params), x);
        GaussianHead::new(tape.output().row(0).to_vec(), self.log_std(params).to_vec())
    }

    /// Batch of means for rows of `[state, φ]`.
    pub fn means(&self, params: &PolicyParams, inputs: ArrayView2<'_, f64>, par: Parallelism) -> Array2<f64> {
        self.mlp.predict(self.mlp_params(params), inputs, par)
    }

    pub fn clamp_log_std(&self, params: &mut PolicyParams) {
        let n = self.mlp.param_count();
        for v in &mut params.0[n..] {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    mlp: Mlp,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![state_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { mlp: Mlp::new(sizes) }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn init(&self, seed: u64) -> ValueParams {
        let mut rng = stream(seed, Purpose::Init, &[1]);
        let mut values = self.mlp.init(&mut rng, 5.0 / 3.0, 1.0);
        quantize(&mut values);
        ValueParams(values)
    }

    /// V(s) for rows of `[state, φ]`.
    pub fn values(&self, params: &ValueParams, inputs: ArrayView2<'_, f64>, par: Parallelism) -> Array1<f64> {
        self.mlp.predict(&params.0, inputs, par).index_axis_move(Axis(1), 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscNet {
    mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
    num_agents: usize,
}

impl DiscNet {
    pub fn new(state_dim: usize, action_dim: usize, num_agents: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_agents.max(1));
        Self {
            mlp: Mlp::new(sizes),
            state_dim,
            action_dim,
            num_agents,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn init(&self, seed: u64) -> DiscParams {
        let mut rng = stream(seed, Purpose::Init, &[2]);
        let mut values = self.mlp.init(&mut rng, 5.0 / 3.0, 0.01);
        quantize(&mut values);
        DiscParams(values)
    }

    /// D(· | s, a): softmax over the M agent logits.
    pub fn forward(&self, params: &DiscParams, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::Config(format!(
                "disc_forward: got state {} / action {}, expected {} / {}",
                state.len(),
                action.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        let input: Vec<f64> = state.iter().chain(action).copied().collect();
        let x = ArrayView2::from_shape((1, input.len()), &input).unwrap();
        let tape = self.mlp.forward(&params.0, x);
        Ok(softmax(tape.output().row(0).as_slice().unwrap()))
    }

    /// Logits for rows of `[state, action]`.
    pub fn logits(&self, params: &DiscParams, inputs: ArrayView2<'_, f64>, par: Parallelism) -> Array2<f64> {
        self.mlp.predict(&params.0, inputs, par)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log softmax(logits)[class]`
pub fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

/// The three networks of a run, built from one architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub disc: DiscNet,
}

impl Networks {
    pub fn new(state_dim: usize, action_dim: usize, num_agents: usize, hidden: &[usize]) -> Self {
        Self {
            policy: PolicyNet::new(state_dim, action_dim, hidden),
            value: ValueNet::new(state_dim, hidden),
            disc: DiscNet::new(state_dim, action_dim, num_agents, hidden),
        }
    }
}
