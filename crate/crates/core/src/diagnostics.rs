//! Importance-sampling diagnostics and empirical checks of the three
//! IS-deviation bounds (ESS link, clipping bias, Pinsker).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_chunks, map_row_chunks, Parallelism};
use crate::nets::{kl_gaussian, log_prob_grad_row, log_prob_row, with_phi, GaussianHead, PolicyNet, PolicyParams};
use crate::objectives::{is_clipped, LossBreakdown};
use crate::rng::{stream, Purpose};

/// Monte-Carlo slack, in standard errors.
pub const SLACK_SE: f64 = 3.0;
const MC_CHUNK: usize = 1 << 16;

/// Raw and normalized importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IsWeights {
    pub raw: Vec<f64>,
}

impl IsWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Degenerate(format!(
                "importance weight {w} is negative or not finite"
            )));
        }
        if !raw.iter().any(|&w| w > 0.0) {
            return Err(Error::Degenerate("all importance weights are zero".into()));
        }
        Ok(Self { raw })
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.raw.iter().sum();
        self.raw.iter().map(|w| w / total).collect()
    }
}

/// `1 / Σ w̃²` from raw weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let w = IsWeights::new(weights.to_vec())?;
    let max = w.raw.iter().cloned().fold(0.0, f64::max);
    // (Σw)² / Σw², scaled by the max weight to avoid overflow
    let (s1, s2) = w.raw.iter().fold((0.0, 0.0), |(a, b), &x| {
        let y = x / max;
        (a + y, b + y * y)
    });
    Ok(s1 * s1 / s2)
}

/// ESS from log-weights; stable when ratios span many orders of magnitude.
pub fn ess_from_log(log_weights: &[f64]) -> Result<f64> {
    if log_weights.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Degenerate("log importance weights contain NaN or +inf".into()));
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("all importance weights are zero".into()));
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(a, b), &l| {
        let y = (l - max).exp();
        (a + y, b + y * y)
    });
    Ok(s1 * s1 / s2)
}

/// `mean |1 − r|`; zero for an empty slice.
pub fn mean_is_deviation(ratios: &[f64]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().map(|r| (1.0 - r).abs()).sum::<f64>() / ratios.len() as f64
}

fn mean_and_se(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    if n < 2 {
        return (mean, 0.0, n);
    }
    let var = m2 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), n)
}

/// Outcome of one inequality check: `estimate ≤ bound + slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub estimate: f64,
    pub bound: f64,
    pub slack: f64,
    pub samples: usize,
    pub holds: bool,
    /// Free-form extra numbers (ESS, clipped fraction, KL).
    pub extras: Vec<(String, f64)>,
}

impl BoundReport {
    fn new(name: &str, estimate: f64, bound: f64, slack: f64, samples: usize) -> Self {
        Self {
            name: name.to_string(),
            estimate,
            bound,
            slack,
            samples,
            holds: estimate <= bound + slack,
            extras: Vec::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.extras.push((key.to_string(), value));
        self
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} estimate {:>12.6}  bound {:>12.6}  slack {:>10.3e}  n={:<9} {}",
            self.name,
            self.estimate,
            self.bound,
            self.slack,
            self.samples,
            if self.holds { "ok" } else { "VIOLATED" }
        )?;
        for (k, v) in &self.extras {
            write!(f, "  {k}={v:.6}")?;
        }
        Ok(())
    }
}

/// `mean|1 − r| ≤ √Var(r)` (population variance), with 3·SE slack.
pub fn verify_deviation_ess_link(ratios: &[f64]) -> Result<BoundReport> {
    if ratios.is_empty() {
        return Err(Error::Degenerate("no ratios to check".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !r.is_finite() || **r < 0.0) {
        return Err(Error::Degenerate(format!("ratio {r} is negative or not finite")));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let (dev, se, _) = mean_and_se(ratios.iter().map(|r| (1.0 - r).abs()));
    Ok(
        BoundReport::new("deviation <= sqrt(var)", dev, var.sqrt(), SLACK_SE * se, ratios.len())
            .with("ess", ess(ratios)?)
            .with("mean_ratio", mean),
    )
}

/// Samples `n` actions from `follower` and compares `E_F|1 − π_L/π_F|`
/// against `√(2·KL(F‖L))`.
pub fn verify_pinsker(
    follower: &GaussianHead,
    leader: &GaussianHead,
    n: usize,
    seed: u64,
    par: Parallelism,
) -> Result<BoundReport> {
    if n == 0 {
        return Err(Error::Degenerate("Pinsker check needs at least one sample".into()));
    }
    let kl = kl_gaussian(follower, leader)?;
    let chunks = n.div_ceil(MC_CHUNK);
    let parts = map_chunks(par, chunks, |c| {
        let mut rng = stream(seed, Purpose::Synthetic, &[1, c as u64]);
        let len = MC_CHUNK.min(n - c * MC_CHUNK);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let a = follower.sample(&mut rng);
            let lf = log_prob_row(&follower.mean, &follower.log_std, &a);
            let ll = log_prob_row(&leader.mean, &leader.log_std, &a);
            out.push((1.0 - (ll - lf).exp()).abs());
        }
        out
    });
    let (est, se, _) = mean_and_se(parts.into_iter().flatten());
    Ok(BoundReport::new("pinsker", est, (2.0 * kl).sqrt(), SLACK_SE * se, n).with("kl", kl))
}

/// Ratios, advantages and per-sample score vectors `∇ log π(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub ratios: Array1<f64>,
    pub advantages: Array1<f64>,
    pub scores: Array2<f64>,
}

/// Checks `‖mean(∇log π · r · A · 1_clipped)‖² ≤ mean(‖∇log π‖²(|1−r|+1)²A² · 1_{|1−r|>ε})`.
pub fn verify_clipping_bias(batch: &ClipBatch, eps: f64) -> Result<BoundReport> {
    let n = batch.ratios.len();
    if n == 0 {
        return Err(Error::Degenerate("clipping-bias check needs a non-empty batch".into()));
    }
    if batch.advantages.len() != n || batch.scores.nrows() != n {
        return Err(Error::Contract("clip batch fields differ in length".into()));
    }
    let mut bias = Array1::<f64>::zeros(batch.scores.ncols());
    let mut clipped = 0usize;
    let mut rhs_terms = Vec::with_capacity(n);
    for i in 0..n {
        let (r, a) = (batch.ratios[i], batch.advantages[i]);
        let score = batch.scores.row(i);
        if is_clipped(r, a, eps) {
            clipped += 1;
            bias.scaled_add(r * a, &score);
        }
        let dev = (1.0 - r).abs();
        rhs_terms.push(if dev > eps {
            score.dot(&score) * (dev + 1.0).powi(2) * a * a
        } else {
            0.0
        });
    }
    bias /= n as f64;
    let (rhs, se, _) = mean_and_se(rhs_terms.into_iter());
    Ok(
        BoundReport::new("clipping bias", bias.dot(&bias), rhs, SLACK_SE * se, n)
            .with("clipped_fraction", clipped as f64 / n as f64),
    )
}

/// Per-sample score vectors of the shared policy with respect to all its
/// parameters (mean network and log-std).
pub fn score_vectors(
    policy: &PolicyNet,
    params: &PolicyParams,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    phi: f64,
    par: Parallelism,
) -> Result<Array2<f64>> {
    policy.check(params)?;
    let inputs = with_phi(states, phi);
    let ad = policy.action_dim();
    let mlp = policy.mlp();
    let mlp_params = policy.mlp_params(params);
    let log_std = policy.log_std(params);
    let np = policy.param_count();
    let parts = map_row_chunks(par, inputs.nrows(), |range| {
        let mut out = Array2::zeros((range.len(), np));
        for (local, r) in range.enumerate() {
            let x = inputs.slice(ndarray::s![r..r + 1, ..]);
            let tape = mlp.forward(mlp_params, x);
            let mean = tape.output().row(0).to_vec();
            let mut d_mean = Array2::zeros((1, ad));
            let mut d_ls = vec![0.0; ad];
            let action = actions.row(r).to_vec();
            log_prob_grad_row(&mean, log_std, &action, 1.0, d_mean.as_slice_mut().unwrap(), &mut d_ls);
            let mut g = vec![0.0; mlp.param_count()];
            mlp.backward(mlp_params, &tape, d_mean.view(), &mut g);
            g.extend(d_ls);
            out.row_mut(local).assign(&Array1::from(g));
        }
        out
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, np))))
}

/// Ratios of `N(shift, 1)` over `N(0, 1)` at `n` behavior samples.
pub fn synthetic_shift_ratios(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Purpose::Synthetic, &[0]);
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            (shift * a - 0.5 * shift * shift).exp()
        })
        .collect()
}

/// Clip batch with LogNormal(0, 0.5) ratios, N(0,1) advantages, and scores
/// of a small fixed policy at random states/actions.
pub fn synthetic_clip_batch(n: usize, seed: u64, par: Parallelism) -> Result<ClipBatch> {
    let mut rng = stream(seed, Purpose::Synthetic, &[2]);
    let ln = LogNormal::new(0.0, 0.5).expect("valid lognormal");
    let ratios = Array1::from_shape_fn(n, |_| ln.sample(&mut rng));
    let advantages = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
    let states = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
    let actions = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut rng));
    let policy = PolicyNet::new(2, 1, &[8]);
    let params = policy.init(seed);
    let scores = score_vectors(&policy, &params, states.view(), actions.view(), 0.0, par)?;
    Ok(ClipBatch {
        ratios,
        advantages,
        scores,
    })
}

/// Random diagonal Gaussian pair whose KL lands in `[0, max_kl]`.
pub fn random_gaussian_pair(seed: u64, index: u64, dim: usize, max_kl: f64) -> (GaussianHead, GaussianHead) {
    let mut rng = stream(seed, Purpose::Synthetic, &[3, index]);
    let target: f64 = rng.random_range(0.0..max_kl);
    let f_mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f_ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let l_ls: Vec<f64> = f_ls.iter().map(|s| s + rng.random_range(-0.3..0.3)).collect();
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let follower = GaussianHead::new(f_mean.clone(), f_ls.clone()).expect("same dims");
    // scale a mean shift along `dir` so the total KL hits the target
    let var_part = kl_gaussian(&follower, &GaussianHead::new(f_mean.clone(), l_ls.clone()).unwrap()).unwrap();
    let quad: f64 = dir.iter().zip(&l_ls).map(|(d, s)| 0.5 * d * d * (-2.0 * s).exp()).sum();
    let k = ((target - var_part).max(0.0) / quad).sqrt();
    let l_mean: Vec<f64> = f_mean.iter().zip(&dir).map(|(m, d)| m + k * d).collect();
    (follower, GaussianHead::new(l_mean, l_ls).expect("same dims"))
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean return of episodes finished this iteration, per agent.
    pub agent_returns: Vec<Option<f64>>,
    pub leader_return: Option<f64>,
    pub mean_is_deviation: f64,
    pub ess: f64,
    pub ess_rate: f64,
    pub ess_samples: usize,
    pub approx_kl: f64,
    pub entropy: f64,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Relative path of this iteration's KL matrix CSV, when written.
    pub kl_matrix: Option<String>,
    pub disc_loss: Option<f64>,
    pub follower_index: Option<usize>,
    pub grad_norm: f64,
    pub clip_fraction: f64,
}

impl DiagnosticsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("record {}: {what}", self.iteration)));
        if self.ess_samples > 0 && !(self.ess > 0.0 && self.ess <= self.ess_samples as f64 * (1.0 + 1e-9)) {
            return bad("ess outside (0, samples]");
        }
        if self.ess_samples > 0 && !(self.ess_rate > 0.0 && self.ess_rate <= 1.0 + 1e-9) {
            return bad("ess_rate outside (0, 1]");
        }
        if self.mean_is_deviation.is_nan() || self.mean_is_deviation < 0.0 {
            return bad("negative IS deviation");
        }
        Ok(())
    }
}

/// Environment steps consumed once `iteration` (1-based) completes.
pub fn env_steps_at(iteration: u64, horizon: usize, num_envs: usize) -> u64 {
    iteration * (horizon as u64) * (num_envs as u64)
}

/// Append-only JSONL writer.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Replaces the file with `records` and keeps it open for appending
    /// (used when resuming from a checkpoint).
    pub fn rewrite(path: &Path, records: &[DiagnosticsRecord]) -> Result<Self> {
        let mut w = Self::create(path)?;
        for rec in records {
            w.emit(rec)?;
        }
        Ok(w)
    }

    pub fn emit(&mut self, record: &DiagnosticsRecord) -> Result<()> {
        let line = record.to_json_line()?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Metrics(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ess_hand_values() {
        assert_abs_diff_eq!(ess(&[0.7; 9]).unwrap(), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ess(&[0.0, 0.0, 3.0, 0.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ess(&[2.0, 1.0, 1.0]).unwrap(), 8.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(ess(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(ess(&[]).is_err());
        assert!(ess(&[1.0, -1.0]).is_err());
        let logs: Vec<f64> = [2.0f64, 1.0, 1.0].iter().map(|w| w.ln() + 800.0).collect();
        assert_abs_diff_eq!(ess_from_log(&logs).unwrap(), 8.0 / 3.0, epsilon = 1e-12);
        assert!(ess_from_log(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let w = IsWeights::new(vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.normalized(), vec![0.5, 0.25, 0.25]);
    }

    proptest! {
        #[test]
        fn ess_bounds_and_scale_invariance(w in prop::collection::vec(0.0f64..10.0, 1..50), k in 0.01f64..100.0) {
            prop_assume!(w.iter().any(|&x| x > 0.0));
            let e = ess(&w).unwrap();
            prop_assert!(e >= 1.0 - 1e-9 && e <= w.len() as f64 + 1e-9);
            let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
            prop_assert!((ess(&scaled).unwrap() - e).abs() < 1e-9 * e);
            let n: f64 = IsWeights::new(w.clone()).unwrap().normalized().iter().sum();
            prop_assert!((n - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn deviation_hand_values() {
        assert_eq!(mean_is_deviation(&[1.0; 4]), 0.0);
        assert_eq!(mean_is_deviation(&[0.5, 1.5]), 0.5);
        assert_eq!(mean_is_deviation(&[2.0]), 1.0);
        assert_eq!(mean_is_deviation(&[]), 0.0);
    }

    #[test]
    fn deviation_link_cases() {
        let r = verify_deviation_ess_link(&[1.0; 5]).unwrap();
        assert!(r.holds && r.estimate == 0.0 && r.bound == 0.0);
        assert_eq!(r.extra("ess"), Some(5.0));
        let r = verify_deviation_ess_link(&[0.5, 1.5]).unwrap();
        assert_abs_diff_eq!(r.estimate, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.bound, 0.5, epsilon = 1e-15);
        assert!(r.holds);
        let ratios = synthetic_shift_ratios(200_000, 0.3, 0);
        let r = verify_deviation_ess_link(&ratios).unwrap();
        assert!(r.holds, "{r}");
        assert!((r.extra("mean_ratio").unwrap() - 1.0).abs() < 0.01);
        assert!(verify_deviation_ess_link(&[]).is_err());
    }

    #[test]
    fn pinsker_cases() {
        let f = GaussianHead::new(vec![0.0], vec![0.0]).unwrap();
        let r = verify_pinsker(&f, &f, 1000, 0, Parallelism::Sequential).unwrap();
        assert!(r.holds && r.estimate == 0.0 && r.bound == 0.0);
        for (shift, bound) in [(0.5, 0.5), (2.0, 2.0)] {
            let l = GaussianHead::new(vec![shift], vec![0.0]).unwrap();
            let r = verify_pinsker(&f, &l, 200_000, 1, Parallelism::Sequential).unwrap();
            assert_abs_diff_eq!(r.bound, bound, epsilon = 1e-12);
            assert!(r.holds && r.estimate < bound, "{r}");
        }
        assert!(verify_pinsker(&f, &f, 0, 0, Parallelism::Sequential).is_err());
    }

    #[test]
    fn pinsker_strict_for_distinct_pairs() {
        for i in 0..100 {
            let (f, l) = random_gaussian_pair(11, i, 2, 4.0);
            let kl = kl_gaussian(&f, &l).unwrap();
            assert_kl_in_range(kl);
            let r = verify_pinsker(&f, &l, 20_000, i, Parallelism::Sequential).unwrap();
            assert!(r.estimate < r.bound, "pair {i}: {r}");
        }
    }

    fn assert_kl_in_range(kl: f64) {
        assert!(kl > 0.0 && kl <= 4.0 + 1e-9, "kl {kl}");
    }

    #[test]
    fn pinsker_parallel_matches_sequential() {
        let (f, l) = random_gaussian_pair(0, 0, 2, 2.0);
        let a = verify_pinsker(&f, &l, 150_000, 3, Parallelism::Sequential).unwrap();
        let b = verify_pinsker(&f, &l, 150_000, 3, Parallelism::Rayon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_bias_cases() {
        let none = ClipBatch {
            ratios: Array1::from(vec![1.0, 1.1, 0.9]),
            advantages: Array1::from(vec![1.0, -1.0, 0.5]),
            scores: Array2::from_elem((3, 2), 1.0),
        };
        let r = verify_clipping_bias(&none, 0.2).unwrap();
        assert_eq!((r.estimate, r.bound), (0.0, 0.0));
        assert!(r.holds);
        let one = ClipBatch {
            ratios: Array1::from(vec![1.5]),
            advantages: Array1::from(vec![2.0]),
            scores: Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap(),
        };
        let r = verify_clipping_bias(&one, 0.2).unwrap();
        // bias = 0.25 · 1.5² · 2² = 2.25; rhs = 0.25 · 1.5² · 4 = 2.25
        assert_abs_diff_eq!(r.estimate, 0.25 * 2.25 * 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.bound, 0.25 * 1.5f64.powi(2) * 4.0, epsilon = 1e-12);
        assert_eq!(r.extra("clipped_fraction"), Some(1.0));
        assert!(r.holds);
        let empty = ClipBatch {
            ratios: Array1::zeros(0),
            advantages: Array1::zeros(0),
            scores: Array2::zeros((0, 2)),
        };
        assert!(matches!(verify_clipping_bias(&empty, 0.2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn clipping_bias_synthetic() {
        let b = synthetic_clip_batch(10_000, 0, Parallelism::Sequential).unwrap();
        let r = verify_clipping_bias(&b, 0.2).unwrap();
        assert!(r.holds && r.estimate < r.bound, "{r}");
        let frac = r.extra("clipped_fraction").unwrap();
        assert!(frac > 0.1 && frac < 0.6, "{frac}");
    }

    #[test]
    fn score_vectors_match_difference_quotient() {
        let policy = PolicyNet::new(2, 1, &[3]);
        let mut params = policy.init(5);
        params.as_mut_slice()[policy.param_count() - 1] = 0.2;
        let s = ndarray::array![[0.3, -0.2], [0.9, 0.1]];
        let a = ndarray::array![[0.4], [-1.0]];
        let sc = score_vectors(&policy, &params, s.view(), a.view(), 0.5, Parallelism::Sequential).unwrap();
        let lp = |p: &PolicyParams, r: usize| {
            let h = policy.forward(p, s.row(r).as_slice().unwrap(), 0.5).unwrap();
            h.log_prob(a.row(r).as_slice().unwrap()).unwrap()
        };
        let h = 1e-6;
        for r in 0..2 {
            for k in 0..policy.param_count() {
                let mut up = params.clone();
                up.as_mut_slice()[k] += h;
                let mut dn = params.clone();
                dn.as_mut_slice()[k] -= h;
                let fd = (lp(&up, r) - lp(&dn, r)) / (2.0 * h);
                assert!(
                    (fd - sc[[r, k]]).abs() < 1e-6,
                    "row {r} param {k}: {fd} vs {}",
                    sc[[r, k]]
                );
            }
        }
    }

    #[test]
    fn record_round_trip_and_steps() {
        assert_eq!(env_steps_at(5, 8, 384), 15_360);
        let rec = DiagnosticsRecord {
            iteration: 5,
            env_steps: 15_360,
            agent_returns: vec![Some(1.25), None],
            leader_return: Some(1.25),
            mean_is_deviation: 0.1,
            ess: 300.5,
            ess_rate: 0.78,
            ess_samples: 384,
            approx_kl: 0.01,
            entropy: 2.8,
            lr: 5e-4,
            losses: LossBreakdown::empty(2),
            kl_matrix: Some("kl_0005.csv".into()),
            disc_loss: Some(0.69),
            follower_index: Some(1),
            grad_norm: 0.4,
            clip_fraction: 0.1,
        };
        rec.check().unwrap();
        let line = rec.to_json_line().unwrap();
        let back: DiagnosticsRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.emit(&rec).unwrap();
        w.emit(&rec).unwrap();
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), vec![rec.clone(), rec.clone()]);
        drop(MetricsWriter::rewrite(&path, std::slice::from_ref(&rec)).unwrap());
        assert_eq!(read_metrics(&path).unwrap(), vec![rec]);
    }
}
