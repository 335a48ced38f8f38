//! Agent-identity discriminator, the adversarial diversity reward, and the
//! pairwise KL matrix between agent heads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_row_chunks, Parallelism};
use crate::nets::{
    kl_rows, log_softmax_at, phi, quantize, softmax, with_phi, DiscNet, DiscParams, GradientVector, PolicyNet,
    PolicyParams,
};
use crate::optim::Adam;
use crate::rng::{stream, Purpose};

/// Floor applied to D(y|s,a) before taking the log.
pub const PROB_FLOOR: f64 = 1e-8;
/// Probe states per KL estimate.
pub const DEFAULT_PROBES: usize = 1024;

/// Labelled discriminator data: rows of `[state, action]` and agent ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl DiscBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, net: &DiscNet) -> Result<()> {
        if self.inputs.nrows() != self.labels.len() {
            return Err(Error::Contract(
                "discriminator inputs and labels differ in length".into(),
            ));
        }
        if self.inputs.ncols() != net.mlp().input_dim() {
            return Err(Error::Contract(format!(
                "discriminator expects {} input columns, got {}",
                net.mlp().input_dim(),
                self.inputs.ncols()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= net.num_agents()) {
            return Err(Error::Contract(format!(
                "agent label {y} out of range for M={}",
                net.num_agents()
            )));
        }
        Ok(())
    }
}

/// Cross-entropy loss and logits-gradient for one chunk of rows.
fn ce_chunk(logits: ArrayView2<'_, f64>, labels: &[usize], scale: f64) -> Result<(Array2<f64>, f64)> {
    let mut d = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, row) in logits.outer_iter().enumerate() {
        let row = row.as_slice().unwrap();
        if let Some(bad) = row.iter().find(|l| !l.is_finite()) {
            return Err(Error::numerical("discriminator logits", format!("{bad} at row {r}")));
        }
        let y = labels[r];
        loss -= log_softmax_at(row, y);
        for (k, p) in softmax(row).into_iter().enumerate() {
            d[[r, k]] = scale * (p - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok((d, loss * scale))
}

/// Mean cross-entropy `−mean log D(y|s,a)` and its gradient on `batch`.
pub fn disc_loss_and_grad(
    net: &DiscNet,
    params: &DiscParams,
    batch: &DiscBatch,
    par: Parallelism,
) -> Result<(f64, GradientVector)> {
    batch.check(net)?;
    if batch.is_empty() {
        return Err(Error::Degenerate("empty discriminator batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let (grad, sides) = net.mlp().forward_backward_with(
        params.as_slice(),
        batch.inputs.view(),
        par,
        |range, logits| match ce_chunk(logits, &batch.labels[range], scale) {
            Ok((d, l)) => (d, Ok(l)),
            Err(e) => (Array2::zeros(logits.raw_dim()), Err(e)),
        },
    );
    let mut loss = 0.0;
    for s in sides {
        loss += s?;
    }
    Ok((loss, GradientVector(grad)))
}

/// Mean cross-entropy without gradients.
pub fn disc_loss(net: &DiscNet, params: &DiscParams, batch: &DiscBatch, par: Parallelism) -> Result<f64> {
    batch.check(net)?;
    if batch.is_empty() {
        return Err(Error::Degenerate("empty discriminator batch".into()));
    }
    let logits = net.logits(params, batch.inputs.view(), par);
    Ok(ce_chunk(logits.view(), &batch.labels, 1.0 / batch.len() as f64)?.1)
}

/// Settings for one discriminator pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscUpdate {
    pub lr: f64,
    pub minibatch: usize,
    pub grad_norm: f64,
}

/// One shuffled pass of minibatch cross-entropy descent. Returns the mean
/// minibatch loss (each evaluated before its own step).
#[allow(clippy::too_many_arguments)]
pub fn disc_update(
    net: &DiscNet,
    params: &mut DiscParams,
    adam: &mut Adam,
    batch: &DiscBatch,
    settings: DiscUpdate,
    seed: u64,
    iteration: u64,
    par: Parallelism,
) -> Result<f64> {
    batch.check(net)?;
    if batch.is_empty() || settings.minibatch == 0 {
        return Err(Error::Degenerate(
            "discriminator update needs rows and a positive minibatch".into(),
        ));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::DiscShuffle, &[iteration]));
    let mut total = 0.0;
    let mut weight = 0.0;
    for idx in order.chunks(settings.minibatch) {
        let mb = DiscBatch {
            inputs: batch.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| batch.labels[i]).collect(),
        };
        let (loss, mut grad) = disc_loss_and_grad(net, params, &mb, par)?;
        grad.clip_norm(settings.grad_norm);
        adam.step(params.as_mut_slice(), grad.as_slice(), settings.lr);
        quantize(params.as_mut_slice());
        total += loss * idx.len() as f64;
        weight += idx.len() as f64;
    }
    Ok(total / weight)
}

/// `λ_adv · log max(p, 1e-8)`
pub fn adversarial_reward_from_prob(prob: f64, lambda_adv: f64) -> f64 {
    if lambda_adv == 0.0 {
        return 0.0;
    }
    lambda_adv * prob.max(PROB_FLOOR).ln()
}

/// `λ_adv · log D(y|s,a)` for every row of `batch`.
pub fn adversarial_reward(
    net: &DiscNet,
    params: &DiscParams,
    batch: &DiscBatch,
    lambda_adv: f64,
    par: Parallelism,
) -> Result<Array1<f64>> {
    batch.check(net)?;
    if lambda_adv == 0.0 {
        return Ok(Array1::zeros(batch.len()));
    }
    let logits = net.logits(params, batch.inputs.view(), par);
    let floor = PROB_FLOOR.ln();
    let mut out = Array1::zeros(batch.len());
    for (r, row) in logits.outer_iter().enumerate() {
        let row = row.as_slice().unwrap();
        if row.iter().any(|l| !l.is_finite()) {
            return Err(Error::numerical(
                "discriminator logits",
                format!("non-finite at row {r}"),
            ));
        }
        out[r] = lambda_adv * log_softmax_at(row, batch.labels[r]).max(floor);
    }
    Ok(out)
}

/// Forward-KL matrix between agent heads: row `i`, column `j` holds the mean
/// over probes of KL(head_i ‖ head_j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub values: Vec<Vec<f64>>,
}

impl KlMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Builds the matrix from per-agent means (`K × action_dim` each) and the
    /// shared log-std.
    pub fn from_means(means: &[Array2<f64>], log_std: &[f64]) -> Self {
        let m = means.len();
        let mut values = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let k = means[i].nrows();
                let sum: f64 = (0..k)
                    .map(|r| {
                        kl_rows(
                            means[i].row(r).as_slice().unwrap(),
                            log_std,
                            means[j].row(r).as_slice().unwrap(),
                            log_std,
                        )
                    })
                    .sum();
                values[i][j] = if k == 0 { 0.0 } else { sum / k as f64 };
            }
        }
        Self { values }
    }

    pub fn to_csv(&self) -> String {
        let m = self.size();
        let mut out = (0..m).map(|i| format!("agent_{i}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty KL csv".into()))?;
        let m = header.split(',').count();
        let mut values = Vec::with_capacity(m);
        for (r, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Format(format!("KL csv row {r}: {e}")))?;
            if row.len() != m {
                return Err(Error::Format(format!(
                    "KL csv row {r} has {} cells, expected {m}",
                    row.len()
                )));
            }
            values.push(row);
        }
        if values.len() != m {
            return Err(Error::Format(format!(
                "KL csv has {} rows for {m} columns",
                values.len()
            )));
        }
        Ok(Self { values })
    }
}

/// Nearest agent by row-KL for every follower (rows 1..M), self excluded.
/// Ties go to the leader, then to the lowest index.
pub fn closest_agents(kl: &KlMatrix) -> Result<Vec<usize>> {
    let m = kl.size();
    if m < 2 {
        return Err(Error::Degenerate("closest agents need at least two agents".into()));
    }
    Ok((1..m)
        .map(|i| {
            let mut best = usize::MAX;
            for j in (0..m).filter(|&j| j != i) {
                // strict comparison keeps the earliest (leader first) on ties
                if best == usize::MAX || kl.values[i][j] < kl.values[i][best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn closest_to_csv(closest: &[usize]) -> String {
    let header: Vec<String> = (1..=closest.len()).map(|i| format!("agent_{i}")).collect();
    let row: Vec<String> = closest.iter().map(|c| c.to_string()).collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}

pub fn closest_from_csv(text: &str) -> Result<Vec<usize>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty closest-agent csv".into()))?;
    let row = lines
        .next()
        .ok_or_else(|| Error::Format("closest-agent csv has no data row".into()))?;
    let out: Vec<usize> = row
        .split(',')
        .map(|c| c.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Format(format!("closest-agent csv: {e}")))?;
    if out.len() != header.split(',').count() {
        return Err(Error::Format("closest-agent csv header/row width mismatch".into()));
    }
    Ok(out)
}

/// `kl_0042.csv` style name for an iteration's matrix.
pub fn kl_file_name(iteration: u64) -> String {
    format!("kl_{iteration:04}.csv")
}

/// Sidecar holding the closest-agent indices for a matrix file.
pub fn closest_file_name(iteration: u64) -> String {
    format!("kl_{iteration:04}.closest.csv")
}

/// Writes the matrix and its sidecar; returns both paths.
pub fn write_kl(dir: &Path, iteration: u64, kl: &KlMatrix) -> Result<(PathBuf, PathBuf)> {
    let mat = dir.join(kl_file_name(iteration));
    let side = dir.join(closest_file_name(iteration));
    std::fs::write(&mat, kl.to_csv()).map_err(|e| Error::io(&mat, e))?;
    let closest = if kl.size() >= 2 {
        closest_agents(kl)?
    } else {
        Vec::new()
    };
    std::fs::write(&side, closest_to_csv(&closest)).map_err(|e| Error::io(&side, e))?;
    Ok((mat, side))
}

/// Draws `k` probe states uniformly (with replacement) from `pooled`.
pub fn sample_probes(pooled: ArrayView2<'_, f64>, k: usize, seed: u64, iteration: u64) -> Result<Array2<f64>> {
    if pooled.nrows() == 0 || k == 0 {
        return Err(Error::Degenerate("probe sampling needs states and k ≥ 1".into()));
    }
    let mut rng = stream(seed, Purpose::Probe, &[iteration]);
    let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..pooled.nrows())).collect();
    Ok(pooled.select(Axis(0), &idx))
}

/// KL matrix of all `num_agents` heads of the shared policy at `probes`.
pub fn pairwise_kl(
    policy: &PolicyNet,
    params: &PolicyParams,
    probes: ArrayView2<'_, f64>,
    num_agents: usize,
    par: Parallelism,
) -> Result<KlMatrix> {
    policy.check(params)?;
    if probes.nrows() == 0 {
        return Err(Error::Degenerate("pairwise KL needs at least one probe state".into()));
    }
    let means: Vec<Array2<f64>> = (0..num_agents)
        .map(|i| policy.means(params, with_phi(probes, phi(i, num_agents)).view(), par))
        .collect();
    let log_std = policy.log_std(params);
    // chunk over probes for large K; same summation order either way
    let m = num_agents;
    let partials = map_row_chunks(par, probes.nrows(), |r| {
        let sub: Vec<Array2<f64>> = means
            .iter()
            .map(|a| a.slice(ndarray::s![r.clone(), ..]).to_owned())
            .collect();
        let kl = KlMatrix::from_means(&sub, log_std);
        (kl, r.len())
    });
    let mut values = vec![vec![0.0; m]; m];
    for (kl, n) in partials {
        for i in 0..m {
            for j in 0..m {
                values[i][j] += kl.values[i][j] * n as f64;
            }
        }
    }
    let k = probes.nrows() as f64;
    for (i, row) in values.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 0.0 } else { *v / k };
        }
    }
    Ok(KlMatrix { values })
}

/// Human-readable matrix rendering for logs.
pub fn format_matrix(kl: &KlMatrix) -> String {
    let mut s = String::new();
    for row in &kl.values {
        for v in row {
            let _ = write!(s, "{v:>10.4} ");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn balanced(m: usize, per: usize, sd: usize, ad: usize) -> DiscBatch {
        let n = m * per;
        let mut rng = stream(7, Purpose::Synthetic, &[0]);
        let inputs = Array2::from_shape_fn((n, sd + ad), |_| rng.random_range(-1.0..1.0));
        DiscBatch {
            inputs,
            labels: (0..n).map(|r| r % m).collect(),
        }
    }

    #[test]
    fn untrained_loss_near_ln_m() {
        for (m, expect) in [(6usize, 6f64.ln()), (2, 2f64.ln())] {
            let net = DiscNet::new(4, 2, m, &[64, 64]);
            let p = net.init(0);
            let loss = disc_loss(&net, &p, &balanced(m, 64, 4, 2), Parallelism::Sequential).unwrap();
            assert!((loss - expect).abs() < 0.05, "M={m}: {loss} vs {expect}");
        }
        let net = DiscNet::new(4, 2, 6, &[8]);
        let zero = DiscParams(vec![0.0; net.param_count()]);
        let loss = disc_loss(&net, &zero, &balanced(6, 4, 4, 2), Parallelism::Sequential).unwrap();
        assert_abs_diff_eq!(loss, 1.791_759_469_228_055, epsilon = 1e-12);
    }

    #[test]
    fn separable_clusters_are_learned() {
        let m = 3;
        let net = DiscNet::new(2, 1, m, &[16]);
        let mut p = net.init(1);
        let mut adam = Adam::new(net.param_count());
        let n = 300;
        let inputs = Array2::from_shape_fn((n, 3), |(r, c)| {
            let y = (r % m) as f64;
            if c == 0 {
                2.0 * y - 2.0
            } else {
                0.05 * ((r * 7 + c) % 5) as f64
            }
        });
        let batch = DiscBatch {
            inputs,
            labels: (0..n).map(|r| r % m).collect(),
        };
        let s = DiscUpdate {
            lr: 1e-2,
            minibatch: 64,
            grad_norm: 1.0,
        };
        let first = disc_update(&net, &mut p, &mut adam, &batch, s, 0, 0, Parallelism::Sequential).unwrap();
        for it in 1..150 {
            disc_update(&net, &mut p, &mut adam, &batch, s, 0, it, Parallelism::Sequential).unwrap();
        }
        let last = disc_loss(&net, &p, &batch, Parallelism::Sequential).unwrap();
        assert!(first > 0.8 && last < 0.05, "{first} -> {last}");
        let r = adversarial_reward(&net, &p, &batch, 0.01, Parallelism::Sequential).unwrap();
        assert!(r.iter().all(|&x| x <= 0.0));
        assert!(r.mean().unwrap() > -0.001);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = DiscNet::new(2, 1, 3, &[5]);
        let mut p = net.init(3);
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v += 0.1 * ((i as f64) * 0.7).sin();
        }
        let batch = balanced(3, 5, 2, 1);
        let (_, g) = disc_loss_and_grad(&net, &p, &batch, Parallelism::Sequential).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut a = p.clone();
            a.as_mut_slice()[k] += h;
            let mut b = p.clone();
            b.as_mut_slice()[k] -= h;
            let fd = (disc_loss(&net, &a, &batch, Parallelism::Sequential).unwrap()
                - disc_loss(&net, &b, &batch, Parallelism::Sequential).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g.0[k]).abs() < 1e-7 + 1e-5 * fd.abs(),
                "param {k}: {fd} vs {}",
                g.0[k]
            );
        }
    }

    #[test]
    fn reward_hand_values() {
        assert_eq!(adversarial_reward_from_prob(1.0, 0.01), 0.0);
        assert_abs_diff_eq!(
            adversarial_reward_from_prob(1.0 / 6.0, 0.01),
            -0.017_917_594_692_280_55,
            epsilon = 1e-12
        );
        assert_eq!(adversarial_reward_from_prob(0.3, 0.0), 0.0);
        assert_abs_diff_eq!(adversarial_reward_from_prob(0.0, 1.0), PROB_FLOOR.ln(), epsilon = 1e-12);
        let net = DiscNet::new(4, 2, 6, &[8]);
        let zero = DiscParams(vec![0.0; net.param_count()]);
        let r = adversarial_reward(&net, &zero, &balanced(6, 2, 4, 2), 0.01, Parallelism::Sequential).unwrap();
        for x in r {
            assert_abs_diff_eq!(x, 0.01 * (1.0f64 / 6.0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_labels_and_logits_error() {
        let net = DiscNet::new(4, 2, 2, &[4]);
        let p = net.init(0);
        let mut b = balanced(2, 2, 4, 2);
        b.labels[0] = 5;
        assert!(matches!(
            disc_loss(&net, &p, &b, Parallelism::Sequential),
            Err(Error::Contract(_))
        ));
        let nan = DiscParams(vec![f64::NAN; net.param_count()]);
        let b = balanced(2, 2, 4, 2);
        assert!(matches!(
            disc_loss(&net, &nan, &b, Parallelism::Sequential),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn kl_matrix_mean_shift() {
        let k = 5;
        let a = Array2::zeros((k, 1));
        let b = Array2::from_elem((k, 1), 1.0);
        let kl = KlMatrix::from_means(&[a.clone(), b], &[0.0]);
        assert_eq!(kl.get(0, 0), 0.0);
        assert_eq!(kl.get(1, 1), 0.0);
        assert_abs_diff_eq!(kl.get(0, 1), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(kl.get(1, 0), 0.5, epsilon = 1e-15);
        let same = KlMatrix::from_means(&[a.clone(), a.clone(), a], &[0.3]);
        assert!(same.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_kl_identical_heads_is_zero() {
        let net = PolicyNet::new(4, 2, &[8]);
        let p = PolicyParams(vec![0.0; net.param_count()]);
        let probes = Array2::from_elem((10, 4), 0.3);
        let kl = pairwise_kl(&net, &p, probes.view(), 4, Parallelism::Sequential).unwrap();
        assert!(kl.values.iter().flatten().all(|&v| v == 0.0));
        let p = net.init(0);
        let kl = pairwise_kl(&net, &p, probes.view(), 4, Parallelism::Sequential).unwrap();
        assert!((0..4).all(|i| kl.get(i, i) == 0.0));
        assert!(kl.values.iter().flatten().all(|&v| v >= 0.0));
        assert!(kl.get(0, 3) > 0.0);
    }

    #[test]
    fn closest_agent_rules() {
        let kl = KlMatrix {
            values: vec![vec![0.0, 1.0, 2.0], vec![0.3, 0.0, 0.2], vec![0.4, 0.1, 0.0]],
        };
        assert_eq!(closest_agents(&kl).unwrap(), vec![2, 1]);
        let zero = KlMatrix {
            values: vec![vec![0.0; 4]; 4],
        };
        assert_eq!(closest_agents(&zero).unwrap(), vec![0, 0, 0]);
        let tie = KlMatrix {
            values: vec![vec![0.0, 1.0, 1.0], vec![0.5, 0.0, 0.5], vec![0.7, 0.2, 0.0]],
        };
        assert_eq!(closest_agents(&tie).unwrap(), vec![0, 1]);
        let tie_followers = KlMatrix {
            values: vec![vec![0.0; 4], vec![0.9, 0.0, 0.1, 0.1], vec![0.0; 4], vec![0.0; 4]],
        };
        assert_eq!(closest_agents(&tie_followers).unwrap()[0], 2);
        assert!(closest_agents(&KlMatrix {
            values: vec![vec![0.0]]
        })
        .is_err());
    }

    #[test]
    fn csv_round_trip() {
        let kl = KlMatrix {
            values: vec![
                vec![0.0, 0.1234567890123, 2.0],
                vec![1e-17, 0.0, 0.2],
                vec![0.4, 3.5, 0.0],
            ],
        };
        let text = kl.to_csv();
        assert!(text.starts_with("agent_0,agent_1,agent_2\n"));
        assert_eq!(KlMatrix::from_csv(&text).unwrap(), kl);
        assert!(KlMatrix::from_csv("agent_0,agent_1\n0,1\n").is_err());
        let c = closest_agents(&kl).unwrap();
        let side = closest_to_csv(&c);
        assert_eq!(side, "agent_1,agent_2\n0,0\n");
        assert_eq!(closest_from_csv(&side).unwrap(), c);
        assert_eq!(kl_file_name(7), "kl_0007.csv");
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = write_kl(dir.path(), 12, &kl).unwrap();
        assert_eq!(KlMatrix::from_csv(&std::fs::read_to_string(m).unwrap()).unwrap(), kl);
        assert_eq!(closest_from_csv(&std::fs::read_to_string(s).unwrap()).unwrap(), c);
    }

    #[test]
    fn probes_are_seeded_rows_of_pool() {
        let pool = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let a = sample_probes(pool.view(), 50, 1, 2).unwrap();
        assert_eq!(a, sample_probes(pool.view(), 50, 1, 2).unwrap());
        assert_ne!(a, sample_probes(pool.view(), 50, 1, 3).unwrap());
        assert!(a.outer_iter().all(|r| pool.outer_iter().any(|p| p == r)));
        assert!(sample_probes(pool.view(), 0, 1, 2).is_err());
    }
}
