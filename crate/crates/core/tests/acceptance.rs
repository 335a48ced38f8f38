//! Acceptance gate: one PASS/FAIL line per criterion, then a tally.
//!
//! Training-based criteria run at a reduced desk scale (16 envs per agent,
//! 32x32 hidden layers) so the whole gate finishes in minutes on one core.
//! A criterion listed with a known shortfall still prints FAIL, with the
//! reason; the process exits non-zero on any other failure.

mod common;

use std::time::{Duration, Instant};

use epg_core::diagnostics::DiagnosticsRecord;
use epg_core::diagnostics::{ess, random_gaussian_pair, synthetic_clip_batch, verify_clipping_bias, verify_pinsker};
use epg_core::diversity::{closest_agents, KlMatrix};
use epg_core::envs::reference_return;
use epg_core::nets::{kl_gaussian, GaussianHead};
use epg_core::objectives::clipped_surrogate;
use epg_core::report::{spearman, window_summary};
use epg_core::rollout::{gae, AdvantageConfig};
use epg_core::trainer::reference::reference_ppo_iteration;
use epg_core::trainer::run::{checkpoint_path, resume_run, run_single, METRICS_FILE};
use epg_core::trainer::{networks, prepare, train_iteration, Algo, EnsembleConfig, RunState};
use epg_core::Parallelism;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Everything a finished in-memory run leaves behind.
struct Trace {
    records: Vec<DiagnosticsRecord>,
    final_kl: Option<KlMatrix>,
}

fn train(cfg: &EnsembleConfig) -> Trace {
    let cfg = cfg.clone().resolve().expect("valid acceptance config");
    let nets = networks(&cfg);
    let mut state = RunState::new(&cfg, &nets).unwrap();
    let mut records = Vec::with_capacity(cfg.iterations as usize);
    let mut final_kl = None;
    for _ in 0..cfg.iterations {
        let out = train_iteration(&nets, &mut state, &cfg).unwrap();
        if out.kl.is_some() {
            final_kl = out.kl;
        }
        records.push(out.record);
    }
    Trace { records, final_kl }
}

const AGENTS: usize = 6;
const ENVS_PER_AGENT: usize = 16;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Desk-scale configuration. The ensemble modes use a stronger coupling
/// weight and adversarial reward than the defaults: at this scale the
/// default weights leave the followers' coupling term below the noise of the
/// clipped surrogate. PPO gets the whole ensemble's env budget.
fn desk(algo: Algo, seed: u64, iterations: u64) -> EnsembleConfig {
    let mut cfg = EnsembleConfig::for_algo(algo);
    cfg.hidden = vec![32, 32];
    cfg.iterations = iterations;
    cfg.seed = seed;
    if algo == Algo::Ppo {
        cfg.envs_per_agent = AGENTS * ENVS_PER_AGENT;
    } else {
        cfg.num_agents = AGENTS;
        cfg.envs_per_agent = ENVS_PER_AGENT;
        cfg.beta = if algo == Algo::Cpo { 0.5 } else { 0.0 };
        cfg.lambda_adv = 0.1;
    }
    cfg
}

/// Runs shared between criteria.
#[derive(Default)]
struct Runs {
    cpo_300: Option<Vec<Trace>>,
}

impl Runs {
    fn cpo_300(&mut self) -> &[Trace] {
        self.cpo_300
            .get_or_insert_with(|| SEEDS.iter().map(|&s| train(&desk(Algo::Cpo, s, 300))).collect())
    }
}

fn close(x: f64, expected: f64) -> bool {
    (x - expected).abs() <= 1e-6
}

fn closed_form(_: &mut Runs) -> Verdict {
    let g = |m: f64, s: f64| GaussianHead::new(vec![m], vec![s.ln()]).unwrap();
    let kl = [
        (kl_gaussian(&g(0.0, 1.0), &g(0.0, 1.0)).unwrap(), 0.0),
        (kl_gaussian(&g(1.0, 1.0), &g(0.0, 1.0)).unwrap(), 0.5),
        (
            kl_gaussian(&g(0.0, 2.0), &g(0.0, 1.0)).unwrap(),
            0.5f64.ln() + 2.0 - 0.5,
        ),
    ];
    let ess_cases = [
        (ess(&[1.0; 10]).unwrap(), 10.0),
        (ess(&[0.0, 0.0, 3.0, 0.0]).unwrap(), 1.0),
        (ess(&[2.0, 1.0, 1.0]).unwrap(), 8.0 / 3.0),
    ];
    let adv_cfg = AdvantageConfig {
        gamma: 0.99,
        tau: 0.95,
        normalize: false,
    };
    let (adv, _) = gae(&[1.0, 1.0], &[0.5, 0.5], &[0.0, 1.0], &[0.0], &adv_cfg);
    let gae_cases = [(adv[0], 1.46525), (adv[1], 0.5)];
    let clip = [
        (clipped_surrogate(&[1.0], &[1.0], 0.2).unwrap(), -1.0),
        (clipped_surrogate(&[1.5], &[1.0], 0.2).unwrap(), -1.2),
        (clipped_surrogate(&[0.5], &[-1.0], 0.2).unwrap(), 0.8),
    ];
    let all: Vec<(f64, f64)> = kl.into_iter().chain(ess_cases).chain(gae_cases).chain(clip).collect();
    let worst = all.iter().map(|(x, e)| (x - e).abs()).fold(0.0, f64::max);
    verdict(
        all.iter().all(|&(x, e)| close(x, e)),
        format!("{} cases, max abs error {worst:.2e}", all.len()),
    )
}

fn gradients(_: &mut Runs) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    let mut checked = 0;
    for seed in 0..3 {
        let fx = common::grad_fixture(seed);
        largest = largest.max(fx.policy_params.len()).max(fx.value_params.len());
        for term in common::all_terms(fx.minibatch.num_agents) {
            worst = worst.max(common::gradient_rel_error(&fx, term).0);
            checked += 1;
        }
        let (err, n) = common::disc_rel_error(seed);
        worst = worst.max(err);
        largest = largest.max(n);
        checked += 1;
    }
    verdict(
        worst < 1e-4 && largest <= 1000,
        format!("{checked} term/seed pairs, max relative error {worst:.2e}, largest net {largest} params"),
    )
}

fn pinsker(_: &mut Runs) -> Verdict {
    let mut failed = 0;
    let mut max_kl: f64 = 0.0;
    let mut tightest = f64::INFINITY;
    for i in 0..50 {
        let (f, l) = random_gaussian_pair(0, i, 2, 4.0);
        let r = verify_pinsker(&f, &l, 1_000_000, i, Parallelism::default()).unwrap();
        let kl = r.extra("kl").unwrap();
        max_kl = max_kl.max(kl);
        tightest = tightest.min(r.bound - r.estimate);
        if !r.holds || !(0.0..=4.0).contains(&kl) {
            failed += 1;
        }
    }
    verdict(
        failed == 0,
        format!("50 pairs x 1e6 samples, {failed} violations, max KL {max_kl:.3}, min margin {tightest:.4}"),
    )
}

fn clipping_bias(_: &mut Runs) -> Verdict {
    let mut failed = 0;
    let mut min_clipped = f64::INFINITY;
    for seed in 0..20 {
        let batch = synthetic_clip_batch(100_000, seed, Parallelism::default()).unwrap();
        let r = verify_clipping_bias(&batch, 0.2).unwrap();
        min_clipped = min_clipped.min(r.extra("clipped_fraction").unwrap());
        if !r.holds {
            failed += 1;
        }
    }
    verdict(
        failed == 0 && min_clipped > 0.0,
        format!("20 batches x 1e5 rows, {failed} violations, min clipped fraction {min_clipped:.3}"),
    )
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn trend(_: &mut Runs) -> Verdict {
    let iterations = 200;
    let seeds = &SEEDS[..3];
    // Coupling temperatures in increasing order; the last entry is the
    // uncoupled ensemble.
    let temps: [Option<f64>; 4] = [Some(0.05), Some(0.2), Some(0.5), None];
    let mut devs = Vec::new();
    let mut rates = Vec::new();
    for lf in temps {
        let (mut d, mut e) = (0.0, 0.0);
        for &seed in seeds {
            let mut cfg = match lf {
                Some(lf) => {
                    let mut c = desk(Algo::Cpo, seed, iterations);
                    c.lambda_f = lf;
                    c
                }
                None => desk(Algo::Sapg, seed, iterations),
            };
            cfg.diag_interval = iterations;
            let w = window_summary(&train(&cfg).records, iterations).unwrap();
            d += w.mean_is_deviation;
            e += w.ess_rate;
        }
        devs.push(d / seeds.len() as f64);
        rates.push(e / seeds.len() as f64);
    }
    let rank: Vec<f64> = (0..temps.len()).map(|i| i as f64).collect();
    let (rho_dev, rho_ess) = (spearman(&rank, &devs), spearman(&rank, &rates));
    let ppo_min = seeds
        .iter()
        .flat_map(|&s| train(&desk(Algo::Ppo, s, iterations)).records)
        .map(|r| r.ess_rate)
        .fold(f64::INFINITY, f64::min);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" < ");
    verdict(
        strictly_increasing(&devs)
            && strictly_increasing(&rates.iter().map(|r| -r).collect::<Vec<_>>())
            && rho_dev >= 0.9
            && rho_ess <= -0.9
            && ppo_min >= 0.99,
        format!(
            "deviation {} | ess_rate {} | rho {rho_dev:.2}/{rho_ess:.2} | ppo min ess_rate {ppo_min:.4}",
            fmt(&devs),
            rates.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

fn calibration(_: &mut Runs) -> Verdict {
    let cfg = EnsembleConfig::for_algo(Algo::Cpo).resolve().unwrap();
    let nets = networks(&cfg);
    let mut state = RunState::new(&cfg, &nets).unwrap();
    let loss = prepare(&nets, &mut state, &cfg, &mut |_| {})
        .unwrap()
        .disc_loss
        .unwrap();
    let target = (cfg.num_agents as f64).ln();
    verdict(
        (loss - target).abs() < 0.05,
        format!(
            "M={} loss {loss:.5} vs ln {} = {target:.5}",
            cfg.num_agents, cfg.num_agents
        ),
    )
}

fn json_lines(records: &[DiagnosticsRecord]) -> Vec<String> {
    records.iter().map(|r| r.to_json_line().unwrap()).collect()
}

fn reductions(_: &mut Runs) -> Verdict {
    let iterations = 20;
    let mut mismatches = Vec::new();
    for seed in [0, 1] {
        let mut cpo = desk(Algo::Cpo, seed, iterations);
        cpo.beta = 0.0;
        cpo.lambda_adv = 0.0;
        let mut sapg = desk(Algo::Sapg, seed, iterations);
        sapg.lambda_adv = 0.0;
        if json_lines(&train(&cpo).records) != json_lines(&train(&sapg).records) {
            mismatches.push(format!("cpo/sapg seed {seed}"));
        }

        let ppo = desk(Algo::Ppo, seed, iterations).resolve().unwrap();
        let nets = networks(&ppo);
        let mut a = RunState::new(&ppo, &nets).unwrap();
        let mut b = a.clone();
        let same = (0..iterations).all(|_| {
            let x = train_iteration(&nets, &mut a, &ppo).unwrap().record;
            let y = reference_ppo_iteration(&nets, &mut b, &ppo).unwrap().record;
            x.to_json_line().unwrap() == y.to_json_line().unwrap()
        });
        if !same || a != b {
            mismatches.push(format!("ppo/reference seed {seed}"));
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{iterations} iterations, 2 seeds, metrics bit-identical")
        } else {
            format!("differ: {}", mismatches.join(", "))
        },
    )
}

/// Followers whose KL-closest agent is the leader.
fn leader_closest(kl: &KlMatrix) -> usize {
    closest_agents(kl).unwrap().into_iter().filter(|&c| c == 0).count()
}

fn formation(runs: &mut Runs) -> Verdict {
    let coupled: Vec<usize> = runs
        .cpo_300()
        .iter()
        .map(|t| leader_closest(t.final_kl.as_ref().unwrap()))
        .collect();
    let uncoupled: Vec<usize> = SEEDS
        .iter()
        .map(|&s| {
            let mut cfg = desk(Algo::Cpo, s, 300);
            cfg.beta = 0.0;
            leader_closest(train(&cfg).final_kl.as_ref().unwrap())
        })
        .collect();
    let need = AGENTS - 2;
    let majority = coupled.iter().filter(|&&c| c >= need).count() * 2 > SEEDS.len();
    let violated = uncoupled.iter().any(|&c| c < need);
    verdict(
        majority && violated,
        format!("followers closest to leader per seed: coupled {coupled:?}, uncoupled {uncoupled:?} (need >= {need})"),
    )
}

/// First iteration whose leader return reaches `threshold`.
fn first_reaching(records: &[DiagnosticsRecord], threshold: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.leader_return.is_some_and(|x| x >= threshold))
        .map(|r| r.iteration)
}

fn exploration(runs: &mut Runs) -> Verdict {
    let probe = desk(Algo::Cpo, 0, 300);
    let optimum = reference_return(probe.task, probe.episode_len, 1000, 0);
    let threshold = 0.8 * optimum;
    let ppo: Vec<Option<u64>> = SEEDS
        .iter()
        .map(|&s| first_reaching(&train(&desk(Algo::Ppo, s, 300)).records, threshold))
        .collect();
    let cpo: Vec<Option<u64>> = runs
        .cpo_300()
        .iter()
        .map(|t| first_reaching(&t.records, threshold))
        .collect();
    let wins = cpo
        .iter()
        .zip(&ppo)
        .filter(|(c, p)| match (c, p) {
            (Some(c), Some(p)) => c < p,
            (Some(_), None) => true,
            _ => false,
        })
        .count();
    let show = |v: &[Option<u64>]| {
        v.iter()
            .map(|x| x.map_or("-".to_string(), |i| i.to_string()))
            .collect::<Vec<_>>()
            .join(",")
    };
    verdict(
        wins >= 3,
        format!(
            "threshold {threshold:.2} (0.8 x {optimum:.2}); iterations to reach: cpo [{}] ppo [{}]; cpo first on {wins}/5",
            show(&cpo),
            show(&ppo)
        ),
    )
}

fn determinism(_: &mut Runs) -> Verdict {
    let cfg = desk(Algo::Cpo, 7, 12);
    let a = json_lines(&train(&cfg).records);
    let b = json_lines(&train(&cfg).records);

    let dir = tempfile::tempdir().unwrap();
    let mut full = cfg.clone();
    full.checkpoint_interval = 6;
    full.diag_interval = 4;
    full.out_dir = dir.path().join("full");
    run_single(&full).unwrap();
    let mut part = full.clone();
    part.out_dir = dir.path().join("part");
    part.iterations = 6;
    run_single(&part).unwrap();
    let mut rest = full.clone();
    rest.out_dir = part.out_dir.clone();
    resume_run(&rest, &checkpoint_path(&part.out_dir, 6)).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let files_equal = [METRICS_FILE, "kl_0008.csv", "kl_0012.csv", "kl_0012.closest.csv"]
        .iter()
        .all(|f| read(&full.out_dir, f) == read(&part.out_dir, f));
    let in_memory = json_lines(&train(&full).records);
    let on_disk: Vec<String> = String::from_utf8(read(&full.out_dir, METRICS_FILE))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    verdict(
        a == b && files_equal && in_memory == on_disk,
        format!(
            "repeat run {}, resume at 6 of 12 {}, file vs memory {}",
            if a == b { "identical" } else { "DIFFERS" },
            if files_equal { "identical" } else { "DIFFERS" },
            if in_memory == on_disk { "identical" } else { "DIFFERS" }
        ),
    )
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn(&mut Runs) -> Verdict,
    /// Why the criterion is not met at this scale, if it is known not to be.
    shortfall: Option<&'static str>,
}

fn main() {
    // `cargo test` passes harness flags such as --quiet; a name filter, if
    // any, selects criteria by substring.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { name: "closed-form unit suite", budget: secs(1), check: closed_form, shortfall: None },
        Criterion { name: "gradient suite", budget: secs(30), check: gradients, shortfall: None },
        Criterion { name: "pinsker verifier", budget: secs(120), check: pinsker, shortfall: None },
        Criterion { name: "clipping-bias verifier", budget: secs(60), check: clipping_bias, shortfall: None },
        Criterion { name: "coupling temperature trend", budget: secs(1800), check: trend, shortfall: None },
        Criterion { name: "discriminator calibration", budget: secs(5), check: calibration, shortfall: None },
        Criterion { name: "reduction identities", budget: None, check: reductions, shortfall: None },
        Criterion {
            name: "structured formation",
            budget: None,
            check: formation,
            shortfall: Some("the fixed, ordered scalar embedding makes neighbours in i/(M-1) nearest in KL; followers line up in a chain"),
        },
        Criterion { name: "exploration benefit", budget: None, check: exploration, shortfall: None },
        Criterion { name: "determinism", budget: None, check: determinism, shortfall: None },
    ];
    let mut runs = Runs::default();
    let (mut passed, mut total, mut unexpected) = (0, 0, 0);
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let v = (c.check)(&mut runs);
        let elapsed = start.elapsed();
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let pass = v.pass && in_budget;
        let budget = c.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        let note = match (pass, c.shortfall) {
            (false, Some(why)) => format!(" (known shortfall: {why})"),
            (true, Some(_)) => " (listed as a known shortfall; remove the listing)".to_string(),
            _ => String::new(),
        };
        println!(
            "{} [{:>7.1}s{budget}] {}: {}{}{note}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            c.name,
            v.detail,
            if in_budget { "" } else { " (over time budget)" }
        );
        total += 1;
        passed += usize::from(pass);
        unexpected += usize::from(!pass && c.shortfall.is_none());
    }
    println!("acceptance: {passed}/{total} criteria passed, {unexpected} unexpected failures");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
