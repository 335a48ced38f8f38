use anyhow::Result;
use clap::{Args, ValueEnum};
use epg_core::diagnostics::{
    random_gaussian_pair, synthetic_clip_batch, synthetic_shift_ratios, verify_clipping_bias,
    verify_deviation_ess_link, verify_pinsker, BoundReport,
};
use epg_core::{Error, Parallelism};

use crate::Violated;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Prop {
    /// Mean IS deviation against the ratio spread, with ESS.
    #[value(name = "1")]
    One,
    /// Clipped-branch gradient bias against its IS-deviation bound.
    #[value(name = "2")]
    Two,
    /// Pinsker: mean IS deviation against sqrt(2 KL).
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    /// Every ratio equal to 1 (ESS equals the sample count).
    Uniform,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    prop: Prop,
    /// Samples per check (ratios, batch rows, or Monte-Carlo draws).
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random Gaussian pairs for the Pinsker check.
    #[arg(long, default_value_t = 50)]
    pairs: u64,
    /// Largest KL of a random pair.
    #[arg(long, default_value_t = 4.0)]
    max_kl: f64,
    /// Seeded synthetic batches for the clipping-bias check.
    #[arg(long, default_value_t = 20)]
    batches: u64,
    /// Clip range of the clipping-bias check.
    #[arg(long, default_value_t = 0.2)]
    clip_eps: f64,
    /// Replace the synthetic ratios of check 1 with a fixed fixture.
    #[arg(long, value_enum)]
    fixture: Option<Fixture>,
}

const SHIFTS: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

fn prop1(a: &VerifyArgs) -> Result<Vec<BoundReport>> {
    if let Some(Fixture::Uniform) = a.fixture {
        return Ok(vec![verify_deviation_ess_link(&vec![1.0; a.samples])?]);
    }
    SHIFTS
        .iter()
        .map(|&s| {
            Ok(verify_deviation_ess_link(&synthetic_shift_ratios(
                a.samples, s, a.seed,
            ))?)
        })
        .collect()
}

fn prop2(a: &VerifyArgs) -> Result<Vec<BoundReport>> {
    (0..a.batches)
        .map(|b| {
            let batch = synthetic_clip_batch(a.samples, a.seed.wrapping_add(b), Parallelism::default())?;
            Ok(verify_clipping_bias(&batch, a.clip_eps)?)
        })
        .collect()
}

fn prop3(a: &VerifyArgs) -> Result<Vec<BoundReport>> {
    (0..a.pairs)
        .map(|i| {
            let (f, l) = random_gaussian_pair(a.seed, i, 2, a.max_kl);
            Ok(verify_pinsker(
                &f,
                &l,
                a.samples,
                a.seed.wrapping_add(i),
                Parallelism::default(),
            )?)
        })
        .collect()
}

pub fn run(a: VerifyArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::Degenerate("--samples must be positive".into()).into());
    }
    let groups: [(Prop, &str, fn(&VerifyArgs) -> Result<Vec<BoundReport>>); 3] = [
        (Prop::One, "deviation vs ratio spread", prop1),
        (Prop::Two, "clipping bias", prop2),
        (Prop::Three, "pinsker", prop3),
    ];
    let mut violated = Vec::new();
    for (prop, title, check) in groups {
        if a.prop != Prop::All && a.prop != prop {
            continue;
        }
        println!("# {title}");
        for report in check(&a)? {
            println!("{report}");
            if !report.holds {
                violated.push(format!(
                    "{}: estimate {} > bound {} + slack {}",
                    report.name, report.estimate, report.bound, report.slack
                ));
            }
        }
    }
    if violated.is_empty() {
        Ok(())
    } else {
        for v in &violated {
            eprintln!("violated: {v}");
        }
        Err(Violated(format!("{} check(s) violated", violated.len())).into())
    }
}
