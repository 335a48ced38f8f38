//! Cross-run comparison tables and windowed summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{read_metrics, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::trainer::run::METRICS_FILE;

/// Iterations averaged by [`window_summary`].
pub const WINDOW: u64 = 11;

/// Reads `dir/metrics.jsonl`; errors name the directory.
pub fn load_run(dir: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let path = dir.join(METRICS_FILE);
    let records = read_metrics(&path).map_err(|e| match e {
        Error::Io { source, .. } => Error::Metrics(format!("{}: cannot read {METRICS_FILE}: {source}", dir.display())),
        other => Error::Metrics(format!("{}: {other}", dir.display())),
    })?;
    if records.is_empty() {
        return Err(Error::Metrics(format!(
            "{}: {METRICS_FILE} has no records",
            dir.display()
        )));
    }
    Ok(records)
}

/// Short unique labels from directory names.
pub fn labels(dirs: &[&Path]) -> Vec<String> {
    let base: Vec<String> = dirs
        .iter()
        .map(|d| {
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string())
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, b)| {
            if base.iter().filter(|o| *o == b).count() > 1 {
                format!("{b}_{i}")
            } else {
                b.clone()
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per iteration; per run: leader return, mean IS deviation, ESS rate.
pub fn comparison_csv(runs: &[(String, Vec<DiagnosticsRecord>)]) -> String {
    let mut out = String::from("iteration");
    for (label, _) in runs {
        out.push_str(&format!(",{label}_return,{label}_is_deviation,{label}_ess_rate"));
    }
    out.push('\n');
    let max_it = runs
        .iter()
        .flat_map(|(_, r)| r.iter().map(|x| x.iteration))
        .max()
        .unwrap_or(0);
    for it in 1..=max_it {
        out.push_str(&it.to_string());
        for (_, records) in runs {
            let rec = records.iter().find(|r| r.iteration == it);
            out.push_str(&format!(
                ",{},{},{}",
                cell(rec.and_then(|r| r.leader_return)),
                cell(rec.map(|r| r.mean_is_deviation)),
                cell(rec.map(|r| r.ess_rate))
            ));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub center: u64,
    pub first: u64,
    pub last: u64,
    pub mean_is_deviation: f64,
    pub ess_rate: f64,
    pub leader_return: Option<f64>,
}

/// Averages over the eleven iterations centred on `center`, shifted to stay
/// inside the available range.
pub fn window_summary(records: &[DiagnosticsRecord], center: u64) -> Option<WindowSummary> {
    let last_it = records.iter().map(|r| r.iteration).max()?;
    let half = WINDOW / 2;
    let hi = (center + half).min(last_it);
    let lo = hi.saturating_sub(WINDOW - 1).max(1);
    let inside: Vec<&DiagnosticsRecord> = records.iter().filter(|r| (lo..=hi).contains(&r.iteration)).collect();
    if inside.is_empty() {
        return None;
    }
    let n = inside.len() as f64;
    let returns: Vec<f64> = inside.iter().filter_map(|r| r.leader_return).collect();
    Some(WindowSummary {
        center,
        first: lo,
        last: hi,
        mean_is_deviation: inside.iter().map(|r| r.mean_is_deviation).sum::<f64>() / n,
        ess_rate: inside.iter().map(|r| r.ess_rate).sum::<f64>() / n,
        leader_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
    })
}

pub fn window_csv(rows: &[(String, WindowSummary)]) -> String {
    let mut out = String::from("run,center,first,last,mean_is_deviation,ess_rate,leader_return\n");
    for (label, w) in rows {
        out.push_str(&format!(
            "{label},{},{},{},{},{},{}\n",
            w.center,
            w.first,
            w.last,
            w.mean_is_deviation,
            w.ess_rate,
            cell(w.leader_return)
        ));
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::LossBreakdown;

    fn rec(iteration: u64, dev: f64, ess_rate: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            iteration,
            env_steps: iteration,
            agent_returns: vec![Some(1.0)],
            leader_return: Some(iteration as f64),
            mean_is_deviation: dev,
            ess: ess_rate * 10.0,
            ess_rate,
            ess_samples: 10,
            approx_kl: 0.0,
            entropy: 0.0,
            lr: 1e-3,
            losses: LossBreakdown::empty(1),
            kl_matrix: None,
            disc_loss: None,
            follower_index: None,
            grad_norm: 0.0,
            clip_fraction: 0.0,
        }
    }

    #[test]
    fn window_of_eleven() {
        let recs: Vec<_> = (1..=30).map(|i| rec(i, i as f64, 0.5)).collect();
        let w = window_summary(&recs, 15).unwrap();
        assert_eq!((w.first, w.last), (10, 20));
        assert_eq!(w.mean_is_deviation, 15.0);
        let w = window_summary(&recs, 30).unwrap();
        assert_eq!((w.first, w.last), (20, 30));
        let w = window_summary(&recs, 2).unwrap();
        assert_eq!((w.first, w.last), (1, 7));
        assert!(window_summary(&[], 3).is_none());
    }

    #[test]
    fn identical_runs_give_identical_columns() {
        let recs: Vec<_> = (1..=3).map(|i| rec(i, 0.1 * i as f64, 0.9)).collect();
        let csv = comparison_csv(&[("a".into(), recs.clone()), ("b".into(), recs)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,a_return,a_is_deviation,a_ess_rate,b_return,b_is_deviation,b_ess_rate"
        );
        for line in &lines[1..] {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[1..4], cells[4..7]);
        }
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]) - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    #[test]
    fn labels_are_unique() {
        let a = Path::new("x/run");
        let b = Path::new("y/run");
        let c = Path::new("z/other");
        assert_eq!(labels(&[a, b, c]), vec!["run_0", "run_1", "other"]);
    }

    #[test]
    fn load_run_names_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_run(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&dir.path().display().to_string()), "{err}");
        std::fs::write(dir.path().join(METRICS_FILE), "{not json}\n").unwrap();
        assert!(load_run(dir.path()).is_err());
    }
}
