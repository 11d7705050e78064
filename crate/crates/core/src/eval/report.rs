//! Constraint statistics, policy comparisons and their file formats.
//!
//! Boundary conventions: an episode overshoots when `bitrate > target`
//! (strictly), overshoots by more than 5% when `bitrate − target >
//! 0.05·target`, and is within 5% when `|bitrate − target| ≤ 0.05·target`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bdrate::bd_rate;
use super::{curves_from_records, EpisodeRecord};
use crate::error::{Error, Result};

/// Counts in half-open bins `[edges[i−1], edges[i])`, with an underflow
/// count first and an overflow count last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Histogram {
            counts: vec![0; edges.len() + 1],
            edges,
        }
    }

    pub fn add(&mut self, x: f64) {
        let slot = self.edges.partition_point(|e| *e <= x);
        self.counts[slot] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `lo,hi,count` rows; open ends are written as `-inf` / `inf`.
    fn csv_rows(&self, prefix: &str, out: &mut String) {
        for (i, c) in self.counts.iter().enumerate() {
            let lo = if i == 0 { f64::NEG_INFINITY } else { self.edges[i - 1] };
            let hi = self.edges.get(i).copied().unwrap_or(f64::INFINITY);
            let _ = writeln!(out, "{prefix}{lo},{hi},{c}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub overshoot_gt0: f64,
    pub overshoot_gt5pct: f64,
    pub within_5pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetHistogram {
    pub target_kbps: f64,
    /// Overshoot as a percentage of the target.
    pub overshoot_pct: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub policy: String,
    pub episodes: usize,
    pub fractions: Fractions,
    /// Standard error of each fraction across seeds; absent for one seed.
    pub seed_se: Option<Fractions>,
    pub histograms: Vec<TargetHistogram>,
}

fn fractions(records: &[EpisodeRecord]) -> Fractions {
    let n = records.len().max(1) as f64;
    let count = |f: &dyn Fn(&EpisodeRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    Fractions {
        overshoot_gt0: count(&|r| r.bitrate_kbps > r.target_kbps),
        overshoot_gt5pct: count(&|r| r.bitrate_kbps - r.target_kbps > 0.05 * r.target_kbps),
        within_5pct: count(&|r| (r.bitrate_kbps - r.target_kbps).abs() <= 0.05 * r.target_kbps),
    }
}

/// Fractions and per-target overshoot histograms (5% bins over ±50%).
pub fn constraint_report(policy: &str, records: &[EpisodeRecord]) -> ConstraintReport {
    let mut targets: Vec<f64> = records.iter().map(|r| r.target_kbps).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let histograms = targets
        .into_iter()
        .map(|t| {
            let mut h = Histogram::uniform(-50.0, 50.0, 20);
            for r in records.iter().filter(|r| r.target_kbps == t) {
                h.add(100.0 * r.overshoot_kbps() / t);
            }
            TargetHistogram {
                target_kbps: t,
                overshoot_pct: h,
            }
        })
        .collect();
    ConstraintReport {
        policy: policy.into(),
        episodes: records.len(),
        fractions: fractions(records),
        seed_se: None,
        histograms,
    }
}

/// Sweep records of one policy, one entry per training seed (a single entry
/// for deterministic baselines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRuns {
    pub label: String,
    pub seeds: Vec<Vec<EpisodeRecord>>,
}

impl PolicyRuns {
    pub fn single(label: impl Into<String>, records: Vec<EpisodeRecord>) -> Self {
        PolicyRuns {
            label: label.into(),
            seeds: vec![records],
        }
    }

    fn pooled(&self) -> Vec<EpisodeRecord> {
        self.seeds.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoBdRate {
    pub video_id: String,
    pub seed: usize,
    pub bd_rate_pct: f64,
    pub non_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedVideo {
    pub video_id: String,
    pub seed: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub test: String,
    pub per_video: Vec<VideoBdRate>,
    pub skipped: Vec<SkippedVideo>,
    /// Mean over videos, one value per test seed; absent for a seed none of
    /// whose videos could be compared.
    pub per_seed_mean_bd_rate_pct: Vec<Option<f64>>,
    /// Mean over the seeds that have one.
    pub mean_bd_rate_pct: Option<f64>,
    /// Standard error over seeds; absent with fewer than two seed means.
    pub bd_rate_se_pct: Option<f64>,
    pub bd_rate_histogram: Histogram,
    pub constraints: Vec<ConstraintReport>,
}

fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn policy_constraints(runs: &PolicyRuns) -> ConstraintReport {
    let mut rep = constraint_report(&runs.label, &runs.pooled());
    if runs.seeds.len() > 1 {
        let per: Vec<Fractions> = runs.seeds.iter().map(|s| fractions(s)).collect();
        let se = |f: fn(&Fractions) -> f64| mean_se(&per.iter().map(f).collect::<Vec<_>>()).1.unwrap_or(0.0);
        rep.seed_se = Some(Fractions {
            overshoot_gt0: se(|f| f.overshoot_gt0),
            overshoot_gt5pct: se(|f| f.overshoot_gt5pct),
            within_5pct: se(|f| f.within_5pct),
        });
    }
    rep
}

/// BD-rate of `test` against `reference` per video and seed, plus
/// constraint tables for both. Test seed `s` is paired with reference seed
/// `min(s, reference seeds − 1)`. Videos whose curves cannot be compared
/// (too few distinct qualities, no overlap) are listed in `skipped`.
pub fn compare_policies(reference: &PolicyRuns, test: &PolicyRuns) -> Result<ComparisonReport> {
    if reference.seeds.is_empty() || test.seeds.is_empty() {
        return Err(Error::InputDomain("each policy needs at least one run".into()));
    }
    let mut per_video = Vec::new();
    let mut skipped = Vec::new();
    let mut seed_means = Vec::new();
    let mut hist = Histogram::uniform(-25.0, 25.0, 50);
    for (s, test_records) in test.seeds.iter().enumerate() {
        let ref_records = &reference.seeds[s.min(reference.seeds.len() - 1)];
        let ref_curves = curves_from_records(ref_records)?;
        let test_curves = curves_from_records(test_records)?;
        let mut values = Vec::new();
        for tc in &test_curves {
            let Some(rc) = ref_curves.iter().find(|c| c.video_id == tc.video_id) else {
                skipped.push(SkippedVideo {
                    video_id: tc.video_id.clone(),
                    seed: s,
                    reason: "no reference curve".into(),
                });
                continue;
            };
            match bd_rate(rc, tc) {
                Ok(bd) => {
                    values.push(bd.percent);
                    hist.add(bd.percent);
                    per_video.push(VideoBdRate {
                        video_id: tc.video_id.clone(),
                        seed: s,
                        bd_rate_pct: bd.percent,
                        non_monotone: bd.non_monotone,
                    });
                }
                Err(e @ (Error::NoOverlap { .. } | Error::InputDomain(_))) => skipped.push(SkippedVideo {
                    video_id: tc.video_id.clone(),
                    seed: s,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
        seed_means.push((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64));
    }
    let present: Vec<f64> = seed_means.iter().flatten().copied().collect();
    let (mean, se) = if present.is_empty() {
        (None, None)
    } else {
        let (m, se) = mean_se(&present);
        (Some(m), se)
    };
    Ok(ComparisonReport {
        reference: reference.label.clone(),
        test: test.label.clone(),
        per_video,
        skipped,
        per_seed_mean_bd_rate_pct: seed_means,
        mean_bd_rate_pct: mean,
        bd_rate_se_pct: se,
        bd_rate_histogram: hist,
        constraints: vec![policy_constraints(reference), policy_constraints(test)],
    })
}

/// RD points as CSV: `video_id,policy,target_kbps,bitrate_kbps,quality_db`.
pub fn curves_csv(records: &[EpisodeRecord]) -> String {
    let mut out = String::from("video_id,policy,target_kbps,bitrate_kbps,quality_db\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.video_id, r.policy, r.target_kbps, r.bitrate_kbps, r.quality_db
        );
    }
    out
}

pub fn markdown_summary(reports: &[ComparisonReport]) -> String {
    let mut md = String::from("# Rate-control evaluation\n\n## BD-rate (PSNR)\n\n");
    md.push_str("| reference | test | mean BD-rate (%) | ± SE | videos | skipped |\n|---|---|---|---|---|---|\n");
    for r in reports {
        let se = r.bd_rate_se_pct.map_or("".to_string(), |s| format!("{s:.3}"));
        let mean = r.mean_bd_rate_pct.map_or("n/a".to_string(), |m| format!("{m:.3}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.reference,
            r.test,
            mean,
            se,
            r.per_video.len(),
            r.skipped.len()
        );
    }
    md.push_str("\n## Constraint satisfaction\n\n");
    md.push_str("| policy | episodes | overshoot > 0 | overshoot > 5% | within 5% |\n|---|---|---|---|---|\n");
    let mut seen: Vec<&str> = Vec::new();
    for c in reports.iter().flat_map(|r| &r.constraints) {
        if seen.contains(&c.policy.as_str()) {
            continue;
        }
        seen.push(&c.policy);
        let cell = |v: f64, se: Option<f64>| match se {
            Some(s) => format!("{:.2}% ± {:.2}", 100.0 * v, 100.0 * s),
            None => format!("{:.2}%", 100.0 * v),
        };
        let f = c.fractions;
        let se = c.seed_se;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            c.policy,
            c.episodes,
            cell(f.overshoot_gt0, se.map(|s| s.overshoot_gt0)),
            cell(f.overshoot_gt5pct, se.map(|s| s.overshoot_gt5pct)),
            cell(f.within_5pct, se.map(|s| s.within_5pct)),
        );
    }
    md
}

/// Writes `curves.csv`, `report.json`, `report.md`, `bd_rate_hist.csv` and
/// `overshoot_hist.csv` into `dir`.
pub fn write_bundle(dir: &Path, records: &[EpisodeRecord], reports: &[ComparisonReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    put("curves.csv", curves_csv(records))?;
    put("report.json", serde_json::to_string_pretty(reports)? + "\n")?;
    put("report.md", markdown_summary(reports))?;

    let mut bd = String::from("reference,test,bin_lo_pct,bin_hi_pct,count\n");
    for r in reports {
        r.bd_rate_histogram.csv_rows(&format!("{},{},", r.reference, r.test), &mut bd);
    }
    put("bd_rate_hist.csv", bd)?;

    let mut over = String::from("policy,target_kbps,bin_lo_pct,bin_hi_pct,count\n");
    let mut seen: Vec<&str> = Vec::new();
    for c in reports.iter().flat_map(|r| &r.constraints) {
        if seen.contains(&c.policy.as_str()) {
            continue;
        }
        seen.push(&c.policy);
        for h in &c.histograms {
            h.overshoot_pct.csv_rows(&format!("{},{},", c.policy, h.target_kbps), &mut over);
        }
    }
    put("overshoot_hist.csv", over)
}
