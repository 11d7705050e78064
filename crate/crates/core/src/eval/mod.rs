//! RD sweeps, BD-rate comparisons and constraint statistics.

pub mod bdrate;
pub mod report;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::actor::{greedy_episode, search_episode};
use crate::agent::{AgentParams, SearchConfig};
use crate::baselines::{constant_qp, exhaustive_oracle, heuristic_vbr_state, OracleCache, OracleConfig};
use crate::codec_sim::{run_episode, CodecConfig, EncodeState, VideoSpec};
use crate::error::Result;

pub use bdrate::{bd_rate, BdRate, RDCurve, RDPoint};
pub use report::{compare_policies, constraint_report, ComparisonReport, ConstraintReport, PolicyRuns};

/// The nine sweep targets: 256 to 768 kbps in steps of 64.
pub fn default_targets() -> Vec<f64> {
    (0..9).map(|i| 256.0 + 64.0 * i as f64).collect()
}

/// Anything that can choose QPs for a whole video.
pub trait RatePolicy: Sync {
    fn label(&self) -> String;
    fn encode(&self, video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState>;
}

pub struct HeuristicVbr;

impl RatePolicy for HeuristicVbr {
    fn label(&self) -> String {
        "heuristic-vbr".into()
    }

    fn encode(&self, video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState> {
        heuristic_vbr_state(video, target_kbps, codec)
    }
}

pub struct ConstantQp(pub u8);

impl RatePolicy for ConstantQp {
    fn label(&self) -> String {
        format!("constant-qp-{}", self.0)
    }

    fn encode(&self, video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState> {
        run_episode(video.clone(), target_kbps, codec, &constant_qp(video, self.0))
    }
}

pub struct Oracle<'a> {
    pub config: OracleConfig,
    pub cache: Option<(&'a OracleCache, String)>,
}

impl RatePolicy for Oracle<'_> {
    fn label(&self) -> String {
        "oracle".into()
    }

    fn encode(&self, video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState> {
        let best = match &self.cache {
            Some((cache, hash)) => cache.get_or_compute(hash, video, target_kbps, codec, &self.config)?,
            None => exhaustive_oracle(video, target_kbps, codec, &self.config)?,
        };
        run_episode(video.clone(), target_kbps, codec, &best.qps)
    }
}

/// The learned agent acting greedily on its policy head, or with search
/// when `search` is set.
pub struct AgentPolicy<'a> {
    pub label: String,
    pub params: &'a AgentParams,
    pub search: Option<SearchConfig>,
}

impl RatePolicy for AgentPolicy<'_> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn encode(&self, video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState> {
        match &self.search {
            Some(cfg) => search_episode(video, target_kbps, codec, self.params, cfg),
            None => greedy_episode(video, target_kbps, codec, self.params),
        }
    }
}

/// One encode's outcome, the row unit of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub video_id: String,
    pub policy: String,
    pub target_kbps: f64,
    pub bitrate_kbps: f64,
    pub quality_db: f64,
}

impl EpisodeRecord {
    pub fn overshoot_kbps(&self) -> f64 {
        self.bitrate_kbps - self.target_kbps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub records: Vec<EpisodeRecord>,
    pub curves: Vec<RDCurve>,
}

/// Encodes every video at every target. Work is split across `threads`
/// scoped threads; output order is always video-major, target-minor.
pub fn rd_sweep(
    policy: &dyn RatePolicy,
    videos: &[Arc<VideoSpec>],
    codec: CodecConfig,
    targets: &[f64],
    threads: usize,
) -> Result<Sweep> {
    let label = policy.label();
    let jobs: Vec<(usize, f64)> = (0..videos.len())
        .flat_map(|v| targets.iter().map(move |t| (v, *t)))
        .collect();
    let run = |&(v, t): &(usize, f64)| -> Result<EpisodeRecord> {
        let m = policy.encode(&videos[v], t, codec)?.episode_metrics()?;
        Ok(EpisodeRecord {
            video_id: videos[v].id.clone(),
            policy: label.clone(),
            target_kbps: t,
            bitrate_kbps: m.bitrate_kbps,
            quality_db: m.mean_psnr_db,
        })
    };
    let threads = threads.max(1).min(jobs.len().max(1));
    let records: Vec<EpisodeRecord> = if threads == 1 {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| s.spawn(|| c.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(jobs.len());
            for h in handles {
                out.extend(h.join().expect("sweep worker panicked")?);
            }
            Ok::<_, crate::Error>(out)
        })?
    };
    let curves = curves_from_records(&records)?;
    Ok(Sweep { records, curves })
}

/// Groups records by (policy, video) into curves, preserving first-seen
/// order.
pub fn curves_from_records(records: &[EpisodeRecord]) -> Result<Vec<RDCurve>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut points: Vec<Vec<RDPoint>> = Vec::new();
    for r in records {
        let key = (r.policy.clone(), r.video_id.clone());
        let slot = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                points.push(Vec::new());
                order.len() - 1
            }
        };
        points[slot].push(RDPoint {
            bitrate_kbps: r.bitrate_kbps,
            quality_db: r.quality_db,
        });
    }
    order
        .into_iter()
        .zip(points)
        .map(|((policy, video), pts)| RDCurve::new(policy, video, pts))
        .collect()
}
