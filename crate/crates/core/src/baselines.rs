//! Non-learned reference policies and the exhaustive oracle.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::codec_sim::{CodecConfig, EncodeState, EpisodeResult, VideoSpec, QP_MAX};
use crate::error::{Error, Result};

/// Environment variable naming the oracle cache directory.
pub const CACHE_DIR_ENV: &str = "RATECTL_CACHE_DIR";

/// Two-pass VBR stand-in.
///
/// Pass 1 splits the whole budget across frames in proportion to
/// `weight_kind · ln(1 + complexity)`. Pass 2 walks the frames, scales the
/// current frame's share by `remaining budget / remaining planned bits` and
/// picks the QP whose predicted bits land closest to it (lower QP on ties).
pub fn heuristic_vbr(video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<Vec<u8>> {
    Ok(heuristic_vbr_state(video, target_kbps, codec)?
        .results()
        .iter()
        .map(|r| r.qp)
        .collect())
}

pub fn heuristic_vbr_state(video: &Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<EncodeState> {
    let mut state = EncodeState::new(video.clone(), target_kbps, codec)?;
    let weights: Vec<f64> = video
        .frames
        .iter()
        .map(|f| codec.weight(f.kind) * (1.0 + f.complexity).ln())
        .collect();
    let total: f64 = weights.iter().sum();
    let budget = state.budget_bits();
    let plan: Vec<f64> = weights.iter().map(|w| budget * w / total).collect();
    while !state.is_done() {
        let i = state.next_index();
        let planned_left: f64 = plan[i..].iter().sum();
        let correction = (budget - state.bits_used()).max(0.0) / planned_left;
        let want = plan[i] * correction;
        let mut best = (f64::INFINITY, QP_MAX);
        for qp in 0..=QP_MAX {
            let gap = (state.encode_frame(qp)?.bits - want).abs();
            if gap < best.0 {
                best = (gap, qp);
            }
        }
        state.step(best.1)?;
    }
    Ok(state)
}

pub fn constant_qp(video: &VideoSpec, qp: u8) -> Vec<u8> {
    vec![qp; video.frames.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub qp_grid: Vec<u8>,
    pub max_frames: usize,
}

impl Default for OracleConfig {
    /// Eight QPs evenly spaced over [0, 255], i.e. geometrically spaced step
    /// sizes.
    fn default() -> Self {
        OracleConfig {
            qp_grid: (0..8).map(|k| (255.0 * k as f64 / 7.0).round() as u8).collect(),
            max_frames: 6,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qp_grid.is_empty() {
            return Err(Error::Config("oracle grid is empty".into()));
        }
        let nodes = (self.qp_grid.len() as f64).powi(self.max_frames as i32);
        if nodes > 2e6 {
            return Err(Error::Config(format!("oracle search space of {nodes:.0} leaves is too large")));
        }
        Ok(())
    }

    fn sorted_grid(&self) -> Vec<u8> {
        let mut g = self.qp_grid.clone();
        g.sort_unstable();
        g.dedup();
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub qps: Vec<u8>,
    pub result: EpisodeResult,
    pub bits: f64,
    /// False when no grid sequence meets the target; `qps` then minimizes
    /// overshoot.
    pub feasible: bool,
}

/// Full search over `qp_grid^frames`. Feasible sequences beat infeasible
/// ones; among feasible, higher mean PSNR wins; among infeasible, lower
/// overshoot. Remaining ties go to fewer bits, then the lexicographically
/// smallest QP sequence.
pub fn exhaustive_oracle(
    video: &Arc<VideoSpec>,
    target_kbps: f64,
    codec: CodecConfig,
    config: &OracleConfig,
) -> Result<OracleResult> {
    config.validate()?;
    if video.frames.len() > config.max_frames {
        return Err(Error::InputDomain(format!(
            "video {} has {} frames; the oracle is limited to {}",
            video.id,
            video.frames.len(),
            config.max_frames
        )));
    }
    let grid = config.sorted_grid();
    let root = EncodeState::new(video.clone(), target_kbps, codec)?;
    let mut best: Option<OracleResult> = None;
    let mut qps = Vec::with_capacity(video.frames.len());
    search(&root, &grid, &mut qps, &mut best)?;
    best.ok_or_else(|| Error::State("oracle explored no sequences".into()))
}

fn search(state: &EncodeState, grid: &[u8], qps: &mut Vec<u8>, best: &mut Option<OracleResult>) -> Result<()> {
    if state.is_done() {
        let result = state.episode_metrics()?;
        let cand = OracleResult {
            qps: qps.clone(),
            result,
            bits: state.bits_used(),
            feasible: result.feasible(),
        };
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            *best = Some(cand);
        }
        return Ok(());
    }
    for &qp in grid {
        let mut next = state.clone();
        next.step(qp)?;
        qps.push(qp);
        search(&next, grid, qps, best)?;
        qps.pop();
    }
    Ok(())
}

/// Strict preference; enumeration order supplies the lexicographic tie-break.
fn better(a: &OracleResult, b: &OracleResult) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => {
            a.result.mean_psnr_db > b.result.mean_psnr_db
                || (a.result.mean_psnr_db == b.result.mean_psnr_db && a.bits < b.bits)
        }
        (false, false) => a.result.overshoot_kbps < b.result.overshoot_kbps,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct CacheKey {
    corpus: String,
    video: String,
    target_kbps: String,
    grid: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: CacheKey,
    value: OracleResult,
}

/// Append-only JSON-lines cache of oracle results.
#[derive(Debug)]
pub struct OracleCache {
    path: PathBuf,
    entries: Mutex<HashMap<CacheKey, OracleResult>>,
}

impl OracleCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("oracle.jsonl");
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                // A torn final line from an interrupted run is ignored.
                if let Ok(l) = serde_json::from_str::<CacheLine>(line) {
                    entries.insert(l.key, l.value);
                }
            }
        }
        Ok(OracleCache {
            path,
            entries: Mutex::new(entries),
        })
    }

    /// Opens the directory named by [`CACHE_DIR_ENV`], if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(Some(OracleCache::open(Path::new(&dir))?)),
            _ => Ok(None),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(
        &self,
        corpus_hash: &str,
        video: &Arc<VideoSpec>,
        target_kbps: f64,
        codec: CodecConfig,
        config: &OracleConfig,
    ) -> Result<OracleResult> {
        let key = CacheKey {
            corpus: corpus_hash.into(),
            video: video.id.clone(),
            target_kbps: format!("{target_kbps}"),
            grid: config.sorted_grid(),
        };
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let value = exhaustive_oracle(video, target_kbps, codec, config)?;
        let mut line = serde_json::to_string(&CacheLine {
            key: key.clone(),
            value: value.clone(),
        })?;
        line.push('\n');
        let mut entries = self.entries.lock().unwrap();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        entries.insert(key, value.clone());
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec_sim::{run_episode, FrameKind, FrameSpec};

    fn frames(n: usize, complexity: f64, coupling: f64) -> Vec<FrameSpec> {
        (0..n)
            .map(|i| FrameSpec {
                index: i,
                kind: if i == 0 { FrameKind::Key } else { FrameKind::Inter },
                show: true,
                complexity,
                motion_coupling: if i == 0 { 0.0 } else { coupling },
                ref_index: i.checked_sub(1),
            })
            .collect()
    }

    #[test]
    fn default_grid() {
        assert_eq!(OracleConfig::default().qp_grid, vec![0, 36, 73, 109, 146, 182, 219, 255]);
    }

    #[test]
    fn generous_target_gives_lowest_qp() {
        let v = Arc::new(VideoSpec::new("one", frames(1, 500.0, 0.0), 1.0).unwrap());
        let r = exhaustive_oracle(&v, 1e9, CodecConfig::default(), &OracleConfig::default()).unwrap();
        assert_eq!(r.qps, vec![0]);
        assert!(r.feasible);
        assert_eq!(heuristic_vbr(&v, 1e9, CodecConfig::default()).unwrap(), vec![0]);
    }

    #[test]
    fn infeasible_target_is_flagged() {
        let v = Arc::new(VideoSpec::new("two", frames(2, 500.0, 0.5), 1.0).unwrap());
        // Headers alone need 400 bits over 2 s = 0.2 kbps.
        let r = exhaustive_oracle(&v, 0.1, CodecConfig::default(), &OracleConfig::default()).unwrap();
        assert!(!r.feasible);
        // The cheapest encode; coarse QPs that code nothing but headers tie.
        let floor = run_episode(v.clone(), 0.1, CodecConfig::default(), &[255, 255]).unwrap();
        assert_eq!(r.result.bitrate_kbps, floor.episode_metrics().unwrap().bitrate_kbps);
    }

    #[test]
    fn refuses_long_videos() {
        let v = Arc::new(VideoSpec::new("long", frames(7, 500.0, 0.5), 1.0).unwrap());
        assert!(matches!(
            exhaustive_oracle(&v, 500.0, CodecConfig::default(), &OracleConfig::default()),
            Err(Error::InputDomain(_))
        ));
    }

    #[test]
    fn grid_order_does_not_matter() {
        let v = Arc::new(VideoSpec::new("p", frames(3, 800.0, 0.7), 1.0).unwrap());
        let codec = CodecConfig::scaled(30.0);
        let a = exhaustive_oracle(&v, 400.0, codec, &OracleConfig::default()).unwrap();
        let mut shuffled = OracleConfig::default();
        shuffled.qp_grid.reverse();
        shuffled.qp_grid.swap(1, 5);
        assert_eq!(exhaustive_oracle(&v, 400.0, codec, &shuffled).unwrap(), a);
    }

    #[test]
    fn heuristic_uniform_video_is_nearly_constant() {
        let v = Arc::new(VideoSpec::new("u", frames(40, 600.0, 0.3), 30.0).unwrap());
        let codec = CodecConfig::default();
        let qps = heuristic_vbr(&v, 400.0, codec).unwrap();
        // Judge the INTER span; frame 0 is the mandatory key frame.
        let tail = &qps[1..];
        let spread = tail.iter().max().unwrap() - tail.iter().min().unwrap();
        // One grid step is 255 / 7 ≈ 36 QPs.
        assert!(spread <= 72, "{qps:?}");
        let state = run_episode(v, 400.0, codec, &qps).unwrap();
        let rate = state.episode_metrics().unwrap().bitrate_kbps;
        assert!((rate / 400.0 - 1.0).abs() < 0.05, "{rate}");
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Arc::new(VideoSpec::new("c", frames(2, 300.0, 0.5), 1.0).unwrap());
        let codec = CodecConfig::scaled(30.0);
        let cfg = OracleConfig::default();
        let cache = OracleCache::open(dir.path()).unwrap();
        let a = cache.get_or_compute("h", &v, 512.0, codec, &cfg).unwrap();
        let reopened = OracleCache::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get_or_compute("h", &v, 512.0, codec, &cfg).unwrap(), a);
    }
}
