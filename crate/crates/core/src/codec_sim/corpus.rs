//! Synthetic corpus generation and on-disk layout.
//!
//! A corpus directory holds `manifest.json` plus one `videos/<id>.json`
//! document per video.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CodecConfig, FrameKind, FrameSpec, VideoSpec};
use crate::error::{Error, Result};

pub const VIDEO_SCHEMA: &str = "ratectl.video/1";
pub const MANIFEST_SCHEMA: &str = "ratectl.corpus/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub fps: f64,
    pub duration_range_s: (f64, f64),
    pub complexity_range: (f64, f64),
    pub motion_range: (f64, f64),
    /// Per show frame (after the first) chance of a scene cut, coded as a KEY
    /// frame with freshly drawn complexity.
    pub scene_change_prob: f64,
    /// Per scene chance of a hidden alternate reference frame right after the
    /// scene's first frame; later frames in the scene predict from it.
    pub arf_prob: f64,
    /// Log-normal jitter of per-frame complexity around the scene level.
    pub complexity_jitter: f64,
    /// Upper bound on total frames (show + hidden); ARFs that would exceed it
    /// are dropped.
    pub max_frames: Option<usize>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            fps: 30.0,
            duration_range_s: (3.0, 7.0),
            complexity_range: (10.0, 3000.0),
            motion_range: (0.2, 0.9),
            scene_change_prob: 0.01,
            arf_prob: 0.5,
            complexity_jitter: 0.15,
            max_frames: None,
        }
    }
}

impl CorpusParams {
    /// Tiny videos (3 to 6 frames at 1 fps) that the exhaustive oracle can
    /// solve. Each frame stands in for a second of content, so pair it with
    /// [`CodecConfig::scaled(30.0)`](CodecConfig::scaled).
    pub fn desk() -> Self {
        CorpusParams {
            fps: 1.0,
            duration_range_s: (3.0, 6.0),
            scene_change_prob: 0.15,
            arf_prob: 0.3,
            max_frames: Some(6),
            ..CorpusParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus params: {m}")));
        let (d0, d1) = self.duration_range_s;
        let (c0, c1) = self.complexity_range;
        let (m0, m1) = self.motion_range;
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(d0 > 0.0 && d0 <= d1) || (d1 * self.fps).floor() < (d0 * self.fps).ceil() {
            return bad("duration range admits no whole frame count");
        }
        if !(c0 > 0.0 && c0 <= c1) {
            return bad("complexity range");
        }
        if !(0.0 <= m0 && m0 <= m1 && m1 <= 1.0) {
            return bad("motion range");
        }
        for p in [self.scene_change_prob, self.arf_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.complexity_jitter >= 0.0) {
            return bad("jitter");
        }
        if let Some(m) = self.max_frames {
            if ((d1 * self.fps).floor() as usize) > m {
                return bad("max_frames smaller than the longest duration");
            }
        }
        Ok(())
    }
}

/// Generates `count` videos deterministically from `seed`.
pub fn gen_corpus(seed: u64, count: usize, params: &CorpusParams) -> Result<Vec<VideoSpec>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_video(&mut rng, format!("s{seed}-v{i:04}"), params))
        .collect()
}

fn gen_video(rng: &mut ChaCha8Rng, id: String, p: &CorpusParams) -> Result<VideoSpec> {
    let lo = (p.duration_range_s.0 * p.fps).ceil() as usize;
    let hi = (p.duration_range_s.1 * p.fps).floor() as usize;
    let show = rng.random_range(lo.max(1)..=hi.max(1));
    let jitter = Normal::new(0.0, p.complexity_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let (c_lo, c_hi) = p.complexity_range;
    let (ln_lo, ln_hi) = (c_lo.ln(), c_hi.ln());

    let mut frames: Vec<FrameSpec> = Vec::with_capacity(show + 4);
    let mut scene_level = 0.0;
    let mut coupling = 0.0;
    let mut anchor = 0usize;
    let mut hidden = 0usize;
    for s in 0..show {
        let cut = s == 0 || rng.random::<f64>() < p.scene_change_prob;
        if cut {
            scene_level = rng.random_range(ln_lo..=ln_hi);
            coupling = rng.random_range(p.motion_range.0..=p.motion_range.1);
        }
        let complexity = (scene_level + jitter.sample(rng)).clamp(ln_lo, ln_hi).exp();
        let index = frames.len();
        if cut {
            frames.push(FrameSpec {
                index,
                kind: FrameKind::Key,
                show: true,
                complexity,
                motion_coupling: 0.0,
                ref_index: None,
            });
            anchor = index;
            let remaining_show = show - s - 1;
            let room = p
                .max_frames
                .is_none_or(|m| show + hidden < m);
            if remaining_show > 0 && room && rng.random::<f64>() < p.arf_prob {
                let arf_complexity =
                    (scene_level + jitter.sample(rng)).clamp(ln_lo, ln_hi).exp();
                frames.push(FrameSpec {
                    index: index + 1,
                    kind: FrameKind::ArfHidden,
                    show: false,
                    complexity: arf_complexity,
                    motion_coupling: coupling,
                    ref_index: Some(index),
                });
                anchor = index + 1;
                hidden += 1;
            }
        } else {
            let prev = index - 1;
            // Predict from the scene's ARF when there is one, otherwise from
            // the previous frame.
            let reference = if frames[anchor].kind == FrameKind::ArfHidden { anchor } else { prev };
            frames.push(FrameSpec {
                index,
                kind: FrameKind::Inter,
                show: true,
                complexity,
                motion_coupling: coupling,
                ref_index: Some(reference),
            });
        }
    }
    VideoSpec::new(id, frames, p.fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema: String,
    pub seed: u64,
    pub count: usize,
    pub params: CorpusParams,
    pub codec: CodecConfig,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoDocument {
    schema: String,
    video: VideoSpec,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub videos: Vec<Arc<VideoSpec>>,
}

impl Corpus {
    pub fn generate(seed: u64, count: usize, params: CorpusParams, codec: CodecConfig) -> Result<Self> {
        codec.validate()?;
        let videos = gen_corpus(seed, count, &params)?;
        let manifest = CorpusManifest {
            schema: MANIFEST_SCHEMA.into(),
            seed,
            count,
            params,
            codec,
            videos: videos
                .iter()
                .map(|v| ManifestEntry {
                    id: v.id.clone(),
                    file: format!("videos/{}.json", v.id),
                })
                .collect(),
        };
        Ok(Corpus {
            manifest,
            videos: videos.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn codec(&self) -> CodecConfig {
        self.manifest.codec
    }

    pub fn get(&self, id: &str) -> Option<&Arc<VideoSpec>> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Content hash over the manifest and every video document.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).unwrap_or_default());
        for v in &self.videos {
            h.update(serde_json::to_vec(v.as_ref()).unwrap_or_default());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("videos");
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (entry, video) in self.manifest.videos.iter().zip(&self.videos) {
            let doc = VideoDocument {
                schema: VIDEO_SCHEMA.into(),
                video: video.as_ref().clone(),
            };
            write_json(&dir.join(&entry.file), &doc)?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("unsupported corpus schema {}", manifest.schema)));
        }
        manifest.codec.validate()?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            let doc: VideoDocument = read_json(&dir.join(&entry.file))?;
            if doc.schema != VIDEO_SCHEMA {
                return Err(Error::Format(format!("unsupported video schema {}", doc.schema)));
            }
            if doc.video.id != entry.id {
                return Err(Error::Format(format!("{} holds video {}", entry.file, doc.video.id)));
            }
            doc.video.validate()?;
            videos.push(Arc::new(doc.video));
        }
        Ok(Corpus { manifest, videos })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let p = CorpusParams::default();
        let a = serde_json::to_vec(&gen_corpus(7, 20, &p).unwrap()).unwrap();
        let b = serde_json::to_vec(&gen_corpus(7, 20, &p).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&gen_corpus(8, 20, &p).unwrap()).unwrap();
        assert_ne!(a, c);
        assert!(gen_corpus(7, 0, &p).unwrap().is_empty());
    }

    #[test]
    fn large_corpus_stays_in_bounds() {
        let p = CorpusParams::default();
        let videos = gen_corpus(3, 1000, &p).unwrap();
        let mut cuts = 0;
        let mut arfs = 0;
        for v in &videos {
            v.validate().unwrap();
            assert!(v.duration_s >= 3.0 && v.duration_s <= 7.0);
            for f in &v.frames {
                assert!(f.complexity >= 10.0 * (1.0 - 1e-12) && f.complexity <= 3000.0 * (1.0 + 1e-12));
                if f.kind != FrameKind::Key {
                    assert!(f.motion_coupling >= 0.2 && f.motion_coupling <= 0.9);
                }
            }
            cuts += v.frames.iter().skip(1).filter(|f| f.kind == FrameKind::Key).count();
            arfs += v.frames.iter().filter(|f| f.kind == FrameKind::ArfHidden).count();
        }
        assert!(cuts > 0 && arfs > 0);
    }

    #[test]
    fn desk_videos_fit_the_oracle() {
        let videos = gen_corpus(11, 300, &CorpusParams::desk()).unwrap();
        for v in &videos {
            assert!(v.frames.len() <= 6, "{} has {} frames", v.id, v.frames.len());
            assert!((3..=6).contains(&v.show_count()));
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::generate(5, 4, CorpusParams::desk(), CodecConfig::scaled(30.0)).unwrap();
        corpus.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back.manifest, corpus.manifest);
        assert_eq!(back.videos, corpus.videos);
        assert_eq!(back.content_hash(), corpus.content_hash());
    }
}
