//! Synthetic frame-sequential encoder.
//!
//! Each frame is coded with a single QP. Distortion follows the classical
//! high-rate quantizer model `D = min(E, step² / 12)` and the payload size is
//! `weight · ½ · log2(E / D)` bits, where the residual energy `E` of an inter
//! frame grows with the distortion of its reference. Everything here is a pure
//! function of `(VideoSpec, target, QP sequence, CodecConfig)`.

pub mod corpus;
pub mod features;

use std::cell::Cell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{first_pass, FirstPassRow, FirstPassStats, HistoryRow, ObservationBundle};

pub const QP_MAX: u8 = 255;
pub const PEAK: f64 = 255.0;

/// Lower end of the experimental target range, kbps.
pub const TARGET_MIN_KBPS: f64 = 256.0;
/// Upper end of the experimental target range, kbps.
pub const TARGET_MAX_KBPS: f64 = 768.0;

const DELTA_MIN: f64 = 0.5;

thread_local! {
    static ENCODE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of frame encodes performed on the current thread. Used to check
/// that planning never touches the simulator.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameKind {
    Key,
    ArfHidden,
    Inter,
}

impl FrameKind {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            FrameKind::Key => [1.0, 0.0, 0.0],
            FrameKind::ArfHidden => [0.0, 1.0, 0.0],
            FrameKind::Inter => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub index: usize,
    pub kind: FrameKind,
    pub show: bool,
    /// Source residual energy in MSE units.
    pub complexity: f64,
    pub motion_coupling: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub id: String,
    pub frames: Vec<FrameSpec>,
    pub fps: f64,
    pub duration_s: f64,
}

impl VideoSpec {
    /// Builds a video from frames, deriving the duration from the show-frame
    /// count.
    pub fn new(id: impl Into<String>, frames: Vec<FrameSpec>, fps: f64) -> Result<Self> {
        let show = frames.iter().filter(|f| f.show).count();
        let video = VideoSpec {
            id: id.into(),
            frames,
            fps,
            duration_s: show as f64 / fps,
        };
        video.validate()?;
        Ok(video)
    }

    pub fn show_count(&self) -> usize {
        self.frames.iter().filter(|f| f.show).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InputDomain(format!("video {}: {msg}", self.id)));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.frames.is_empty() {
            return bad("no frames".into());
        }
        if self.frames[0].kind != FrameKind::Key {
            return bad("frame 0 must be KEY".into());
        }
        let show = self.show_count();
        if show == 0 {
            return bad("no show frames".into());
        }
        let expected = show as f64 / self.fps;
        if !(self.duration_s > 0.0) || (self.duration_s - expected).abs() > 1e-9 * expected {
            return bad(format!(
                "duration {} does not match {show} show frames at {} fps",
                self.duration_s, self.fps
            ));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return bad(format!("frame {i} carries index {}", f.index));
            }
            if !(f.complexity.is_finite() && f.complexity > 0.0) {
                return bad(format!("frame {i} complexity {}", f.complexity));
            }
            if !(0.0..=1.0).contains(&f.motion_coupling) {
                return bad(format!("frame {i} motion coupling {}", f.motion_coupling));
            }
            if f.show == (f.kind == FrameKind::ArfHidden) {
                return bad(format!("frame {i}: show must be false exactly for ARF_HIDDEN"));
            }
            match (f.kind, f.ref_index) {
                (FrameKind::Key, None) if f.motion_coupling == 0.0 => {}
                (FrameKind::Key, _) => {
                    return bad(format!("KEY frame {i} must have no reference and zero coupling"))
                }
                (_, Some(r)) if r < i => {}
                (_, r) => return bad(format!("frame {i} has invalid reference {r:?}")),
            }
        }
        Ok(())
    }
}

/// Constants of the rate-distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub header_bits: f64,
    pub key_weight: f64,
    pub inter_weight: f64,
    /// Reference distortion at which an inter frame's residual doubles
    /// (times its motion coupling).
    pub d_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            header_bits: 200.0,
            key_weight: 20_000.0,
            inter_weight: 8_000.0,
            d_scale: 100.0,
        }
    }
}

impl CodecConfig {
    /// Default constants with bit costs multiplied by `factor`. A video at
    /// `fps` frames per second whose frames each stand in for `30 / fps`
    /// real frames uses `scaled(30 / fps)`.
    pub fn scaled(factor: f64) -> Self {
        let d = CodecConfig::default();
        CodecConfig {
            header_bits: d.header_bits * factor,
            key_weight: d.key_weight * factor,
            inter_weight: d.inter_weight * factor,
            d_scale: d.d_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("header_bits", self.header_bits),
            ("key_weight", self.key_weight),
            ("inter_weight", self.inter_weight),
            ("d_scale", self.d_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) || (name == "d_scale" && v == 0.0) {
                return Err(Error::Config(format!("codec {name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, kind: FrameKind) -> f64 {
        match kind {
            FrameKind::Key => self.key_weight,
            _ => self.inter_weight,
        }
    }

    /// Residual energy of a frame given the distortion of its reference
    /// (0 for KEY frames).
    pub fn effective_energy(&self, frame: &FrameSpec, ref_mse: f64) -> f64 {
        frame.complexity * (1.0 + frame.motion_coupling * ref_mse / self.d_scale)
    }

    /// Bits and distortion for coding residual energy `energy` at `qp`.
    pub fn code(&self, kind: FrameKind, energy: f64, qp: u8) -> (f64, f64) {
        let step = stepsize(qp);
        let mse = energy.min(step * step / 12.0);
        let bits = if mse < energy {
            self.header_bits + self.weight(kind) * 0.5 * (energy / mse).log2()
        } else {
            self.header_bits
        };
        (bits, mse)
    }
}

/// Quantizer step size for a QP: `0.5 · 2^(10·qp/255)`, spanning 0.5 to 512.
pub fn qp_to_stepsize(qp: i64) -> Result<f64> {
    if !(0..=QP_MAX as i64).contains(&qp) {
        return Err(Error::InputDomain(format!("qp {qp} outside [0, 255]")));
    }
    Ok(stepsize(qp as u8))
}

#[inline]
fn stepsize(qp: u8) -> f64 {
    DELTA_MIN * (10.0 * qp as f64 / 255.0).exp2()
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (PEAK * PEAK / mse).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub qp: u8,
    pub bits: f64,
    pub mse: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub mean_psnr_db: f64,
    pub bitrate_kbps: f64,
    pub overshoot_kbps: f64,
}

impl EpisodeResult {
    pub fn feasible(&self) -> bool {
        self.overshoot_kbps <= 0.0
    }
}

/// In-progress encode of one video at one target bitrate.
#[derive(Debug, Clone)]
pub struct EncodeState {
    video: Arc<VideoSpec>,
    codec: CodecConfig,
    target_kbps: f64,
    results: Vec<FrameResult>,
    bits_used: f64,
}

impl EncodeState {
    pub fn new(video: Arc<VideoSpec>, target_kbps: f64, codec: CodecConfig) -> Result<Self> {
        video.validate()?;
        codec.validate()?;
        if !(target_kbps.is_finite() && target_kbps > 0.0) {
            return Err(Error::InputDomain(format!("target {target_kbps} kbps")));
        }
        Ok(EncodeState {
            video,
            codec,
            target_kbps,
            results: Vec::with_capacity(0),
            bits_used: 0.0,
        })
    }

    /// Re-creates the state reached after encoding `results` in order.
    pub fn from_results(
        video: Arc<VideoSpec>,
        target_kbps: f64,
        codec: CodecConfig,
        results: &[FrameResult],
    ) -> Result<Self> {
        let mut state = EncodeState::new(video, target_kbps, codec)?;
        if results.len() > state.video.frames.len() {
            return Err(Error::InputDomain("more results than frames".into()));
        }
        // Same summation order as repeated `step` calls.
        state.bits_used = results.iter().fold(0.0, |acc, r| acc + r.bits);
        state.results = results.to_vec();
        Ok(state)
    }

    pub fn video(&self) -> &Arc<VideoSpec> {
        &self.video
    }

    pub fn codec(&self) -> &CodecConfig {
        &self.codec
    }

    pub fn target_kbps(&self) -> f64 {
        self.target_kbps
    }

    pub fn next_index(&self) -> usize {
        self.results.len()
    }

    pub fn results(&self) -> &[FrameResult] {
        &self.results
    }

    pub fn bits_used(&self) -> f64 {
        self.bits_used
    }

    pub fn budget_bits(&self) -> f64 {
        self.target_kbps * 1000.0 * self.video.duration_s
    }

    pub fn budget_fraction_used(&self) -> f64 {
        self.bits_used / self.budget_bits()
    }

    pub fn is_done(&self) -> bool {
        self.results.len() == self.video.frames.len()
    }

    /// Codes the next frame at `qp` without advancing the state.
    pub fn encode_frame(&self, qp: u8) -> Result<FrameResult> {
        let Some(frame) = self.video.frames.get(self.next_index()) else {
            return Err(Error::State(format!(
                "video {} already fully encoded",
                self.video.id
            )));
        };
        ENCODE_CALLS.with(|c| c.set(c.get() + 1));
        let ref_mse = frame.ref_index.map_or(0.0, |r| self.results[r].mse);
        let energy = self.codec.effective_energy(frame, ref_mse);
        let (bits, mse) = self.codec.code(frame.kind, energy, qp);
        Ok(FrameResult {
            qp,
            bits,
            mse,
            psnr_db: psnr_from_mse(mse),
        })
    }

    /// Encodes the next frame and advances. Returns whether the episode is
    /// finished.
    pub fn step(&mut self, qp: u8) -> Result<bool> {
        let result = self.encode_frame(qp)?;
        self.bits_used += result.bits;
        self.results.push(result);
        Ok(self.is_done())
    }

    pub fn episode_metrics(&self) -> Result<EpisodeResult> {
        if !self.is_done() {
            return Err(Error::State(format!(
                "episode metrics requested after {} of {} frames",
                self.results.len(),
                self.video.frames.len()
            )));
        }
        let (sum, n) = self
            .video
            .frames
            .iter()
            .zip(&self.results)
            .filter(|(f, _)| f.show)
            .fold((0.0, 0usize), |(s, n), (_, r)| (s + r.mse, n + 1));
        let bitrate_kbps = self.bits_used / (1000.0 * self.video.duration_s);
        Ok(EpisodeResult {
            mean_psnr_db: psnr_from_mse(sum / n as f64),
            bitrate_kbps,
            overshoot_kbps: bitrate_kbps - self.target_kbps,
        })
    }

    pub fn observation(&self) -> Result<ObservationBundle> {
        ObservationBundle::from_state(self, Arc::new(first_pass(&self.video)))
    }

    /// Same as [`observation`](Self::observation) with a precomputed
    /// first-pass table shared across steps.
    pub fn observation_with(&self, first_pass: Arc<FirstPassStats>) -> Result<ObservationBundle> {
        ObservationBundle::from_state(self, first_pass)
    }
}

/// Encodes a whole QP sequence and returns the final state.
pub fn run_episode(
    video: Arc<VideoSpec>,
    target_kbps: f64,
    codec: CodecConfig,
    qps: &[u8],
) -> Result<EncodeState> {
    let mut state = EncodeState::new(video, target_kbps, codec)?;
    if qps.len() != state.video.frames.len() {
        return Err(Error::InputDomain(format!(
            "{} qps for {} frames",
            qps.len(),
            state.video.frames.len()
        )));
    }
    for &qp in qps {
        state.step(qp)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn frame(index: usize, kind: FrameKind, complexity: f64, coupling: f64) -> FrameSpec {
        FrameSpec {
            index,
            kind,
            show: kind != FrameKind::ArfHidden,
            complexity,
            motion_coupling: if kind == FrameKind::Key { 0.0 } else { coupling },
            ref_index: if kind == FrameKind::Key { None } else { index.checked_sub(1) },
        }
    }

    fn key_video(complexity: f64) -> Arc<VideoSpec> {
        Arc::new(VideoSpec::new("k", vec![frame(0, FrameKind::Key, complexity, 0.0)], 30.0).unwrap())
    }

    /// QP whose Δ²/12 equals `d`, solved from the closed form (not necessarily integral).
    fn qp_for_quant_mse(d: f64) -> f64 {
        ((12.0 * d).sqrt() / 0.5).log2() * 255.0 / 10.0
    }

    #[test]
    fn stepsize_closed_form() {
        assert_eq!(qp_to_stepsize(0).unwrap(), 0.5);
        assert!((qp_to_stepsize(51).unwrap() - 2.0).abs() < 1e-12);
        assert!((qp_to_stepsize(255).unwrap() - 512.0).abs() < 1e-9);
        assert!(matches!(qp_to_stepsize(256), Err(Error::InputDomain(_))));
        assert!(matches!(qp_to_stepsize(-1), Err(Error::InputDomain(_))));
        for qp in 0..255 {
            assert!(qp_to_stepsize(qp + 1).unwrap() > qp_to_stepsize(qp).unwrap());
        }
    }

    #[test]
    fn key_frame_payload_at_quarter_energy() {
        // Δ²/12 = 300 exactly needs a fractional QP, so evaluate the model at
        // the energy level directly and at the nearest integer QP.
        let codec = CodecConfig::default();
        let (bits, mse) = {
            let e = 1200.0;
            let d: f64 = 300.0;
            (codec.header_bits + codec.key_weight * 0.5 * (e / d).log2(), d)
        };
        assert_eq!(mse, 300.0);
        assert!((bits - codec.header_bits - codec.key_weight).abs() < 1e-9);

        let qp = qp_for_quant_mse(300.0).round() as u8;
        let state = EncodeState::new(key_video(1200.0), 512.0, codec).unwrap();
        let r = state.encode_frame(qp).unwrap();
        let step = qp_to_stepsize(qp as i64).unwrap();
        assert_eq!(r.mse, step * step / 12.0);
        let expect = codec.header_bits + codec.key_weight * 0.5 * (1200.0 / r.mse).log2();
        assert!((r.bits - expect).abs() < 1e-9);
    }

    #[test]
    fn saturated_qp_costs_only_header() {
        let codec = CodecConfig::default();
        let state = EncodeState::new(key_video(3000.0), 512.0, codec).unwrap();
        let r = state.encode_frame(255).unwrap();
        assert_eq!(r.mse, 3000.0);
        assert_eq!(r.bits, codec.header_bits);
    }

    #[test]
    fn inter_frame_energy_tracks_reference_distortion() {
        let codec = CodecConfig::default();
        let video = Arc::new(
            VideoSpec::new(
                "p",
                vec![frame(0, FrameKind::Key, 800.0, 0.0), frame(1, FrameKind::Inter, 400.0, 0.5)],
                30.0,
            )
            .unwrap(),
        );
        // Independent re-evaluation of the model.
        let oracle = |d_ref: f64, qp: u8| {
            let e = 400.0 * (1.0 + 0.5 * d_ref / 100.0);
            let step = 0.5 * 2f64.powf(10.0 * qp as f64 / 255.0);
            let d = (step * step / 12.0).min(e);
            let bits = if d < e { 200.0 + 8000.0 * 0.5 * (e / d).log2() } else { 200.0 };
            (e, bits, d)
        };
        let fake = |d_ref: f64| FrameResult { qp: 0, bits: 1.0, mse: d_ref, psnr_db: psnr_from_mse(d_ref) };
        for qp in [0u8, 40, 90, 140] {
            let s200 = EncodeState::from_results(video.clone(), 512.0, codec, &[fake(200.0)]).unwrap();
            let s20 = EncodeState::from_results(video.clone(), 512.0, codec, &[fake(20.0)]).unwrap();
            let (e200, b200, d200) = oracle(200.0, qp);
            let (e20, b20, d20) = oracle(20.0, qp);
            assert!((e200 / e20 - 2.0 / 1.1).abs() < 1e-12);
            let r200 = s200.encode_frame(qp).unwrap();
            let r20 = s20.encode_frame(qp).unwrap();
            assert!((r200.bits - b200).abs() < 1e-9 && (r200.mse - d200).abs() < 1e-12);
            assert!((r20.bits - b20).abs() < 1e-9 && (r20.mse - d20).abs() < 1e-12);
        }
    }

    #[test]
    fn step_counts_and_bit_sums() {
        let codec = CodecConfig::default();
        let mut one = EncodeState::new(key_video(500.0), 300.0, codec).unwrap();
        assert!(one.step(17).unwrap());
        assert!(matches!(one.step(17), Err(Error::State(_))));

        let frames: Vec<_> = (0..7)
            .map(|i| frame(i, if i == 0 { FrameKind::Key } else { FrameKind::Inter }, 100.0 + 50.0 * i as f64, 0.4))
            .collect();
        let video = Arc::new(VideoSpec::new("n", frames, 30.0).unwrap());
        let mut state = EncodeState::new(video, 400.0, codec).unwrap();
        let mut running = 0.0;
        for k in 0..7 {
            let done = state.step((k * 20) as u8).unwrap();
            running += state.results()[k].bits;
            assert_eq!(state.bits_used(), running);
            assert_eq!(done, k == 6);
        }
    }

    #[test]
    fn episode_metrics_hand_arithmetic() {
        let codec = CodecConfig::default();
        let video = Arc::new(
            VideoSpec::new(
                "m",
                vec![frame(0, FrameKind::Key, 1000.0, 0.0), frame(1, FrameKind::Inter, 1000.0, 0.3)],
                1.0,
            )
            .unwrap(),
        );
        let r = |mse: f64, bits: f64| FrameResult { qp: 0, bits, mse, psnr_db: psnr_from_mse(mse) };
        let state = EncodeState::from_results(video.clone(), 256.0, codec, &[r(100.0, 200_000.0), r(300.0, 312_000.0)]).unwrap();
        let m = state.episode_metrics().unwrap();
        assert_eq!(m.mean_psnr_db, 10.0 * (255.0f64 * 255.0 / 200.0).log10());
        assert_eq!(m.bitrate_kbps, 256.0);
        assert_eq!(m.overshoot_kbps, 0.0);

        let peak = 255.0 * 255.0;
        let all = |mse| EncodeState::from_results(video.clone(), 256.0, codec, &[r(mse, 1.0), r(mse, 1.0)]).unwrap();
        assert!(all(peak).episode_metrics().unwrap().mean_psnr_db.abs() < 1e-12);
        assert!((all(peak / 10.0).episode_metrics().unwrap().mean_psnr_db - 10.0).abs() < 1e-12);

        let partial = EncodeState::from_results(video, 256.0, codec, &[r(1.0, 1.0)]).unwrap();
        assert!(matches!(partial.episode_metrics(), Err(Error::State(_))));
    }

    #[test]
    fn hidden_frames_cost_bits_but_not_quality() {
        let codec = CodecConfig::default();
        let mut arf = frame(1, FrameKind::ArfHidden, 900.0, 0.5);
        arf.ref_index = Some(0);
        let video = Arc::new(
            VideoSpec::new("h", vec![frame(0, FrameKind::Key, 500.0, 0.0), arf, frame(2, FrameKind::Inter, 400.0, 0.5)], 1.0)
                .unwrap(),
        );
        assert_eq!(video.duration_s, 2.0);
        let state = run_episode(video, 300.0, codec, &[50, 255, 50]).unwrap();
        let res = state.results();
        let m = state.episode_metrics().unwrap();
        assert_eq!(m.mean_psnr_db, psnr_from_mse((res[0].mse + res[2].mse) / 2.0));
        assert_eq!(m.bitrate_kbps, (res[0].bits + res[1].bits + res[2].bits) / 2000.0);
    }

    #[test]
    fn rejects_malformed_videos() {
        let mut bad_key = frame(0, FrameKind::Key, 10.0, 0.0);
        bad_key.motion_coupling = 0.2;
        assert!(VideoSpec::new("a", vec![bad_key], 30.0).is_err());
        assert!(VideoSpec::new("b", vec![frame(0, FrameKind::Inter, 10.0, 0.2)], 30.0).is_err());
        let mut fwd = frame(1, FrameKind::Inter, 10.0, 0.2);
        fwd.ref_index = Some(1);
        assert!(VideoSpec::new("c", vec![frame(0, FrameKind::Key, 10.0, 0.0), fwd], 30.0).is_err());
    }
}
