//! First-pass statistics and per-step observations.
//!
//! Normalization constants (applied by the `*_feature` accessors):
//!
//! | quantity            | raw unit  | normalized                              |
//! |---------------------|-----------|-----------------------------------------|
//! | log-complexity      | ln(MSE)   | (ln c − ln 10) / (ln 3000 − ln 10)      |
//! | PSNR                | dB        | psnr / 50                               |
//! | log bits            | ln(bits)  | ln(bits) / 16                           |
//! | QP                  | 0..=255   | qp / 255                                |
//! | target bitrate      | kbps      | (t − 256) / (768 − 256)                 |
//! | duration            | seconds   | (d − 3) / (7 − 3)                       |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EncodeState, FrameKind, VideoSpec, TARGET_MAX_KBPS, TARGET_MIN_KBPS};
use crate::error::{Error, Result};

pub const LOG_COMPLEXITY_MIN: f64 = std::f64::consts::LN_10;
pub const LOG_COMPLEXITY_MAX: f64 = 8.006_367_567_650_246; // ln 3000
pub const PSNR_SCALE: f64 = 50.0;
pub const LOG_BITS_SCALE: f64 = 16.0;
pub const DURATION_MIN_S: f64 = 3.0;
pub const DURATION_MAX_S: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstPassRow {
    pub complexity: f64,
    pub motion_coupling: f64,
    pub is_key: f64,
    pub log_complexity: f64,
    pub norm_index: f64,
}

impl FirstPassRow {
    pub fn normalized(&self) -> [f64; 4] {
        [
            (self.log_complexity - LOG_COMPLEXITY_MIN) / (LOG_COMPLEXITY_MAX - LOG_COMPLEXITY_MIN),
            self.motion_coupling,
            self.is_key,
            self.norm_index,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstPassStats {
    pub rows: Vec<FirstPassRow>,
}

/// First-pass analog: one feature row per frame, read straight from the
/// generator parameters.
pub fn first_pass(video: &VideoSpec) -> FirstPassStats {
    let n = video.frames.len();
    let denom = n.saturating_sub(1).max(1) as f64;
    FirstPassStats {
        rows: video
            .frames
            .iter()
            .map(|f| FirstPassRow {
                complexity: f.complexity,
                motion_coupling: f.motion_coupling,
                is_key: if f.kind == FrameKind::Key { 1.0 } else { 0.0 },
                log_complexity: f.complexity.ln(),
                norm_index: f.index as f64 / denom,
            })
            .collect(),
    }
}

/// Encoder feedback for one already-coded frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub index: usize,
    pub psnr_db: f64,
    /// Natural log of the frame's bits.
    pub log_bits: f64,
    pub qp: u8,
}

impl HistoryRow {
    pub fn normalized(&self) -> [f64; 3] {
        [
            self.psnr_db / PSNR_SCALE,
            self.log_bits / LOG_BITS_SCALE,
            self.qp as f64 / 255.0,
        ]
    }
}

/// Everything the agent sees before choosing the next QP.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub first_pass: Arc<FirstPassStats>,
    pub kinds: Arc<[FrameKind]>,
    pub history: Vec<HistoryRow>,
    pub next_index: usize,
    pub next_kind: FrameKind,
    pub duration_s: f64,
    pub target_kbps: f64,
    pub budget_fraction_used: f64,
}

impl ObservationBundle {
    pub(crate) fn from_state(state: &EncodeState, first_pass: Arc<FirstPassStats>) -> Result<Self> {
        let video = state.video();
        let Some(next) = video.frames.get(state.next_index()) else {
            return Err(Error::State("no observation for a finished episode".into()));
        };
        if first_pass.rows.len() != video.frames.len() {
            return Err(Error::InputDomain("first-pass table does not match video".into()));
        }
        Ok(ObservationBundle {
            first_pass,
            kinds: video.frames.iter().map(|f| f.kind).collect(),
            history: state
                .results()
                .iter()
                .enumerate()
                .map(|(index, r)| HistoryRow {
                    index,
                    psnr_db: r.psnr_db,
                    log_bits: r.bits.ln(),
                    qp: r.qp,
                })
                .collect(),
            next_index: state.next_index(),
            next_kind: next.kind,
            duration_s: video.duration_s,
            target_kbps: state.target_kbps(),
            budget_fraction_used: state.budget_fraction_used(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.first_pass.rows.len()
    }

    pub fn target_feature(&self) -> f64 {
        (self.target_kbps - TARGET_MIN_KBPS) / (TARGET_MAX_KBPS - TARGET_MIN_KBPS)
    }

    pub fn duration_feature(&self) -> f64 {
        (self.duration_s - DURATION_MIN_S) / (DURATION_MAX_S - DURATION_MIN_S)
    }

    pub fn show_remaining(&self) -> usize {
        self.kinds[self.next_index..]
            .iter()
            .filter(|k| **k != FrameKind::ArfHidden)
            .count()
    }
}
