//! Episode returns: self-competition against per-(video, target) moving
//! averages, its overshoot-augmented variant, and a Lagrangian-relaxation
//! alternative.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::codec_sim::corpus::{read_json, write_json};
use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_PSNR_INIT: f64 = 30.0;
/// Overshoot penalty (dB per kbps) of the augmented score.
pub const AUGMENTED_OVERSHOOT_WEIGHT: f64 = 0.005;

pub const SNAPSHOT_SCHEMA: &str = "ratectl.ema/1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmaKey {
    pub video_id: String,
    /// Target bitrate in whole kbps.
    pub target_kbps: u32,
}

impl EmaKey {
    pub fn new(video_id: impl Into<String>, target_kbps: f64) -> Self {
        EmaKey {
            video_id: video_id.into(),
            target_kbps: target_kbps.round() as u32,
        }
    }

    fn encode(&self) -> String {
        format!("{}:{}", self.video_id, self.target_kbps)
    }

    fn decode(s: &str) -> Result<Self> {
        let (id, t) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Format(format!("bad ema key {s:?}")))?;
        let target_kbps = t
            .parse()
            .map_err(|_| Error::Format(format!("bad ema key target {s:?}")))?;
        Ok(EmaKey {
            video_id: id.to_string(),
            target_kbps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaEntry {
    pub psnr_ema: f64,
    pub overshoot_ema: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardMode {
    SelfCompete,
    Augmented,
    Lagrangian {
        lambda: f64,
        /// Per dB.
        psnr_scale: f64,
        /// Per kbps.
        overshoot_scale: f64,
    },
}

impl RewardMode {
    pub fn lagrangian(lambda: f64) -> Self {
        RewardMode::Lagrangian {
            lambda,
            psnr_scale: 1.0 / 40.0,
            overshoot_scale: 1.0 / 256.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RewardMode::Lagrangian {
            lambda,
            psnr_scale,
            overshoot_scale,
        } = *self
        {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
            }
            if !(psnr_scale > 0.0 && overshoot_scale > 0.0) {
                return Err(Error::Config("lagrangian scales must be positive".into()));
            }
        }
        Ok(())
    }

    /// Returns are confined to [-1, 1] in the self-competition variants.
    pub fn bounded(&self) -> bool {
        !matches!(self, RewardMode::Lagrangian { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            RewardMode::SelfCompete => "self-compete",
            RewardMode::Augmented => "augmented",
            RewardMode::Lagrangian { .. } => "lagrangian",
        }
    }
}

/// +1 if the episode beats the historical baseline, −1 otherwise. Constraint
/// satisfaction is compared first; PSNR only decides when neither the episode
/// nor the baseline overshoots. Ties count as wins.
pub fn self_competition_return(p_ep: f64, o_ep: f64, p_ema: f64, o_ema: f64) -> Result<f64> {
    ensure_finite("episode psnr", p_ep)?;
    ensure_finite("episode overshoot", o_ep)?;
    ensure_finite("ema psnr", p_ema)?;
    ensure_finite("ema overshoot", o_ema)?;
    let win = if o_ep > 0.0 || o_ema > 0.0 {
        o_ep <= o_ema
    } else {
        p_ep >= p_ema
    };
    Ok(if win { 1.0 } else { -1.0 })
}

/// Quantity compared (and averaged) in the PSNR slot.
pub fn score_for_mode(mode: &RewardMode, p_ep: f64, o_ep: f64) -> f64 {
    match mode {
        RewardMode::Augmented => p_ep - AUGMENTED_OVERSHOOT_WEIGHT * o_ep,
        _ => p_ep,
    }
}

/// Per-key exponential moving averages of PSNR and overshoot.
///
/// Each key owns its own lock, so actors working on distinct keys never wait
/// on each other; the outer map lock is only taken exclusively to insert a new
/// key.
#[derive(Debug)]
pub struct EmaBuffer {
    alpha: f64,
    psnr_init: f64,
    entries: RwLock<HashMap<EmaKey, Arc<Mutex<EmaEntry>>>>,
}

impl Default for EmaBuffer {
    fn default() -> Self {
        EmaBuffer::new(DEFAULT_ALPHA, DEFAULT_PSNR_INIT).expect("defaults are valid")
    }
}

impl Clone for EmaBuffer {
    fn clone(&self) -> Self {
        let copy = EmaBuffer::new(self.alpha, self.psnr_init).expect("validated on construction");
        {
            let mut dst = copy.entries.write().unwrap();
            for (k, v) in self.entries.read().unwrap().iter() {
                dst.insert(k.clone(), Arc::new(Mutex::new(*v.lock().unwrap())));
            }
        }
        copy
    }
}

impl EmaBuffer {
    pub fn new(alpha: f64, psnr_init: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("ema alpha must lie in (0, 1], got {alpha}")));
        }
        ensure_finite("psnr_init", psnr_init)?;
        Ok(EmaBuffer {
            alpha,
            psnr_init,
            entries: RwLock::new(HashMap::new()),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn psnr_init(&self) -> f64 {
        self.psnr_init
    }

    fn initial(&self) -> EmaEntry {
        EmaEntry {
            psnr_ema: self.psnr_init,
            overshoot_ema: 0.0,
        }
    }

    pub fn get(&self, key: &EmaKey) -> EmaEntry {
        self.entries
            .read()
            .unwrap()
            .get(key)
            .map_or_else(|| self.initial(), |e| *e.lock().unwrap())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, key: &EmaKey) -> Arc<Mutex<EmaEntry>> {
        if let Some(e) = self.entries.read().unwrap().get(key) {
            return e.clone();
        }
        self.entries
            .write()
            .unwrap()
            .entry(key.clone())
            .or_insert_with(|| Arc::new(Mutex::new(self.initial())))
            .clone()
    }

    fn blend(&self, entry: &mut EmaEntry, p: f64, o: f64) {
        let a = self.alpha;
        entry.psnr_ema = (1.0 - a) * entry.psnr_ema + a * p;
        entry.overshoot_ema = (1.0 - a) * entry.overshoot_ema + a * o;
    }

    pub fn update_ema(&self, key: &EmaKey, p_ep: f64, o_ep: f64) -> Result<()> {
        ensure_finite("episode psnr", p_ep)?;
        ensure_finite("episode overshoot", o_ep)?;
        let slot = self.slot(key);
        let mut entry = slot.lock().unwrap();
        self.blend(&mut entry, p_ep, o_ep);
        Ok(())
    }

    /// Computes the episode's return against the baseline as it stood before
    /// this episode, then folds the episode into the baseline. The whole
    /// sequence runs under the key's lock.
    pub fn episode_return(&self, key: &EmaKey, p_ep: f64, o_ep: f64, mode: &RewardMode) -> Result<f64> {
        ensure_finite("episode psnr", p_ep)?;
        ensure_finite("episode overshoot", o_ep)?;
        let slot = self.slot(key);
        let mut entry = slot.lock().unwrap();
        let score = score_for_mode(mode, p_ep, o_ep);
        let ret = match *mode {
            RewardMode::SelfCompete | RewardMode::Augmented => {
                self_competition_return(score, o_ep, entry.psnr_ema, entry.overshoot_ema)?
            }
            RewardMode::Lagrangian {
                lambda,
                psnr_scale,
                overshoot_scale,
            } => psnr_scale * p_ep - lambda * overshoot_scale * o_ep.max(0.0),
        };
        self.blend(&mut entry, score, o_ep);
        Ok(ret)
    }

    pub fn snapshot(&self) -> EmaSnapshot {
        let entries = self
            .entries
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.encode(), *v.lock().unwrap()))
            .collect();
        EmaSnapshot {
            schema: SNAPSHOT_SCHEMA.into(),
            alpha: self.alpha,
            psnr_init: self.psnr_init,
            entries,
        }
    }

    pub fn restore(snapshot: &EmaSnapshot) -> Result<Self> {
        if snapshot.schema != SNAPSHOT_SCHEMA {
            return Err(Error::Format(format!("unsupported ema schema {}", snapshot.schema)));
        }
        let buf = EmaBuffer::new(snapshot.alpha, snapshot.psnr_init)?;
        {
            let mut map = buf.entries.write().unwrap();
            for (k, v) in &snapshot.entries {
                map.insert(EmaKey::decode(k)?, Arc::new(Mutex::new(*v)));
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.snapshot())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EmaBuffer::restore(&read_json(path)?)
    }
}

/// Serialized buffer, keyed by `"video_id:target_kbps"` in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSnapshot {
    pub schema: String,
    pub alpha: f64,
    pub psnr_init: f64,
    pub entries: BTreeMap<String, EmaEntry>,
}
