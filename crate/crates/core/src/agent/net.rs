//! Representation, dynamics and prediction networks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{LayerNorm, Linear, ParamSet, Tape, Var};
use crate::codec_sim::features::{LOG_BITS_SCALE, LOG_COMPLEXITY_MAX, LOG_COMPLEXITY_MIN, PSNR_SCALE};
use crate::codec_sim::{FrameKind, ObservationBundle, QP_MAX};
use crate::error::{Error, Result};

/// Number of auxiliary regression heads: last-frame PSNR, last-frame log
/// bits, final episode PSNR, final episode bitrate.
pub const AUX_HEADS: usize = 4;

const NEXT_FEATURES: usize = 7;
const SLOT_FEATURES: usize = 12;
const SUMMARY_FEATURES: usize = 7;
const SCALAR_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub embedding_dim: usize,
    pub action_bins: usize,
    pub quantiles: usize,
    /// Frames around the next one whose first-pass and history rows are fed
    /// individually.
    pub window: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub repr_blocks: usize,
    pub dyn_blocks: usize,
    /// Clip the value estimate into [−1, 1] when it is read; off for
    /// unbounded (Lagrangian) returns. Quantiles themselves stay linear so
    /// that ±1 targets cannot saturate them.
    pub bounded_value: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            embedding_dim: 64,
            action_bins: 256,
            quantiles: 8,
            window: 16,
            hidden: 64,
            head_hidden: 64,
            repr_blocks: 2,
            dyn_blocks: 2,
            bounded_value: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("net config: {m}")));
        if self.action_bins == 0 || 256 % self.action_bins != 0 {
            return bad(format!("action_bins {} must divide 256", self.action_bins));
        }
        if self.quantiles < 2 {
            return bad("need at least 2 quantiles".into());
        }
        if self.embedding_dim == 0 || self.hidden == 0 || self.head_hidden == 0 || self.window == 0 {
            return bad("layer widths and window must be positive".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        NEXT_FEATURES + SLOT_FEATURES * self.window + SUMMARY_FEATURES + SCALAR_FEATURES
    }

    /// QPs covered by one action bin.
    pub fn bin_width(&self) -> usize {
        256 / self.action_bins
    }

    /// Middle QP of a bin (lower middle for even widths).
    pub fn bin_to_qp(&self, bin: usize) -> u8 {
        let w = self.bin_width();
        (bin * w + (w - 1) / 2).min(QP_MAX as usize) as u8
    }

    pub fn qp_to_bin(&self, qp: u8) -> usize {
        qp as usize / self.bin_width()
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    n1: LayerNorm,
    l1: Linear,
    n2: LayerNorm,
    l2: Linear,
}

impl Block {
    fn new(p: &mut ParamSet, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Block {
            n1: LayerNorm::new(p, &format!("{name}/ln1"), dim),
            l1: Linear::new(p, &format!("{name}/fc1"), dim, dim, 1.0, rng),
            n2: LayerNorm::new(p, &format!("{name}/ln2"), dim),
            l2: Linear::new(p, &format!("{name}/fc2"), dim, dim, 0.5, rng),
        }
    }

    /// Pre-activation residual block: x + fc2(relu(ln2(fc1(relu(ln1(x)))))).
    fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let h = t.layer_norm(x, self.n1);
        let h = t.relu(h);
        let h = t.linear(h, self.l1);
        let h = t.layer_norm(h, self.n2);
        let h = t.relu(h);
        let h = t.linear(h, self.l2);
        t.add(x, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Head {
    l1: Linear,
    n1: LayerNorm,
    l2: Linear,
    n2: LayerNorm,
    out: Linear,
}

impl Head {
    fn new(p: &mut ParamSet, name: &str, dim: usize, hidden: usize, outputs: usize, out_gain: f64, rng: &mut impl Rng) -> Self {
        Head {
            l1: Linear::new(p, &format!("{name}/fc1"), dim, hidden, 1.0, rng),
            n1: LayerNorm::new(p, &format!("{name}/ln1"), hidden),
            l2: Linear::new(p, &format!("{name}/fc2"), hidden, hidden, 1.0, rng),
            n2: LayerNorm::new(p, &format!("{name}/ln2"), hidden),
            out: Linear::new(p, &format!("{name}/out"), hidden, outputs, out_gain, rng),
        }
    }

    fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let h = t.linear(x, self.l1);
        let h = t.layer_norm(h, self.n1);
        let h = t.relu(h);
        let h = t.linear(h, self.l2);
        let h = t.layer_norm(h, self.n2);
        let h = t.relu(h);
        t.linear(h, self.out)
    }
}

/// Parameter layout of the three subnetworks.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    repr_in: Linear,
    repr_norm: LayerNorm,
    repr_out: Linear,
    repr_blocks: Vec<Block>,
    dyn_embed: Linear,
    dyn_norm: LayerNorm,
    dyn_out: Linear,
    dyn_blocks: Vec<Block>,
    policy: Head,
    value: Head,
    aux: [Head; AUX_HEADS],
}

impl Network {
    fn build(config: &NetConfig, p: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let e = config.embedding_dim;
        let h = config.hidden;
        let hh = config.head_hidden;
        let nq = config.quantiles;
        let aux_names = ["aux_last_psnr", "aux_last_log_bits", "aux_final_psnr", "aux_final_bitrate"];
        Network {
            config: config.clone(),
            repr_in: Linear::new(p, "repr/fc1", config.input_dim(), h, 1.0, rng),
            repr_norm: LayerNorm::new(p, "repr/ln1", h),
            repr_out: Linear::new(p, "repr/fc2", h, e, 1.0, rng),
            repr_blocks: (0..config.repr_blocks)
                .map(|i| Block::new(p, &format!("repr/block{i}"), e, rng))
                .collect(),
            dyn_embed: Linear::new(p, "dyn/action_fc1", config.action_bins, h, 1.0, rng),
            dyn_norm: LayerNorm::new(p, "dyn/action_ln1", h),
            dyn_out: Linear::new(p, "dyn/action_fc2", h, e, 1.0, rng),
            dyn_blocks: (0..config.dyn_blocks)
                .map(|i| Block::new(p, &format!("dyn/block{i}"), e, rng))
                .collect(),
            policy: Head::new(p, "pred/policy", e, hh, config.action_bins, 0.1, rng),
            value: Head::new(p, "pred/value", e, hh, nq, 0.1, rng),
            aux: aux_names.map(|n| Head::new(p, &format!("pred/{n}"), e, hh, nq, 0.1, rng)),
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn represent(&self, t: &mut Tape, features: Vec<f64>) -> Var {
        let x = t.input(features);
        let h = t.linear(x, self.repr_in);
        let h = t.layer_norm(h, self.repr_norm);
        let h = t.relu(h);
        let mut s = t.linear(h, self.repr_out);
        for b in &self.repr_blocks {
            s = b.apply(t, s);
        }
        s
    }

    pub fn dynamics(&self, t: &mut Tape, state: Var, action: usize) -> Var {
        let a = t.embed(self.dyn_embed, action);
        let a = t.layer_norm(a, self.dyn_norm);
        let a = t.relu(a);
        let a = t.linear(a, self.dyn_out);
        let mut s = t.add(state, a);
        for b in &self.dyn_blocks {
            s = b.apply(t, s);
        }
        s
    }

    pub fn predict(&self, t: &mut Tape, state: Var) -> PredictionVars {
        let policy = self.policy.apply(t, state);
        let value = self.value.apply(t, state);
        let aux = [0, 1, 2, 3].map(|i| self.aux[i].apply(t, state));
        PredictionVars { policy, value, aux }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub policy: Var,
    pub value: Var,
    pub aux: [Var; AUX_HEADS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub policy_logits: Vec<f64>,
    pub value_quantiles: Vec<f64>,
    pub aux_quantiles: [Vec<f64>; AUX_HEADS],
    /// Clip `value()` into [−1, 1].
    pub bounded: bool,
}

impl Prediction {
    fn read(t: &Tape, v: &PredictionVars, bounded: bool) -> Self {
        Prediction {
            policy_logits: t.value(v.policy).to_vec(),
            value_quantiles: t.value(v.value).to_vec(),
            aux_quantiles: v.aux.map(|a| t.value(a).to_vec()),
            bounded,
        }
    }

    pub fn policy(&self) -> Vec<f64> {
        super::nn::softmax(&self.policy_logits)
    }

    /// Point estimate: mean of the quantiles.
    pub fn value(&self) -> f64 {
        let mean = self.value_quantiles.iter().sum::<f64>() / self.value_quantiles.len() as f64;
        if self.bounded {
            mean.clamp(-1.0, 1.0)
        } else {
            mean
        }
    }
}

/// Weights of all subnetworks plus their layout.
#[derive(Debug, Clone)]
pub struct AgentParams {
    pub net: Network,
    pub params: ParamSet,
}

impl PartialEq for AgentParams {
    fn eq(&self, other: &Self) -> bool {
        self.net.config == other.net.config && self.params == other.params
    }
}

impl AgentParams {
    pub fn init(config: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let net = Network::build(config, &mut params, rng);
        Ok(AgentParams { net, params })
    }

    /// Wraps externally supplied tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_tensors(config: &NetConfig, params: ParamSet) -> Result<Self> {
        let layout = AgentParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if layout.params.tensors.len() != params.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                layout.params.tensors.len(),
                params.tensors.len()
            )));
        }
        for (want, got) in layout.params.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len() {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match layout {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::Config("non-finite weights".into()));
        }
        Ok(AgentParams { net: layout.net, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn zeroed(config: &NetConfig) -> Result<Self> {
        let mut p = AgentParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.params.flat_mut().for_each(|v| *v = 0.0);
        Ok(p)
    }
}

/// Hidden state produced by the representation or dynamics network.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

pub fn represent(obs: &ObservationBundle, params: &AgentParams) -> Result<Embedding> {
    let features = observation_features(obs, params.config());
    let mut t = Tape::new(&params.params);
    let s = params.net.represent(&mut t, features);
    Ok(Embedding(t.value(s).to_vec()))
}

pub fn dynamics(state: &Embedding, action: usize, params: &AgentParams) -> Result<Embedding> {
    let cfg = params.config();
    if state.0.len() != cfg.embedding_dim {
        return Err(Error::Config(format!(
            "embedding has {} units, network expects {}",
            state.0.len(),
            cfg.embedding_dim
        )));
    }
    if action >= cfg.action_bins {
        return Err(Error::InputDomain(format!("action {action} >= {}", cfg.action_bins)));
    }
    let mut t = Tape::new(&params.params);
    let s = t.input(state.0.clone());
    let s = params.net.dynamics(&mut t, s, action);
    Ok(Embedding(t.value(s).to_vec()))
}

pub fn predict(state: &Embedding, params: &AgentParams) -> Result<Prediction> {
    if state.0.len() != params.config().embedding_dim {
        return Err(Error::Config("embedding width does not match network".into()));
    }
    let mut t = Tape::new(&params.params);
    let s = t.input(state.0.clone());
    let v = params.net.predict(&mut t, s);
    Ok(Prediction::read(&t, &v, params.config().bounded_value))
}

/// Representation input: next-frame row, a window of aligned first-pass and
/// history rows centred on the next frame, summaries of the whole sequences,
/// and scalar features.
pub fn observation_features(obs: &ObservationBundle, cfg: &NetConfig) -> Vec<f64> {
    let n = obs.frame_count();
    let next = obs.next_index;
    let rows = &obs.first_pass.rows;
    let mut x = Vec::with_capacity(cfg.input_dim());

    x.extend(rows[next].normalized());
    x.extend(obs.next_kind.one_hot());

    let start = next as isize - (cfg.window / 2) as isize;
    for s in 0..cfg.window {
        let j = start + s as isize;
        if j < 0 || j as usize >= n {
            x.extend([0.0; SLOT_FEATURES]);
            continue;
        }
        let j = j as usize;
        x.push(1.0);
        x.extend(rows[j].normalized());
        x.extend(obs.kinds[j].one_hot());
        match obs.history.get(j) {
            Some(h) => {
                x.push(1.0);
                x.extend(h.normalized());
            }
            None => x.extend([0.0; 4]),
        }
    }

    let norm_lc = |lc: f64| (lc - LOG_COMPLEXITY_MIN) / (LOG_COMPLEXITY_MAX - LOG_COMPLEXITY_MIN);
    let mean_max = |it: &mut dyn Iterator<Item = f64>| {
        let (s, m, c) = it.fold((0.0, f64::NEG_INFINITY, 0usize), |(s, m, c), v| (s + v, m.max(v), c + 1));
        if c == 0 {
            (0.0, 0.0)
        } else {
            (s / c as f64, m)
        }
    };
    let (all_mean, all_max) = mean_max(&mut rows.iter().map(|r| norm_lc(r.log_complexity)));
    let (rem_mean, rem_max) = mean_max(&mut rows[next..].iter().map(|r| norm_lc(r.log_complexity)));
    let remaining = n - next;
    let rem_keys = rows[next..].iter().filter(|r| r.is_key > 0.0).count() as f64 / remaining as f64;
    let rem_coupling = rows[next..].iter().map(|r| r.motion_coupling).sum::<f64>() / remaining as f64;
    let shown: Vec<f64> = obs
        .history
        .iter()
        .filter(|h| obs.kinds[h.index] != FrameKind::ArfHidden)
        .map(|h| h.psnr_db)
        .collect();
    let mean_psnr = if shown.is_empty() {
        0.0
    } else {
        shown.iter().sum::<f64>() / shown.len() as f64 / PSNR_SCALE
    };
    x.extend([all_mean, all_max, rem_mean, rem_max, rem_keys, rem_coupling, mean_psnr]);

    let total_show = obs.kinds.iter().filter(|k| **k != FrameKind::ArfHidden).count();
    let budget_bits = obs.target_kbps * 1000.0 * obs.duration_s;
    let left_bits = (budget_bits * (1.0 - obs.budget_fraction_used)).max(1.0);
    x.extend([
        obs.target_feature(),
        obs.duration_feature(),
        obs.budget_fraction_used,
        next as f64 / n as f64,
        obs.show_remaining() as f64 / total_show as f64,
        (left_bits / remaining as f64).ln() / LOG_BITS_SCALE,
    ]);
    debug_assert_eq!(x.len(), cfg.input_dim());
    x
}
