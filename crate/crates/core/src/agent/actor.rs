//! Acting: self-play episodes with search, and greedy evaluation.

use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::mcts::{mcts_search, LearnedModel, SearchConfig};
use super::net::{self, AgentParams};
use crate::codec_sim::{first_pass, CodecConfig, EncodeState, EpisodeResult, FrameResult, ObservationBundle, VideoSpec};
use crate::error::{Error, Result};
use crate::reward::{EmaBuffer, EmaKey, RewardMode};

/// Number of dynamics steps unrolled per training position.
pub const UNROLL_STEPS: usize = 5;

/// Auxiliary label order: last-frame PSNR, ln last-frame bits, final episode
/// PSNR, final episode bitrate (kbps). Raw units; the loss normalizes.
pub type AuxLabels = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: ObservationBundle,
    pub policy_target: Vec<f64>,
    pub value_target: f64,
    pub aux_targets: AuxLabels,
    /// Actions taken at this position and the next four; `None` past the end
    /// of the episode (absorbing padding, masked in the loss).
    pub actions: [Option<u16>; UNROLL_STEPS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub video_id: String,
    pub target_kbps: f64,
    pub result: EpisodeResult,
    pub transitions: Vec<Transition>,
}

/// Compact serialized episode; observations are rebuilt from the video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEpisode {
    pub video_id: String,
    pub target_kbps: f64,
    pub frames: Vec<FrameResult>,
    pub actions: Vec<u16>,
    pub policy_targets: Vec<Vec<f64>>,
    pub value_target: f64,
}

impl Episode {
    /// Assembles transitions from a finished encode.
    pub fn from_trajectory(
        state: &EncodeState,
        actions: &[u16],
        policy_targets: Vec<Vec<f64>>,
        value_target: f64,
    ) -> Result<Self> {
        let result = state.episode_metrics()?;
        let n = state.results().len();
        if actions.len() != n || policy_targets.len() != n {
            return Err(Error::InputDomain("trajectory lengths disagree".into()));
        }
        let fp = Arc::new(first_pass(state.video()));
        let mut replay = EncodeState::new(state.video().clone(), state.target_kbps(), *state.codec())?;
        let mut transitions = Vec::with_capacity(n);
        for (t, policy_target) in policy_targets.into_iter().enumerate() {
            let observation = replay.observation_with(fp.clone())?;
            let last = t.checked_sub(1).map(|i| state.results()[i]);
            transitions.push(Transition {
                observation,
                policy_target,
                value_target,
                aux_targets: [
                    last.map_or(0.0, |r| r.psnr_db),
                    last.map_or(0.0, |r| r.bits.ln()),
                    result.mean_psnr_db,
                    result.bitrate_kbps,
                ],
                actions: std::array::from_fn(|k| actions.get(t + k).copied()),
            });
            replay.step(state.results()[t].qp)?;
        }
        Ok(Episode {
            video_id: state.video().id.clone(),
            target_kbps: state.target_kbps(),
            result,
            transitions,
        })
    }

    pub fn to_stored(&self, frames: &[FrameResult]) -> StoredEpisode {
        StoredEpisode {
            video_id: self.video_id.clone(),
            target_kbps: self.target_kbps,
            frames: frames.to_vec(),
            actions: self.transitions.iter().map(|t| t.actions[0].unwrap_or(0)).collect(),
            policy_targets: self.transitions.iter().map(|t| t.policy_target.clone()).collect(),
            value_target: self.transitions.first().map_or(0.0, |t| t.value_target),
        }
    }

    pub fn from_stored(stored: &StoredEpisode, video: Arc<VideoSpec>, codec: CodecConfig) -> Result<Self> {
        if video.id != stored.video_id {
            return Err(Error::Format(format!("episode for {} given video {}", stored.video_id, video.id)));
        }
        let state = EncodeState::from_results(video, stored.target_kbps, codec, &stored.frames)?;
        Episode::from_trajectory(&state, &stored.actions, stored.policy_targets.clone(), stored.value_target)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Acting temperature, decayed log-linearly from `start` to `end` over
/// `decay_steps` learner steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: 20_000,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.decay_steps as f64).min(1.0);
        self.start * (self.end / self.start).powf(frac)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one self-play episode.
#[derive(Debug, Clone)]
pub struct ActedEpisode {
    pub episode: Episode,
    pub frames: Vec<FrameResult>,
    pub episode_return: f64,
}

/// Plays one episode with search, samples actions from visit counts at
/// `temperature`, scores it through the EMA buffer and labels every
/// transition with the same return.
#[allow(clippy::too_many_arguments)]
pub fn act_episode(
    video: &Arc<VideoSpec>,
    target_kbps: f64,
    codec: CodecConfig,
    params: &AgentParams,
    search: &SearchConfig,
    temperature: f64,
    ema: &EmaBuffer,
    mode: &RewardMode,
    rng: &mut dyn RngCore,
) -> Result<ActedEpisode> {
    let cfg = params.config();
    let mut state = EncodeState::new(video.clone(), target_kbps, codec)?;
    let fp = Arc::new(first_pass(video));
    let model = LearnedModel { params };
    let mut actions = Vec::with_capacity(video.frames.len());
    let mut targets = Vec::with_capacity(video.frames.len());
    while !state.is_done() {
        let obs = state.observation_with(fp.clone())?;
        let found = mcts_search(&obs, &model, search, Some(&mut *rng))?;
        let acting = super::mcts::visit_distribution(&found.visits, temperature);
        let action = WeightedIndex::new(&acting)
            .map_err(|e| Error::State(format!("visit distribution: {e}")))?
            .sample(rng);
        actions.push(action as u16);
        targets.push(found.policy_target);
        state.step(cfg.bin_to_qp(action))?;
    }
    let metrics = state.episode_metrics()?;
    let key = EmaKey::new(video.id.clone(), target_kbps);
    let ret = ema.episode_return(&key, metrics.mean_psnr_db, metrics.overshoot_kbps, mode)?;
    let episode = Episode::from_trajectory(&state, &actions, targets, ret)?;
    Ok(ActedEpisode {
        episode,
        frames: state.results().to_vec(),
        episode_return: ret,
    })
}

/// Highest-probability bin (lowest index on ties), mapped to its QP.
pub fn act_greedy(obs: &ObservationBundle, params: &AgentParams) -> Result<u8> {
    let s = net::represent(obs, params)?;
    let p = net::predict(&s, params)?;
    Ok(params.config().bin_to_qp(argmax(&p.policy_logits)))
}

/// Encodes a whole video with [`act_greedy`].
pub fn greedy_episode(
    video: &Arc<VideoSpec>,
    target_kbps: f64,
    codec: CodecConfig,
    params: &AgentParams,
) -> Result<EncodeState> {
    let mut state = EncodeState::new(video.clone(), target_kbps, codec)?;
    let fp = Arc::new(first_pass(video));
    while !state.is_done() {
        let qp = act_greedy(&state.observation_with(fp.clone())?, params)?;
        state.step(qp)?;
    }
    Ok(state)
}

/// Encodes a whole video, running search at every frame and taking the most
/// visited action.
pub fn search_episode(
    video: &Arc<VideoSpec>,
    target_kbps: f64,
    codec: CodecConfig,
    params: &AgentParams,
    search: &SearchConfig,
) -> Result<EncodeState> {
    let mut state = EncodeState::new(video.clone(), target_kbps, codec)?;
    let fp = Arc::new(first_pass(video));
    let model = LearnedModel { params };
    while !state.is_done() {
        let obs = state.observation_with(fp.clone())?;
        let found = mcts_search(&obs, &model, search, None)?;
        let best = argmax(&found.visits.iter().map(|v| *v as f64).collect::<Vec<_>>());
        state.step(params.config().bin_to_qp(best))?;
    }
    Ok(state)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::agent::net::NetConfig;
    use crate::codec_sim::{FrameKind, FrameSpec};

    fn video(n: usize) -> Arc<VideoSpec> {
        let frames = (0..n)
            .map(|i| FrameSpec {
                index: i,
                kind: if i == 0 { FrameKind::Key } else { FrameKind::Inter },
                show: true,
                complexity: 200.0 + 50.0 * i as f64,
                motion_coupling: if i == 0 { 0.0 } else { 0.6 },
                ref_index: i.checked_sub(1),
            })
            .collect();
        Arc::new(VideoSpec::new(format!("v{n}"), frames, 1.0).unwrap())
    }

    fn small() -> NetConfig {
        NetConfig {
            action_bins: 16,
            embedding_dim: 8,
            hidden: 8,
            head_hidden: 8,
            window: 4,
            ..NetConfig::default()
        }
    }

    fn play(n: usize) -> ActedEpisode {
        let params = AgentParams::init(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let search = SearchConfig { simulations: 8, ..SearchConfig::default() };
        act_episode(
            &video(n),
            512.0,
            CodecConfig::scaled(30.0),
            &params,
            &search,
            1.0,
            &EmaBuffer::default(),
            &RewardMode::SelfCompete,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap()
    }

    #[test]
    fn one_frame_episode_is_fully_padded() {
        let ep = play(1).episode;
        assert_eq!(ep.transitions.len(), 1);
        let a = ep.transitions[0].actions;
        assert!(a[0].is_some());
        assert!(a[1..].iter().all(|x| x.is_none()));
    }

    #[test]
    fn labels_follow_the_trajectory() {
        let acted = play(4);
        let ep = &acted.episode;
        assert_eq!(ep.transitions.len(), 4);
        for (t, tr) in ep.transitions.iter().enumerate() {
            assert_eq!(tr.value_target, acted.episode_return);
            assert!(tr.value_target == 1.0 || tr.value_target == -1.0);
            assert_eq!(tr.aux_targets[3], ep.result.bitrate_kbps);
            assert_eq!(tr.aux_targets[2], ep.result.mean_psnr_db);
            if t > 0 {
                assert_eq!(tr.aux_targets[0], acted.frames[t - 1].psnr_db);
                assert_eq!(tr.aux_targets[1], acted.frames[t - 1].bits.ln());
            }
            for k in 0..UNROLL_STEPS {
                assert_eq!(tr.actions[k].is_some(), t + k < 4);
            }
            assert!((tr.policy_target.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stored_round_trip() {
        let acted = play(3);
        let stored = acted.episode.to_stored(&acted.frames);
        let back = Episode::from_stored(&stored, video(3), CodecConfig::scaled(30.0)).unwrap();
        assert_eq!(back, acted.episode);
    }

    #[test]
    fn greedy_tie_break_and_bins() {
        let cfg = small();
        let zero = AgentParams::zeroed(&cfg).unwrap();
        let state = EncodeState::new(video(2), 512.0, CodecConfig::scaled(30.0)).unwrap();
        assert_eq!(act_greedy(&state.observation().unwrap(), &zero).unwrap(), cfg.bin_to_qp(0));

        let mut hot = zero.clone();
        let bias = hot.params.tensors.iter().position(|t| t.name == "pred/policy/out/b").unwrap();
        hot.params.tensors[bias].data[5] = 1.0;
        assert_eq!(act_greedy(&state.observation().unwrap(), &hot).unwrap(), cfg.bin_to_qp(5));
    }

    #[test]
    fn temperature_schedule_endpoints() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(20_000) - 0.1).abs() < 1e-12);
        assert!((s.at(10_000) - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((s.at(1_000_000) - 0.1).abs() < 1e-12);
    }
}
