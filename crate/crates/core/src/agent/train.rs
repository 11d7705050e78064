//! Actor-learner training loop and checkpoints.
//!
//! With `threads == 1` acting and learning interleave on one thread and all
//! randomness comes from a single ChaCha8 stream, so a run is a pure function
//! of its configuration and seed. With more threads, actors run
//! concurrently against a published parameter snapshot.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actor::{act_episode, ActedEpisode, Episode, StoredEpisode, TemperatureSchedule};
use super::loss::{compute_loss, LossBreakdown, LossWeights};
use super::mcts::SearchConfig;
use super::net::{AgentParams, NetConfig};
use super::nn::{Grads, ParamSet, Tensor};
use super::optim::{sgd_step, Momentum, OptimConfig};
use super::replay::{ReplayBuffer, DESK_CAPACITY};
use crate::codec_sim::corpus::{read_json, write_json, Corpus};
use crate::error::{Error, Result};
use crate::reward::{EmaBuffer, EmaSnapshot, RewardMode, DEFAULT_ALPHA, DEFAULT_PSNR_INIT};

pub const CHECKPOINT_FORMAT: &str = "ratectl.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Targets sampled during training, kbps.
pub const TRAINING_TARGETS: [f64; 5] = [256.0, 384.0, 512.0, 640.0, 768.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Episodes generated before the first learner step.
    pub min_replay_episodes: u64,
    /// Episodes generated per learner step after warm-up.
    pub episodes_per_step: f64,
    /// Learner steps between parameter publications to actors.
    pub publish_interval: u64,
    /// Learner steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub targets: Vec<f64>,
    pub seed: u64,
    pub threads: usize,
    pub ema_alpha: f64,
    pub ema_psnr_init: f64,
    pub optimizer: OptimConfig,
    pub loss: LossWeights,
    pub search: SearchConfig,
    pub temperature: TemperatureSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            replay_capacity: DESK_CAPACITY,
            min_replay_episodes: 64,
            episodes_per_step: 0.25,
            publish_interval: 10,
            checkpoint_interval: 1_000,
            targets: TRAINING_TARGETS.to_vec(),
            seed: 0,
            threads: 1,
            ema_alpha: DEFAULT_ALPHA,
            ema_psnr_init: DEFAULT_PSNR_INIT,
            optimizer: OptimConfig::default(),
            loss: LossWeights::default(),
            search: SearchConfig::default(),
            temperature: TemperatureSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.replay_capacity == 0 || self.publish_interval == 0 || self.threads == 0 {
            return Err(Error::Config("replay_capacity, publish_interval and threads must be positive".into()));
        }
        if self.min_replay_episodes == 0 {
            return Err(Error::Config("min_replay_episodes must be positive".into()));
        }
        if !(self.episodes_per_step.is_finite() && self.episodes_per_step >= 0.0) {
            return Err(Error::Config("episodes_per_step must be finite and non-negative".into()));
        }
        if self.targets.is_empty() || self.targets.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("targets must be a non-empty list of positive rates".into()));
        }
        self.optimizer.validate()?;
        self.search.validate()?;
        self.temperature.validate()?;
        EmaBuffer::new(self.ema_alpha, self.ema_psnr_init)?;
        Ok(())
    }

    fn episodes_due(&self, step: u64) -> u64 {
        self.min_replay_episodes + (step as f64 * self.episodes_per_step).floor() as u64
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub aux_loss: f64,
    pub l2_loss: f64,
    pub lr: f64,
    pub episodes: u64,
    /// Mean return of episodes generated since the previous record.
    pub mean_return: Option<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub net: NetConfig,
    pub reward: RewardMode,
    pub corpus_hash: String,
    pub step: u64,
    pub episodes_generated: u64,
    pub tensors: Vec<Tensor>,
    pub momentum: Vec<Vec<f64>>,
    /// Weights the actors were last given (lags `tensors` between
    /// publications).
    pub published: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
    pub ema: EmaSnapshot,
    pub replay_capacity: usize,
    pub replay: Vec<StoredEpisode>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION || ckpt.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{} ({})",
                ckpt.format, ckpt.version, ckpt.dtype
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<AgentParams> {
        AgentParams::from_tensors(&self.net, ParamSet { tensors: self.tensors.clone() })
    }
}

pub struct Trainer<'c> {
    corpus: &'c Corpus,
    config: TrainConfig,
    mode: RewardMode,
    params: AgentParams,
    published: Arc<AgentParams>,
    momentum: Momentum,
    step: u64,
    episodes: u64,
    rng: ChaCha8Rng,
    ema: EmaBuffer,
    replay: ReplayBuffer,
    recent_returns: Vec<f64>,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, config: TrainConfig, net: NetConfig, mode: RewardMode) -> Result<Self> {
        Self::check(corpus, &config, &net, &mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = AgentParams::init(&net, &mut rng)?;
        Ok(Trainer {
            corpus,
            mode,
            published: Arc::new(params.clone()),
            momentum: Momentum::zeros(&params),
            params,
            step: 0,
            episodes: 0,
            rng,
            ema: EmaBuffer::new(config.ema_alpha, config.ema_psnr_init)?,
            replay: ReplayBuffer::new(config.replay_capacity)?,
            recent_returns: Vec::new(),
            config,
        })
    }

    pub fn resume(corpus: &'c Corpus, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        Self::check(corpus, &config, &ckpt.net, &ckpt.reward)?;
        if ckpt.corpus_hash != corpus.content_hash() {
            return Err(Error::Config("checkpoint was trained on a different corpus".into()));
        }
        let params = ckpt.params()?;
        let momentum = Momentum(aligned(&params, &ckpt.momentum, "momentum")?);
        let mut published = params.clone();
        for (t, d) in published.params.tensors.iter_mut().zip(aligned(&params, &ckpt.published, "published")?.0) {
            t.data = d;
        }
        let mut replay = ReplayBuffer::new(ckpt.replay_capacity)?;
        let codec = corpus.codec();
        for stored in &ckpt.replay {
            let video = corpus
                .get(&stored.video_id)
                .ok_or_else(|| Error::Format(format!("replay references unknown video {}", stored.video_id)))?;
            let episode = Episode::from_stored(stored, video.clone(), codec)?;
            replay.push(Arc::new(ActedEpisode {
                episode,
                frames: stored.frames.clone(),
                episode_return: stored.value_target,
            }));
        }
        Ok(Trainer {
            corpus,
            config,
            mode: ckpt.reward,
            params,
            published: Arc::new(published),
            momentum,
            step: ckpt.step,
            episodes: ckpt.episodes_generated,
            rng: ckpt.rng.clone(),
            ema: EmaBuffer::restore(&ckpt.ema)?,
            replay,
            recent_returns: Vec::new(),
        })
    }

    fn check(corpus: &Corpus, config: &TrainConfig, net: &NetConfig, mode: &RewardMode) -> Result<()> {
        config.validate()?;
        net.validate()?;
        mode.validate()?;
        if corpus.videos.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if net.bounded_value != mode.bounded() {
            return Err(Error::Config(format!(
                "bounded_value = {} does not suit the {} reward",
                net.bounded_value,
                mode.label()
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn episodes_generated(&self) -> u64 {
        self.episodes
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn ema(&self) -> &EmaBuffer {
        &self.ema
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.checkpoint_from(&self.replay, &self.ema)
    }

    fn checkpoint_from(&self, replay: &ReplayBuffer, ema: &EmaBuffer) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: "f64".into(),
            net: self.params.config().clone(),
            reward: self.mode,
            corpus_hash: self.corpus.content_hash(),
            step: self.step,
            episodes_generated: self.episodes,
            tensors: self.params.params.tensors.clone(),
            momentum: self.momentum.0 .0.clone(),
            published: self.published.params.tensors.iter().map(|t| t.data.clone()).collect(),
            rng: self.rng.clone(),
            ema: ema.snapshot(),
            replay_capacity: replay.capacity(),
            replay: replay
                .episodes()
                .map(|e| e.episode.to_stored(&e.frames))
                .collect(),
        }
    }

    /// Trains until `until` learner steps (capped by `config.steps`) have
    /// been taken, reporting every step to `on_log` and every checkpoint
    /// to `on_checkpoint`.
    pub fn run(
        &mut self,
        until: u64,
        on_log: &mut dyn FnMut(&LogRecord) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.config.steps);
        if self.config.threads > 1 {
            self.run_threaded(until, on_log, on_checkpoint)
        } else {
            self.run_serial(until, on_log, on_checkpoint)
        }
    }


    fn run_serial(
        &mut self,
        until: u64,
        on_log: &mut dyn FnMut(&LogRecord) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        let codec = self.corpus.codec();
        while self.step < until {
            while self.episodes < self.config.episodes_due(self.step) {
                let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
                let (video, target) = pick(self.corpus, &self.config.targets, &mut rng);
                let temperature = self.config.temperature.at(self.step);
                let acted = act_episode(
                    &video,
                    target,
                    codec,
                    &self.published,
                    &self.config.search,
                    temperature,
                    &self.ema,
                    &self.mode,
                    &mut rng,
                );
                self.rng = rng;
                let acted = acted?;
                self.recent_returns.push(acted.episode_return);
                self.replay.push(Arc::new(acted));
                self.episodes += 1;
            }
            let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
            let (loss, grads) = compute_loss(&batch, &self.params, &self.config.loss)?;
            if self.learn(loss, &grads, on_log)? {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// Applies one optimizer step and logs it. Returns whether a checkpoint
    /// is due.
    fn learn(&mut self, loss: LossBreakdown, grads: &Grads, on_log: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<bool> {
        let lr = self.config.optimizer.learning_rate(self.step);
        sgd_step(&mut self.params, grads, &mut self.momentum, self.step, &self.config.optimizer)?;
        if !self.params.params.is_finite() {
            return Err(Error::State(format!("weights diverged at step {}", self.step)));
        }
        self.step += 1;
        if self.step.is_multiple_of(self.config.publish_interval) {
            self.published = Arc::new(self.params.clone());
        }
        let returns = std::mem::take(&mut self.recent_returns);
        on_log(&LogRecord {
            step: self.step,
            loss: loss.total,
            policy_loss: loss.policy,
            value_loss: loss.value,
            aux_loss: loss.aux,
            l2_loss: loss.l2,
            lr,
            episodes: self.episodes,
            mean_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
        })?;
        let interval = self.config.checkpoint_interval;
        Ok((interval > 0 && self.step.is_multiple_of(interval)) || self.step == self.config.steps)
    }

    fn run_threaded(
        &mut self,
        until: u64,
        on_log: &mut dyn FnMut(&LogRecord) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        let actors = self.config.threads - 1;
        let snapshot = RwLock::new(self.published.clone());
        let replay = Mutex::new(std::mem::replace(&mut self.replay, ReplayBuffer::new(1)?));
        let episodes = AtomicU64::new(self.episodes);
        let learner_step = AtomicU64::new(self.step);
        let stop = AtomicBool::new(false);
        let returns = Mutex::new(Vec::new());
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let codec = self.corpus.codec();
        let base_seed: u64 = self.rng.random();
        let corpus = self.corpus;
        let config = self.config.clone();
        let mode = self.mode;
        let ema = std::mem::take(&mut self.ema);

        let result = std::thread::scope(|scope| -> Result<()> {
            for id in 0..actors {
                let (snapshot, replay, episodes, learner_step, stop, returns, failure) =
                    (&snapshot, &replay, &episodes, &learner_step, &stop, &returns, &failure);
                let (config, mode, ema) = (&config, &mode, &ema);
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
                    rng.set_stream(id as u64 + 1);
                    // Stay a bounded distance ahead of the learner.
                    let slack = actors as u64;
                    while !stop.load(Ordering::Relaxed) {
                        let due = config.episodes_due(learner_step.load(Ordering::Relaxed)) + slack;
                        if episodes.load(Ordering::Relaxed) >= due {
                            std::thread::sleep(Duration::from_micros(200));
                            continue;
                        }
                        let params = snapshot.read().unwrap().clone();
                        let (video, target) = pick(corpus, &config.targets, &mut rng);
                        let temperature = config.temperature.at(learner_step.load(Ordering::Relaxed));
                        match act_episode(
                            &video,
                            target,
                            codec,
                            &params,
                            &config.search,
                            temperature,
                            ema,
                            mode,
                            &mut rng,
                        ) {
                            Ok(acted) => {
                                returns.lock().unwrap().push(acted.episode_return);
                                replay.lock().unwrap().push(Arc::new(acted));
                                episodes.fetch_add(1, Ordering::Relaxed);
                            }
                            Err(e) => {
                                *failure.lock().unwrap() = Some(e);
                                stop.store(true, Ordering::Relaxed);
                            }
                        }
                    }
                });
            }

            let outcome = (|| -> Result<()> {
                // The learner thread lends a hand while replay fills up.
                let mut own_rng = self.rng.clone();
                while self.step < until {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    if episodes.load(Ordering::Relaxed) < self.config.episodes_due(self.step) {
                        std::thread::sleep(Duration::from_micros(200));
                        continue;
                    }
                    let batch = replay.lock().unwrap().sample(self.config.batch_size, &mut own_rng)?;
                    let (loss, grads) = compute_loss(&batch, &self.params, &self.config.loss)?;
                    self.episodes = episodes.load(Ordering::Relaxed);
                    self.recent_returns.append(&mut returns.lock().unwrap());
                    let due = self.learn(loss, &grads, on_log)?;
                    learner_step.store(self.step, Ordering::Relaxed);
                    if self.step.is_multiple_of(self.config.publish_interval) {
                        *snapshot.write().unwrap() = self.published.clone();
                    }
                    if due {
                        self.rng = own_rng.clone();
                        let ckpt = self.checkpoint_from(&replay.lock().unwrap(), &ema);
                        on_checkpoint(&ckpt)?;
                    }
                }
                self.rng = own_rng;
                Ok(())
            })();
            stop.store(true, Ordering::Relaxed);
            outcome
        });
        self.replay = replay.into_inner().unwrap();
        self.ema = ema;
        self.episodes = episodes.load(Ordering::Relaxed);
        result?;
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(())
    }
}

fn pick(corpus: &Corpus, targets: &[f64], rng: &mut impl Rng) -> (Arc<crate::codec_sim::VideoSpec>, f64) {
    let v = rng.random_range(0..corpus.videos.len());
    let t = rng.random_range(0..targets.len());
    (corpus.videos[v].clone(), targets[t])
}

fn aligned(params: &AgentParams, data: &[Vec<f64>], what: &str) -> Result<Grads> {
    if data.len() != params.params.tensors.len()
        || data.iter().zip(&params.params.tensors).any(|(d, t)| d.len() != t.data.len())
    {
        return Err(Error::Format(format!("checkpoint {what} does not match the tensor layout")));
    }
    Ok(Grads(data.to_vec()))
}

/// Runs a fresh training job to completion.
pub fn train_loop(
    corpus: &Corpus,
    config: TrainConfig,
    net: NetConfig,
    mode: RewardMode,
    on_log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<AgentParams> {
    let steps = config.steps;
    let mut trainer = Trainer::new(corpus, config, net, mode)?;
    trainer.run(steps, on_log, on_checkpoint)?;
    Ok(trainer.params)
}
