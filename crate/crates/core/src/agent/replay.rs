//! Capacity-bounded episode store with uniform transition sampling.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use super::actor::ActedEpisode;
use crate::error::{Error, Result};

/// Default capacity for desk-scale runs, in episodes.
pub const DESK_CAPACITY: usize = 2_000;

/// A sampled training position: transition `index` of `episode`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub episode: Arc<ActedEpisode>,
    pub index: usize,
}

/// Oldest episodes are evicted first once `capacity` is reached. Not
/// internally synchronized; share it behind a `Mutex` so each append or
/// sample is atomic.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Arc<ActedEpisode>>,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::new(),
            transitions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Arc<ActedEpisode>> {
        self.episodes.iter()
    }

    pub fn push(&mut self, episode: Arc<ActedEpisode>) {
        if self.episodes.len() == self.capacity {
            if let Some(old) = self.episodes.pop_front() {
                self.transitions -= old.episode.len();
            }
        }
        self.transitions += episode.episode.len();
        self.episodes.push_back(episode);
    }

    /// Draws `count` positions uniformly (with replacement) over all stored
    /// transitions.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
        if self.transitions == 0 {
            return Err(Error::State("replay buffer is empty".into()));
        }
        let mut picks: Vec<(usize, usize)> = (0..count)
            .map(|slot| (rng.random_range(0..self.transitions), slot))
            .collect();
        // One sweep over the episodes serves every pick.
        picks.sort_unstable();
        let mut out: Vec<Option<Sample>> = vec![None; count];
        let mut base = 0;
        let mut episodes = self.episodes.iter();
        let mut current = episodes.next().expect("non-empty");
        for (flat, slot) in picks {
            while flat >= base + current.episode.len() {
                base += current.episode.len();
                current = episodes.next().expect("index below transition count");
            }
            out[slot] = Some(Sample {
                episode: current.clone(),
                index: flat - base,
            });
        }
        Ok(out.into_iter().map(|s| s.expect("every slot filled")).collect())
    }
}
