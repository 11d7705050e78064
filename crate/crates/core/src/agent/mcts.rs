//! pUCT tree search over the learned model.
//!
//! Only [`Model`] is consulted once the root observation has been handed
//! over; the encoder simulator is never touched. Intermediate rewards are 0
//! and the discount is 1, so every node's value estimates the episode return.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::net::{self, AgentParams, Embedding};
use crate::codec_sim::ObservationBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub dirichlet_alpha: f64,
    /// Share of the root prior replaced by Dirichlet noise.
    pub noise_fraction: f64,
    /// Temperature applied to visit counts when forming the policy target.
    pub target_temperature: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            simulations: 200,
            c1: 1.25,
            c2: 19_652.0,
            dirichlet_alpha: 0.25,
            noise_fraction: 0.25,
            target_temperature: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations < 1 {
            return Err(Error::Config("search needs at least one simulation".into()));
        }
        if !(self.c1 >= 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("pUCT constants out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) || !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("root noise parameters out of range".into()));
        }
        if !(self.target_temperature > 0.0) {
            return Err(Error::Config("target temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Prior and value for one hidden state.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub state: S,
    pub priors: Vec<f64>,
    pub value: f64,
}

/// The learned (or stubbed) environment model used by the search.
pub trait Model {
    type State;
    fn action_count(&self) -> usize;
    fn initial(&self, obs: &ObservationBundle) -> Result<Evaluation<Self::State>>;
    fn recurrent(&self, state: &Self::State, action: usize) -> Result<Evaluation<Self::State>>;
}

/// Representation + dynamics + prediction networks.
pub struct LearnedModel<'a> {
    pub params: &'a AgentParams,
}

impl LearnedModel<'_> {
    fn evaluate(&self, state: Embedding) -> Result<Evaluation<Embedding>> {
        let p = net::predict(&state, self.params)?;
        Ok(Evaluation {
            priors: p.policy(),
            value: p.value(),
            state,
        })
    }
}

impl Model for LearnedModel<'_> {
    type State = Embedding;

    fn action_count(&self) -> usize {
        self.params.config().action_bins
    }

    fn initial(&self, obs: &ObservationBundle) -> Result<Evaluation<Embedding>> {
        self.evaluate(net::represent(obs, self.params)?)
    }

    fn recurrent(&self, state: &Embedding, action: usize) -> Result<Evaluation<Embedding>> {
        self.evaluate(net::dynamics(state, action, self.params)?)
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub visits: Vec<u32>,
    pub policy_target: Vec<f64>,
    pub root_value: f64,
}

struct Node<S> {
    prior: f64,
    visits: u32,
    value_sum: f64,
    /// Index of the first child; children are contiguous.
    children: Option<usize>,
    state: Option<S>,
}

impl<S> Node<S> {
    fn new(prior: f64) -> Self {
        Node {
            prior,
            visits: 0,
            value_sum: 0.0,
            children: None,
            state: None,
        }
    }

    fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

struct MinMax {
    lo: f64,
    hi: f64,
}

impl MinMax {
    fn update(&mut self, v: f64) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    fn normalize(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            v
        }
    }
}

/// Runs `config.simulations` simulations from `obs`. Root Dirichlet noise is
/// mixed in when `rng` is given.
pub fn mcts_search<M: Model>(
    obs: &ObservationBundle,
    model: &M,
    config: &SearchConfig,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<SearchResult> {
    config.validate()?;
    let actions = model.action_count();
    if actions == 0 {
        return Err(Error::Config("model has no actions".into()));
    }
    let root_eval = model.initial(obs)?;
    let mut priors = root_eval.priors;
    if let Some(rng) = rng {
        if config.noise_fraction > 0.0 && actions > 1 {
            let noise = dirichlet(rng, config.dirichlet_alpha, actions)?;
            for (p, n) in priors.iter_mut().zip(noise) {
                *p = (1.0 - config.noise_fraction) * *p + config.noise_fraction * n;
            }
        }
    }

    let mut nodes: Vec<Node<M::State>> = Vec::with_capacity(1 + actions * (config.simulations + 1));
    nodes.push(Node::new(1.0));
    expand(&mut nodes, 0, root_eval.state, &priors);
    let mut bounds = MinMax {
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
    };

    let mut path = Vec::new();
    for _ in 0..config.simulations {
        path.clear();
        path.push(0usize);
        let mut node = 0usize;
        let mut action = 0usize;
        while let Some(first) = nodes[node].children {
            action = select(&nodes, node, first, actions, config, &bounds);
            node = first + action;
            path.push(node);
        }
        let parent = path[path.len() - 2];
        let eval = {
            let state = nodes[parent].state.as_ref().expect("expanded nodes hold a state");
            model.recurrent(state, action)?
        };
        expand(&mut nodes, node, eval.state, &eval.priors);
        for &n in path.iter().rev() {
            nodes[n].value_sum += eval.value;
            nodes[n].visits += 1;
            bounds.update(nodes[n].q());
        }
    }

    let first = nodes[0].children.expect("root is expanded");
    let visits: Vec<u32> = (0..actions).map(|a| nodes[first + a].visits).collect();
    let total: u32 = visits.iter().sum();
    let root_value = (0..actions)
        .map(|a| nodes[first + a].value_sum)
        .sum::<f64>()
        / total as f64;
    Ok(SearchResult {
        policy_target: visit_distribution(&visits, config.target_temperature),
        visits,
        root_value,
    })
}

fn expand<S>(nodes: &mut Vec<Node<S>>, at: usize, state: S, priors: &[f64]) {
    let first = nodes.len();
    nodes.extend(priors.iter().map(|p| Node::new(*p)));
    nodes[at].children = Some(first);
    nodes[at].state = Some(state);
}

/// pUCT: normalized Q plus prior · √N / (1 + n) · (c1 + ln((N + c2 + 1) / c2)).
/// Unvisited children score 0 on the value term. Lowest index wins ties.
fn select<S>(nodes: &[Node<S>], parent: usize, first: usize, actions: usize, cfg: &SearchConfig, bounds: &MinMax) -> usize {
    let n_parent = nodes[parent].visits as f64;
    let c = cfg.c1 + ((n_parent + cfg.c2 + 1.0) / cfg.c2).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for a in 0..actions {
        let child = &nodes[first + a];
        let u = c * child.prior * n_parent.sqrt() / (1.0 + child.visits as f64);
        let q = if child.visits > 0 {
            bounds.normalize(child.q())
        } else {
            0.0
        };
        let score = q + u;
        if score > best_score {
            best = a;
            best_score = score;
        }
    }
    best
}

/// Visit counts raised to 1/temperature and normalized.
pub fn visit_distribution(visits: &[u32], temperature: f64) -> Vec<f64> {
    let total: f64 = visits.iter().map(|v| *v as f64).sum();
    if total == 0.0 {
        return vec![1.0 / visits.len() as f64; visits.len()];
    }
    let max = *visits.iter().max().unwrap() as f64;
    // Scale by the maximum first so large exponents stay finite.
    let w: Vec<f64> = visits
        .iter()
        .map(|v| (*v as f64 / max).powf(1.0 / temperature))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn dirichlet(rng: &mut dyn rand::RngCore, alpha: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        let k = rng.random_range(0..n);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = if i == k { 1.0 } else { 0.0 });
    }
    Ok(draws)
}
