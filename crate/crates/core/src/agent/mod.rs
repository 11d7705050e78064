//! MuZero-style rate-control agent.

pub mod actor;
pub mod loss;
pub mod mcts;
pub mod net;
pub mod nn;
pub mod optim;
pub mod replay;
pub mod train;

pub use actor::{act_episode, act_greedy, greedy_episode, search_episode, Episode, Transition};
pub use loss::{compute_loss, LossBreakdown, LossWeights};
pub use mcts::{mcts_search, SearchConfig};
pub use net::{dynamics, predict, represent, AgentParams, NetConfig};
pub use optim::{sgd_step, OptimConfig};
pub use replay::ReplayBuffer;
pub use train::{train_loop, Checkpoint, LogRecord, TrainConfig, Trainer};
