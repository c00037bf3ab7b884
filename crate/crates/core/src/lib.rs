//! Reward induction from teacher-forced sequence models, off-policy
//! REINFORCE with a periodically synchronized behavior policy, and exact
//! oracles for checking both on micro instances.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mdp;
pub mod oracle;
pub mod reward;
pub mod rl;
pub mod scorer;
pub mod supervised;
pub mod task;
pub mod verify;

pub use error::{Error, Result};
pub use mdp::{State, TerminalReason, TextMdp, Token, Trajectory, Vocab, BOS, EOS, PAD};
pub use scorer::{AdamState, Checkpoint, Gradient, LogitSource, ScorerConfig, ScorerParams};
