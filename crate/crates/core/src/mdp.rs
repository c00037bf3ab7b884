//! Token-by-token generation as an undiscounted MDP with deterministic
//! transitions. A state is the source plus the generated prefix; an action
//! appends one token.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const PAD: Token = 2;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: usize = 3;

/// Integer vocabulary with `bos`, `eos` and `pad` at ids 0, 1 and 2. Data
/// tokens occupy `3..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < RESERVED + 1 {
            return Err(Error::InvalidVocab(format!(
                "size {size} leaves no data tokens (need at least {})",
                RESERVED + 1
            )));
        }
        Ok(Self { size })
    }

    /// Vocabulary holding `n` data tokens after the reserved ids.
    pub fn with_data_tokens(n: usize) -> Result<Self> {
        Self::new(n + RESERVED)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data_tokens(&self) -> usize {
        self.size - RESERVED
    }

    /// Id of the `i`-th data token.
    pub fn data(&self, i: usize) -> Token {
        debug_assert!(i < self.data_tokens());
        (i + RESERVED) as Token
    }

    /// Index of a data token within the data range, `None` for reserved ids.
    pub fn data_index(&self, token: Token) -> Option<usize> {
        let t = token as usize;
        (t >= RESERVED && t < self.size).then(|| t - RESERVED)
    }

    pub fn is_data(&self, token: Token) -> bool {
        self.data_index(token).is_some()
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            })
        }
    }

    /// Actions are every token except `bos` and `pad`.
    pub fn is_legal_action(&self, token: Token) -> bool {
        (token as usize) < self.size && token != BOS && token != PAD
    }

    pub fn legal_actions(&self) -> impl DoubleEndedIterator<Item = Token> + '_ {
        (0..self.size as Token).filter(move |&t| self.is_legal_action(t))
    }

    pub fn num_legal_actions(&self) -> usize {
        self.size - 2
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalReason {
    Eos,
    Horizon,
}

/// The generation MDP: a vocabulary and a cap `horizon` on the number of
/// actions per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMdp {
    pub vocab: Vocab,
    pub horizon: usize,
}

impl TextMdp {
    pub fn new(vocab: Vocab, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        Ok(Self { vocab, horizon })
    }

    pub fn initial(&self, source: impl Into<Arc<[Token]>>) -> State {
        State {
            source: source.into(),
            prefix: vec![BOS],
            terminal: false,
        }
    }

    /// True when a prefix (starting with `bos`) is terminal under this MDP.
    pub fn is_terminal_prefix(&self, prefix: &[Token]) -> bool {
        prefix.last() == Some(&EOS) && prefix.len() > 1 || prefix.len() > self.horizon
    }

    /// Deterministic transition: append `action` to the prefix.
    pub fn transition(&self, state: &State, action: Token) -> Result<State> {
        if state.terminal {
            return Err(Error::TerminalState);
        }
        if !self.vocab.is_legal_action(action) {
            self.vocab.check(action)?;
            return Err(Error::IllegalAction(action));
        }
        let mut prefix = Vec::with_capacity(state.prefix.len() + 1);
        prefix.extend_from_slice(&state.prefix);
        prefix.push(action);
        let terminal = self.is_terminal_prefix(&prefix);
        Ok(State {
            source: Arc::clone(&state.source),
            prefix,
            terminal,
        })
    }

    /// Rebuild `s_1 .. s_|τ|` by folding the transition over the actions.
    pub fn replay_states(&self, traj: &Trajectory) -> Result<Vec<State>> {
        if traj.actions.is_empty() {
            return Err(Error::InvalidTrajectory("trajectory has no actions".into()));
        }
        let mut states = Vec::with_capacity(traj.actions.len());
        let mut state = self.initial(traj.source.clone());
        for (t, &a) in traj.actions.iter().enumerate() {
            if state.terminal {
                return Err(Error::InvalidTrajectory(format!(
                    "state before action {t} is already terminal"
                )));
            }
            let next = self.transition(&state, a)?;
            states.push(state);
            state = next;
        }
        Ok(states)
    }

    /// Check a finished action sequence and report how it terminated.
    pub fn terminal_reason(&self, actions: &[Token]) -> Result<TerminalReason> {
        if actions.is_empty() {
            return Err(Error::InvalidTrajectory("trajectory has no actions".into()));
        }
        if actions.len() > self.horizon {
            return Err(Error::InvalidTrajectory(format!(
                "{} actions exceed horizon {}",
                actions.len(),
                self.horizon
            )));
        }
        for (t, &a) in actions.iter().enumerate() {
            if !self.vocab.is_legal_action(a) {
                self.vocab.check(a)?;
                return Err(Error::IllegalAction(a));
            }
            if a == EOS && t + 1 != actions.len() {
                return Err(Error::InvalidTrajectory(format!(
                    "eos at step {t} before the final action"
                )));
            }
        }
        if actions.last() == Some(&EOS) {
            Ok(TerminalReason::Eos)
        } else if actions.len() == self.horizon {
            Ok(TerminalReason::Horizon)
        } else {
            Err(Error::InvalidTrajectory(
                "trajectory ends before eos or the horizon".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub source: Arc<[Token]>,
    pub prefix: Vec<Token>,
    pub terminal: bool,
}

/// One generation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub source: Arc<[Token]>,
    pub actions: Vec<Token>,
    /// `log π_b(a_t | s_t)` recorded while sampling.
    pub behavior_logprobs: Vec<f64>,
    pub rewards: Option<Vec<f64>>,
    pub rewards_to_go: Option<Vec<f64>>,
    pub reason: TerminalReason,
}

impl Trajectory {
    /// Build a trajectory from a finished action sequence; validates it against `mdp`.
    pub fn from_actions(
        mdp: &TextMdp,
        source: impl Into<Arc<[Token]>>,
        actions: Vec<Token>,
        behavior_logprobs: Vec<f64>,
    ) -> Result<Self> {
        let reason = mdp.terminal_reason(&actions)?;
        if behavior_logprobs.len() != actions.len() {
            return Err(Error::ShapeMismatch {
                expected: actions.len(),
                actual: behavior_logprobs.len(),
            });
        }
        Ok(Self {
            source: source.into(),
            actions,
            behavior_logprobs,
            rewards: None,
            rewards_to_go: None,
            reason,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Prefix of state `s_t` (0-based): `bos` followed by the first `t` actions.
    pub fn prefix(&self, t: usize) -> Vec<Token> {
        let mut p = Vec::with_capacity(t + 1);
        p.push(BOS);
        p.extend_from_slice(&self.actions[..t]);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mdp(h: usize) -> TextMdp {
        TextMdp::new(Vocab::new(10).unwrap(), h).unwrap()
    }

    #[test]
    fn vocab_rejects_tiny_sizes() {
        assert!(Vocab::new(3).is_err());
        assert!(Vocab::new(4).is_ok());
    }

    #[test]
    fn reserved_ids_are_not_data() {
        let v = Vocab::new(6).unwrap();
        for t in [BOS, EOS, PAD] {
            assert!(!v.is_data(t));
        }
        assert_eq!(v.data(0), 3);
        assert_eq!(v.legal_actions().collect::<Vec<_>>(), vec![EOS, 3, 4, 5]);
    }

    #[test]
    fn transition_appends_token() {
        let m = mdp(8);
        let s = m.initial(vec![4, 5]);
        let s2 = m.transition(&s, 7).unwrap();
        assert_eq!(s2.prefix, vec![BOS, 7]);
        assert!(!s2.terminal);
        assert_eq!(&*s2.source, &[4, 5]);
    }

    #[test]
    fn eos_terminates() {
        let m = mdp(8);
        let s = m.transition(&m.initial(vec![]), 7).unwrap();
        let s = m.transition(&s, EOS).unwrap();
        assert_eq!(s.prefix, vec![BOS, 7, EOS]);
        assert!(s.terminal);
        assert!(matches!(m.transition(&s, 5), Err(Error::TerminalState)));
    }

    #[test]
    fn horizon_caps_episode() {
        let m = mdp(3);
        let mut s = m.initial(vec![]);
        for _ in 0..2 {
            s = m.transition(&s, 5).unwrap();
        }
        assert_eq!(s.prefix.len(), 3);
        assert!(!s.terminal);
        let s = m.transition(&s, 5).unwrap();
        assert_eq!(s.prefix.len(), 4);
        assert!(s.terminal);
        assert_eq!(m.terminal_reason(&[5, 5, 5]).unwrap(), TerminalReason::Horizon);
    }

    #[test]
    fn pad_and_bos_are_not_actions() {
        let m = mdp(4);
        let s = m.initial(vec![]);
        assert!(matches!(m.transition(&s, PAD), Err(Error::IllegalAction(_))));
        assert!(matches!(m.transition(&s, BOS), Err(Error::IllegalAction(_))));
        assert!(matches!(m.transition(&s, 99), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn replay_folds_transitions() {
        let m = mdp(8);
        let t = Trajectory::from_actions(&m, vec![9], vec![3, EOS], vec![0.0; 2]).unwrap();
        let states = m.replay_states(&t).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(states[0].prefix, vec![BOS]);
        assert_eq!(states[1].prefix, vec![BOS, 3]);

        let t = Trajectory::from_actions(&m, vec![9], vec![3, 4, EOS], vec![0.0; 3]).unwrap();
        let states = m.replay_states(&t).unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(states[2].prefix, vec![BOS, 3, 4]);
    }

    #[test]
    fn replay_rejects_empty_and_early_terminal() {
        let m = mdp(8);
        let empty = Trajectory {
            source: Arc::from(vec![]),
            actions: vec![],
            behavior_logprobs: vec![],
            rewards: None,
            rewards_to_go: None,
            reason: TerminalReason::Eos,
        };
        assert!(m.replay_states(&empty).is_err());

        let early = Trajectory {
            actions: vec![EOS, 3],
            behavior_logprobs: vec![0.0; 2],
            ..empty
        };
        assert!(m.replay_states(&early).is_err());
        assert!(Trajectory::from_actions(&m, vec![], vec![EOS, 3], vec![0.0; 2]).is_err());
    }
}
