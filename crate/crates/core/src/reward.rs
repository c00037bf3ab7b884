//! Step rewards induced from a frozen scorer by inverting the Bellman
//! optimality equation under deterministic transitions:
//!
//! ```text
//! r(s, a) = f(s, a) - max_a' f(s + [a], a')    if s + [a] is non-terminal
//! r(s, a) = f(s, a)                            otherwise
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{State, TextMdp, Token, Trajectory};
use crate::oracle::LogitTable;
use crate::scorer::{max_legal, LogitSource, ScorerParams};

/// A Markov reward `r(s, a)`.
pub trait StepReward: Sync {
    fn mdp(&self) -> TextMdp;
    fn step_reward(&self, state: &State, action: Token) -> Result<f64>;
}

/// Per-step rewards for a finished trajectory. Unlike [`StepReward`] the
/// value at step `t` may depend on the whole episode.
pub trait TrajectoryReward: Sync {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>>;
}

impl<T: TrajectoryReward + ?Sized> TrajectoryReward for &T {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        (**self).rewards(traj)
    }
}

/// Suffix sums: `q̂_t = r_t + q̂_{t+1}`, `q̂_{|τ|} = r_{|τ|}`.
pub fn rewards_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

/// Fill `rewards` and `rewards_to_go` on a trajectory.
pub fn trajectory_rewards<R: TrajectoryReward + ?Sized>(reward: &R, traj: &mut Trajectory) -> Result<()> {
    let r = reward.rewards(traj)?;
    if r.len() != traj.len() {
        return Err(Error::ShapeMismatch {
            expected: traj.len(),
            actual: r.len(),
        });
    }
    traj.rewards_to_go = Some(rewards_to_go(&r));
    traj.rewards = Some(r);
    Ok(())
}

/// Post-processing applied to each raw step reward: divide by `scale`, then
/// clip into `clip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardShaping {
    pub scale: Option<f64>,
    pub clip: Option<(f64, f64)>,
}

impl Default for RewardShaping {
    fn default() -> Self {
        Self {
            scale: Some(100.0),
            clip: Some((-1.0, 1.0)),
        }
    }
}

impl RewardShaping {
    pub const RAW: RewardShaping = RewardShaping {
        scale: None,
        clip: None,
    };

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("reward scale {s} must be positive")));
            }
        }
        if let Some((lo, hi)) = self.clip {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::InvalidConfig(format!(
                    "clip bounds [{lo}, {hi}] are empty"
                )));
            }
        }
        Ok(())
    }

    pub fn is_raw(&self) -> bool {
        self.scale.is_none() && self.clip.is_none()
    }

    pub fn apply(&self, raw: f64) -> f64 {
        let mut r = raw;
        if let Some(s) = self.scale {
            r /= s;
        }
        if let Some((lo, hi)) = self.clip {
            r = r.clamp(lo, hi);
        }
        r
    }
}

/// Reward induced from a frozen logit function.
#[derive(Debug, Clone)]
pub struct RewardFn<S = ScorerParams> {
    scorer: S,
    shaping: RewardShaping,
}

impl<S: LogitSource> RewardFn<S> {
    pub fn new(scorer: S, shaping: RewardShaping) -> Result<Self> {
        shaping.validate()?;
        Ok(Self { scorer, shaping })
    }

    /// Scale and clip disabled.
    pub fn raw(scorer: S) -> Self {
        Self {
            scorer,
            shaping: RewardShaping::RAW,
        }
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }

    pub fn shaping(&self) -> RewardShaping {
        self.shaping
    }

    /// Unscaled, unclipped reward.
    pub fn raw_step_reward(&self, state: &State, action: Token) -> Result<f64> {
        let mdp = self.scorer.mdp();
        let next = mdp.transition(state, action)?;
        let here = self.scorer.logits(&state.source, &state.prefix)?[action as usize];
        if next.terminal {
            Ok(here)
        } else {
            let ahead = self.scorer.logits(&next.source, &next.prefix)?;
            Ok(here - max_legal(&ahead))
        }
    }

    /// Raw rewards for every step of a trajectory from one pass of the scorer.
    pub fn raw_rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mdp = self.scorer.mdp();
        mdp.terminal_reason(&traj.actions)?;
        let n = traj.len();
        let prefix = traj.prefix(n - 1);
        let logits = self.scorer.prefix_logits(&traj.source, &prefix)?;
        Ok((0..n)
            .map(|t| {
                let here = logits[t][traj.actions[t] as usize];
                if t + 1 < n {
                    here - max_legal(&logits[t + 1])
                } else {
                    here
                }
            })
            .collect())
    }

    /// Reward function `r'(s, a) = r(s, a) + c_s - c_{s+[a]}`. Only defined
    /// for raw rewards, since clipping does not commute with shifts.
    pub fn apply_shift(self, field: ShiftField) -> Result<ShiftedReward<S>> {
        if !self.shaping.is_raw() {
            return Err(Error::InvalidConfig(
                "shifts require scale and clip to be disabled".into(),
            ));
        }
        Ok(ShiftedReward { base: self, field })
    }
}

impl<S: LogitSource> StepReward for RewardFn<S> {
    fn mdp(&self) -> TextMdp {
        self.scorer.mdp()
    }

    fn step_reward(&self, state: &State, action: Token) -> Result<f64> {
        Ok(self.shaping.apply(self.raw_step_reward(state, action)?))
    }
}

impl<S: LogitSource> TrajectoryReward for RewardFn<S> {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut r = self.raw_rewards(traj)?;
        r.iter_mut().for_each(|v| *v = self.shaping.apply(*v));
        Ok(r)
    }
}

/// Per-state constants `c_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShiftField {
    Zero,
    Constant(f64),
    /// Pseudo-random value in `[-amplitude, amplitude]`, a pure function of
    /// the seed, source and prefix.
    Hashed {
        seed: u64,
        amplitude: f64,
    },
}

impl ShiftField {
    pub fn value(&self, source: &[Token], prefix: &[Token]) -> f64 {
        match *self {
            ShiftField::Zero => 0.0,
            ShiftField::Constant(c) => c,
            ShiftField::Hashed { seed, amplitude } => {
                let mut h = splitmix(seed ^ 0x5eed_5eed);
                for &t in source {
                    h = splitmix(h ^ u64::from(t));
                }
                h = splitmix(h ^ 0xffff_ffff);
                for &t in prefix {
                    h = splitmix(h ^ u64::from(t));
                }
                let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
                amplitude * (2.0 * unit - 1.0)
            }
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Induced reward plus a potential-style shift.
#[derive(Debug, Clone)]
pub struct ShiftedReward<S = ScorerParams> {
    base: RewardFn<S>,
    field: ShiftField,
}

impl<S: LogitSource> ShiftedReward<S> {
    pub fn field(&self) -> ShiftField {
        self.field
    }

    fn shift(&self, source: &[Token], prefix: &[Token], next_terminal: bool, next: &[Token]) -> f64 {
        let c_next = if next_terminal {
            0.0
        } else {
            self.field.value(source, next)
        };
        self.field.value(source, prefix) - c_next
    }
}

impl<S: LogitSource> StepReward for ShiftedReward<S> {
    fn mdp(&self) -> TextMdp {
        self.base.mdp()
    }

    fn step_reward(&self, state: &State, action: Token) -> Result<f64> {
        let r = self.base.raw_step_reward(state, action)?;
        let next = self.mdp().transition(state, action)?;
        Ok(r + self.shift(&state.source, &state.prefix, next.terminal, &next.prefix))
    }
}

impl<S: LogitSource> TrajectoryReward for ShiftedReward<S> {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut r = self.base.raw_rewards(traj)?;
        let n = traj.len();
        for (t, v) in r.iter_mut().enumerate() {
            let next_terminal = t + 1 == n;
            *v += self.shift(&traj.source, &traj.prefix(t), next_terminal, &traj.prefix(t + 1));
        }
        Ok(r)
    }
}

/// Outcome of the reward-error certificate: how far induced rewards move
/// when the value table is perturbed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub trials: usize,
    pub skipped: usize,
    /// Largest `‖r - r*‖_∞ / ‖q - q*‖_∞` over the trials that ran.
    pub max_ratio: f64,
    pub max_reward_error: f64,
    pub within_bound: bool,
}

/// Raw induced rewards for every (state, legal action) of a table, keyed like
/// the table itself.
pub fn table_rewards(table: &LogitTable) -> Result<LogitTable> {
    let rf = RewardFn::raw(table);
    let mdp = table.mdp();
    let mut out = table.clone();
    for (prefix, row) in out.iter_mut() {
        let state = State {
            source: table.source().into(),
            prefix: prefix.clone(),
            terminal: false,
        };
        for a in mdp.vocab.legal_actions() {
            row[a as usize] = rf.raw_step_reward(&state, a)?;
        }
    }
    Ok(out)
}

/// Perturb `q_star` entrywise by uniform noise in `[-eps, eps]`, re-derive
/// rewards from both tables, and compare the sup-norm errors.
pub fn theorem2_certificate(
    q_star: &LogitTable,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<Theorem2Report> {
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let r_star = table_rewards(q_star)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Theorem2Report {
        trials: 0,
        skipped: 0,
        max_ratio: 0.0,
        max_reward_error: 0.0,
        within_bound: true,
    };
    for _ in 0..trials {
        let q = q_star.map_legal(|_, _, v| {
            if eps > 0.0 {
                v + rng.gen_range(-eps..=eps)
            } else {
                v
            }
        });
        record_trial(&mut report, q_star, &r_star, &q)?;
    }
    Ok(report)
}

/// The worst case for the bound: raise `q(root, a)` by `eps` and lower every
/// entry of the successor state by `eps`. Returns the achieved ratio.
pub fn theorem2_adversarial(q_star: &LogitTable, eps: f64) -> Result<Theorem2Report> {
    let mdp = q_star.mdp();
    let a = mdp
        .vocab
        .legal_actions()
        .find(|&t| mdp.vocab.is_data(t))
        .ok_or(Error::InvalidConfig("no data token to perturb".into()))?;
    let root = vec![crate::mdp::BOS];
    let mut succ = root.clone();
    succ.push(a);
    if !q_star.contains(&succ) {
        return Err(Error::InvalidConfig(
            "horizon too short for the adversarial case".into(),
        ));
    }
    let q = q_star.map_legal(|prefix, tok, v| {
        if prefix == root.as_slice() && tok == a {
            v + eps
        } else if prefix == succ.as_slice() {
            v - eps
        } else {
            v
        }
    });
    let r_star = table_rewards(q_star)?;
    let mut report = Theorem2Report {
        trials: 0,
        skipped: 0,
        max_ratio: 0.0,
        max_reward_error: 0.0,
        within_bound: true,
    };
    record_trial(&mut report, q_star, &r_star, &q)?;
    Ok(report)
}

fn record_trial(
    report: &mut Theorem2Report,
    q_star: &LogitTable,
    r_star: &LogitTable,
    q: &LogitTable,
) -> Result<()> {
    let q_err = q.sup_distance(q_star);
    let r_err = table_rewards(q)?.sup_distance(r_star);
    if q_err == 0.0 {
        report.skipped += 1;
        report.max_reward_error = report.max_reward_error.max(r_err);
        return Ok(());
    }
    report.trials += 1;
    let ratio = r_err / q_err;
    report.max_ratio = report.max_ratio.max(ratio);
    report.max_reward_error = report.max_reward_error.max(r_err);
    // Tiny slack for the rounding of the two subtractions.
    if ratio > 2.0 * (1.0 + 1e-12) {
        report.within_bound = false;
    }
    Ok(())
}
