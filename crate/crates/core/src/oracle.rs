//! Brute-force ground truth on micro instances: explicit logit tables,
//! exhaustive trajectory enumeration, exact expectations and backward
//! induction.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{State, TextMdp, Token, Trajectory, BOS};
use crate::reward::{rewards_to_go, StepReward, TrajectoryReward};
use crate::scorer::{argmax_legal, log_softmax_masked, validate_prefix, Gradient, LogitSource, ScorerParams};

/// Largest number of legal actions in a micro instance.
pub const MAX_MICRO_ACTIONS: usize = 5;
pub const MAX_MICRO_HORIZON: usize = 4;

/// A single-source MDP small enough to enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSpec {
    pub mdp: TextMdp,
    pub source: Vec<Token>,
}

impl MicroSpec {
    pub fn new(mdp: TextMdp, source: Vec<Token>) -> Result<Self> {
        let leaves = mdp.vocab.num_legal_actions().pow(mdp.horizon as u32);
        let limit = MAX_MICRO_ACTIONS.pow(MAX_MICRO_HORIZON as u32);
        if mdp.vocab.num_legal_actions() > MAX_MICRO_ACTIONS
            || mdp.horizon > MAX_MICRO_HORIZON
            || leaves > limit
        {
            return Err(Error::TreeTooLarge { leaves, limit });
        }
        source.iter().try_for_each(|&t| mdp.vocab.check(t))?;
        Ok(Self { mdp, source })
    }

    /// Every non-terminal prefix, in depth-first order.
    pub fn states(&self) -> Vec<Vec<Token>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![BOS]];
        while let Some(p) = stack.pop() {
            if p.len() < self.mdp.horizon {
                for a in self.mdp.vocab.legal_actions().rev() {
                    if self.mdp.vocab.is_data(a) {
                        let mut q = p.clone();
                        q.push(a);
                        stack.push(q);
                    }
                }
            }
            out.push(p);
        }
        out
    }

    fn state(&self, prefix: Vec<Token>) -> State {
        State {
            source: Arc::from(self.source.clone()),
            terminal: self.mdp.is_terminal_prefix(&prefix),
            prefix,
        }
    }
}

/// Explicit logits for every non-terminal prefix of a single source.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    mdp: TextMdp,
    source: Vec<Token>,
    rows: BTreeMap<Vec<Token>, Vec<f64>>,
}

impl LogitTable {
    pub fn constant(mdp: TextMdp, source: Vec<Token>, value: f64) -> Self {
        Self::build(mdp, source, |_, _| value)
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn random(mdp: TextMdp, source: Vec<Token>, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(mdp, source, |_, _| rng.gen_range(-scale..=scale))
    }

    /// Tabulate any logit source over the tree of `spec`.
    pub fn tabulate<S: LogitSource + ?Sized>(scorer: &S, spec: &MicroSpec) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for p in spec.states() {
            let l = scorer.logits(&spec.source, &p)?;
            rows.insert(p, l);
        }
        Ok(Self {
            mdp: spec.mdp,
            source: spec.source.clone(),
            rows,
        })
    }

    fn build(mdp: TextMdp, source: Vec<Token>, mut f: impl FnMut(&[Token], Token) -> f64) -> Self {
        let spec = MicroSpec {
            mdp,
            source: source.clone(),
        };
        let mut rows = BTreeMap::new();
        for p in spec.states() {
            let row = (0..mdp.vocab.size() as Token)
                .map(|t| {
                    if mdp.vocab.is_legal_action(t) {
                        f(&p, t)
                    } else {
                        0.0
                    }
                })
                .collect();
            rows.insert(p, row);
        }
        Self { mdp, source, rows }
    }

    pub fn source(&self) -> &[Token] {
        &self.source
    }

    pub fn contains(&self, prefix: &[Token]) -> bool {
        self.rows.contains_key(prefix)
    }

    pub fn get(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.rows.get(prefix).map(Vec::as_slice)
    }

    pub fn set(&mut self, prefix: &[Token], tok: Token, value: f64) {
        self.rows.get_mut(prefix).expect("prefix in table")[tok as usize] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Token>, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&Vec<Token>, &mut Vec<f64>)> {
        self.rows.iter_mut()
    }

    /// New table with every legal entry replaced by `f(prefix, token, value)`.
    pub fn map_legal(&self, mut f: impl FnMut(&[Token], Token, f64) -> f64) -> Self {
        let vocab = self.mdp.vocab;
        let rows = self
            .rows
            .iter()
            .map(|(p, row)| {
                let r = row
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let t = t as Token;
                        if vocab.is_legal_action(t) {
                            f(p, t, v)
                        } else {
                            v
                        }
                    })
                    .collect();
                (p.clone(), r)
            })
            .collect();
        Self {
            mdp: self.mdp,
            source: self.source.clone(),
            rows,
        }
    }

    /// `max |a - b|` over legal entries of matching rows.
    pub fn sup_distance(&self, other: &LogitTable) -> f64 {
        let vocab = self.mdp.vocab;
        let mut d: f64 = 0.0;
        for (p, row) in &self.rows {
            if let Some(o) = other.rows.get(p) {
                for t in vocab.legal_actions() {
                    d = d.max((row[t as usize] - o[t as usize]).abs());
                }
            }
        }
        d
    }
}

impl LogitSource for LogitTable {
    fn mdp(&self) -> TextMdp {
        self.mdp
    }

    fn logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        validate_prefix(&self.mdp, prefix)?;
        if source != self.source.as_slice() {
            return Err(Error::InvalidConfig(
                "logit table built for a different source".into(),
            ));
        }
        self.rows
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::InvalidTrajectory(format!("prefix {prefix:?} not in table")))
    }
}

/// Policy `softmax(f / temperature)` over legal actions.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxPolicy<'a, S: ?Sized> {
    pub logits: &'a S,
    pub temperature: f64,
}

impl<'a, S: LogitSource + ?Sized> SoftmaxPolicy<'a, S> {
    pub fn new(logits: &'a S) -> Self {
        Self {
            logits,
            temperature: 1.0,
        }
    }

    pub fn logprobs(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        Ok(log_softmax_masked(
            &self.logits.logits(source, prefix)?,
            self.temperature,
        ))
    }
}

/// Every terminating trajectory of `spec` with its exact probability under
/// `policy`. Behavior log-probabilities are filled from the same policy.
pub fn enumerate<S: LogitSource + ?Sized>(
    spec: &MicroSpec,
    policy: SoftmaxPolicy<'_, S>,
) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<Token>, Vec<f64>)> = vec![(vec![], vec![])];
    while let Some((actions, lps)) = stack.pop() {
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&actions);
        let lp = policy.logprobs(&spec.source, &prefix)?;
        for a in spec.mdp.vocab.legal_actions().rev() {
            let mut acts = actions.clone();
            acts.push(a);
            let mut l = lps.clone();
            l.push(lp[a as usize]);
            let mut p = prefix.clone();
            p.push(a);
            if spec.mdp.is_terminal_prefix(&p) {
                let prob = l.iter().sum::<f64>().exp();
                let traj = Trajectory::from_actions(&spec.mdp, spec.source.clone(), acts, l)?;
                out.push((traj, prob));
            } else {
                stack.push((acts, l));
            }
        }
    }
    Ok(out)
}

/// `E_π[Σ_t r_t]` by enumeration.
pub fn exact_return<S, R>(spec: &MicroSpec, policy: SoftmaxPolicy<'_, S>, reward: &R) -> Result<f64>
where
    S: LogitSource + ?Sized,
    R: TrajectoryReward + ?Sized,
{
    let mut total = 0.0;
    for (traj, prob) in enumerate(spec, policy)? {
        total += prob * reward.rewards(&traj)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// Exact expected policy-gradient estimates for a live scorer `π_φ`.
#[derive(Debug, Clone)]
pub struct ExactGradients {
    /// `E_{π_b}[Σ_t ρ_t q̂_t ∇ log π_φ(a_t|s_t)]` with per-step `ρ_t = π_φ(a_t|s_t)/π_b(a_t|s_t)`.
    pub off_policy: Gradient,
    /// `E_{π_φ}[Σ_t q̂_t ∇ log π_φ(a_t|s_t)]`, the true gradient of the expected return.
    pub on_policy: Gradient,
    /// Behavior-policy expectation reweighted by the whole-trajectory ratio
    /// `Π_t ρ_t`.
    pub trajectory_ratio: Gradient,
}

pub fn exact_policy_gradient<B, R>(
    spec: &MicroSpec,
    live: &ScorerParams,
    behavior: SoftmaxPolicy<'_, B>,
    reward: &R,
) -> Result<ExactGradients>
where
    B: LogitSource + ?Sized,
    R: TrajectoryReward + ?Sized,
{
    let n = live.len();
    let mut off = Gradient::zeros(n);
    let mut traj_ratio = Gradient::zeros(n);
    for (traj, prob) in enumerate(spec, behavior)? {
        let q = rewards_to_go(&reward.rewards(&traj)?);
        let mut g_off = Gradient::zeros(n);
        let mut rho_total = 0.0;
        live.sequence_logprob_grad(&traj.source, &traj.actions, &mut g_off, |live_lp| {
            rho_total = live_lp
                .iter()
                .zip(&traj.behavior_logprobs)
                .map(|(l, b)| l - b)
                .sum::<f64>()
                .exp();
            Ok(live_lp
                .iter()
                .zip(&traj.behavior_logprobs)
                .zip(&q)
                .map(|((l, b), q)| prob * (l - b).exp() * q)
                .collect())
        })?;
        off.add_assign(&g_off);

        let mut g_tr = Gradient::zeros(n);
        live.sequence_logprob_grad(&traj.source, &traj.actions, &mut g_tr, |_| {
            Ok(q.iter().map(|q| prob * rho_total * q).collect())
        })?;
        traj_ratio.add_assign(&g_tr);
    }

    let mut on = Gradient::zeros(n);
    for (traj, prob) in enumerate(spec, SoftmaxPolicy::new(live))? {
        let q = rewards_to_go(&reward.rewards(&traj)?);
        live.sequence_logprob_grad(&traj.source, &traj.actions, &mut on, |_| {
            Ok(q.iter().map(|q| prob * q).collect())
        })?;
    }
    Ok(ExactGradients {
        off_policy: off,
        on_policy: on,
        trajectory_ratio: traj_ratio,
    })
}

/// Optimal action values and the greedy policy from backward induction.
#[derive(Debug, Clone)]
pub struct DpSolution {
    /// `q*(s, ·)` per non-terminal prefix; illegal actions hold `-inf`.
    pub q: BTreeMap<Vec<Token>, Vec<f64>>,
    pub policy: BTreeMap<Vec<Token>, Token>,
}

/// `q*(s, a) = r(s, a) + max_a' q*(s + [a], a')`, with `q* = r` when the
/// successor is terminal (eos or the horizon cap). Ties in the greedy policy
/// go to the lowest token id.
pub fn dp_optimal<R: StepReward + ?Sized>(spec: &MicroSpec, reward: &R) -> Result<DpSolution> {
    let vocab = spec.mdp.vocab;
    let mut states = spec.states();
    // Deepest prefixes first so successors are always solved.
    states.sort_by_key(|p| std::cmp::Reverse(p.len()));
    let mut q: BTreeMap<Vec<Token>, Vec<f64>> = BTreeMap::new();
    let mut policy = BTreeMap::new();
    for p in states {
        let state = spec.state(p.clone());
        let mut row = vec![f64::NEG_INFINITY; vocab.size()];
        for a in vocab.legal_actions() {
            let r = reward.step_reward(&state, a)?;
            let mut next = p.clone();
            next.push(a);
            row[a as usize] = if spec.mdp.is_terminal_prefix(&next) {
                r
            } else {
                let succ = &q[&next];
                r + succ[argmax_legal(succ) as usize]
            };
        }
        policy.insert(p.clone(), argmax_legal(&row));
        q.insert(p, row);
    }
    Ok(DpSolution { q, policy })
}
