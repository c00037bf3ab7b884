//! Off-policy REINFORCE against a periodically synchronized behavior
//! snapshot.
//!
//! Update `i` (1-based) first refreshes the snapshot when `(i - 1) % k == 0`,
//! so the first update always has a behavior policy and a run of `U` updates
//! performs exactly `ceil(U / k)` syncs. Trajectories are sampled from the
//! snapshot; the gradient `Σ_t ρ_t q̂_t ∇ log π(a_t | s_t)` is averaged over
//! the batch and applied as Adam ascent.

use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, DecodeMode, MetricReport, DEFAULT_ALPHA};
use crate::mdp::{Token, Trajectory, BOS, EOS};
use crate::reward::{splitmix, trajectory_rewards, TrajectoryReward};
use crate::scorer::{inputs_for, log_softmax_masked, AdamState, Gradient, ScorerParams};
use crate::task::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub updates: usize,
    pub sync_period: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rho_cap: Option<f64>,
    pub temperature: f64,
    pub seed: u64,
    /// Evaluate every this many updates (0: only after the last update).
    pub eval_every: usize,
    pub eval_decode: DecodeMode,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            updates: 2000,
            sync_period: 500,
            lr: 1e-4,
            batch_size: 16,
            rho_cap: None,
            temperature: 1.0,
            seed: 0,
            eval_every: 100,
            eval_decode: DecodeMode::Greedy,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.updates == 0 {
            return bad("updates must be at least 1".into());
        }
        if self.sync_period == 0 {
            return bad("sync period k must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(c) = self.rho_cap {
            if c.is_nan() || c < 1.0 {
                return bad(format!("importance-weight cap {c} must be at least 1"));
            }
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        Ok(())
    }

    pub fn is_sync(&self, update: usize) -> bool {
        (update - 1).is_multiple_of(self.sync_period)
    }
}

/// Frozen behavior parameters and the update at which they were taken.
#[derive(Debug, Clone)]
pub struct BehaviorSnapshot {
    params: Arc<ScorerParams>,
    taken_at: usize,
}

impl BehaviorSnapshot {
    pub fn new(params: &ScorerParams, taken_at: usize) -> Self {
        Self {
            params: Arc::new(params.snapshot()),
            taken_at,
        }
    }

    pub fn params(&self) -> &ScorerParams {
        &self.params
    }

    pub fn taken_at(&self) -> usize {
        self.taken_at
    }
}

/// Ancestral sampling from `softmax(f / temperature)`, recording the
/// behavior log-probability of every action.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &ScorerParams,
    source: &[Token],
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mdp = params.mdp();
    let mut h = params.encode(source)?;
    let mut tok = BOS;
    let mut actions = Vec::new();
    let mut logprobs = Vec::new();
    for pos in 0..mdp.horizon {
        let (hn, logits) = params.decode_step(source, &h, tok, pos);
        let lp = log_softmax_masked(&logits, temperature);
        if lp.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("behavior log-probabilities"));
        }
        let dist = WeightedIndex::new(lp.iter().map(|v| v.exp()))
            .map_err(|_| Error::NonFinite("behavior probabilities"))?;
        let a = dist.sample(rng) as Token;
        actions.push(a);
        logprobs.push(lp[a as usize]);
        if a == EOS {
            break;
        }
        h = hn;
        tok = a;
    }
    Trajectory::from_actions(&mdp, source.to_vec(), actions, logprobs)
}

fn rho(live_lp: f64, behavior_lp: f64, cap: Option<f64>) -> f64 {
    let r = (live_lp - behavior_lp).exp();
    cap.map_or(r, |c| r.min(c))
}

/// `ρ_t = π_live(a_t | s_t) / π_b(a_t | s_t)`, clamped above at `cap`.
pub fn importance_weights(traj: &Trajectory, live: &ScorerParams, cap: Option<f64>) -> Result<Vec<f64>> {
    live.check_source(&traj.source)?;
    let cache = live.forward(&traj.source, &inputs_for(&traj.actions));
    let w: Vec<f64> = traj
        .actions
        .iter()
        .zip(&cache.logits)
        .zip(&traj.behavior_logprobs)
        .map(|((&a, l), &b)| rho(log_softmax_masked(l, 1.0)[a as usize], b, cap))
        .collect();
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("importance weights"));
    }
    Ok(w)
}

/// `Σ_t ρ_t q̂_t ∇ log π_live(a_t | s_t)` for given weights.
pub fn policy_gradient(traj: &Trajectory, rho: &[f64], live: &ScorerParams) -> Result<Gradient> {
    let q = traj
        .rewards_to_go
        .as_ref()
        .ok_or_else(|| Error::InvalidTrajectory("rewards-to-go not computed".into()))?;
    if rho.len() != traj.len() || q.len() != traj.len() {
        return Err(Error::ShapeMismatch {
            expected: traj.len(),
            actual: rho.len().min(q.len()),
        });
    }
    live.check_source(&traj.source)?;
    let mut g = Gradient::zeros(live.len());
    live.sequence_logprob_grad(&traj.source, &traj.actions, &mut g, |_| {
        Ok(rho.iter().zip(q).map(|(r, q)| r * q).collect())
    })?;
    g.ensure_finite()?;
    Ok(g)
}

/// Importance weights and the weighted gradient in one forward/backward
/// pass. Returns the gradient and the weights.
fn fused_gradient(traj: &Trajectory, live: &ScorerParams, cap: Option<f64>) -> Result<(Gradient, Vec<f64>)> {
    let q = traj
        .rewards_to_go
        .as_ref()
        .ok_or_else(|| Error::InvalidTrajectory("rewards-to-go not computed".into()))?;
    let mut g = Gradient::zeros(live.len());
    let mut rhos = Vec::new();
    live.sequence_logprob_grad(&traj.source, &traj.actions, &mut g, |taken| {
        rhos = taken
            .iter()
            .zip(&traj.behavior_logprobs)
            .map(|(&l, &b)| rho(l, b, cap))
            .collect();
        if rhos.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("importance weights"));
        }
        Ok(rhos.iter().zip(q).map(|(r, q)| r * q).collect())
    })?;
    Ok((g, rhos))
}

fn stream(keys: &[u64]) -> ChaCha8Rng {
    let seed = keys
        .iter()
        .fold(0x6a09_e667_f3bc_c908u64, |acc, &k| splitmix(acc ^ splitmix(k)));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Source index for batch slot `slot` of update `update`.
pub fn pick_source(seed: u64, update: usize, slot: usize, n_sources: usize) -> usize {
    stream(&[seed, 1, update as u64, slot as u64]).gen_range(0..n_sources)
}

/// Sampling stream for one slot, keyed by seed, source index, update and slot.
pub fn trajectory_rng(seed: u64, source: usize, update: usize, slot: usize) -> ChaCha8Rng {
    stream(&[seed, 2, source as u64, update as u64, slot as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlCurveRow {
    pub update: usize,
    pub mean_total_reward: f64,
    pub mean_traj_len: f64,
    pub mean_rho: f64,
    pub eval_bleu2: Option<f64>,
    pub eval_bleu4: Option<f64>,
    pub sync_flag: bool,
    pub method: String,
}

#[derive(Debug, Clone)]
pub struct RlRun {
    pub params: ScorerParams,
    pub adam: AdamState,
    pub curve: Vec<RlCurveRow>,
    pub syncs: usize,
    /// Evaluations keyed by update; update 0 is the initial policy.
    pub evals: Vec<(usize, MetricReport)>,
    /// Action sequences sampled at update 1.
    pub first_batch: Vec<Vec<Token>>,
}

impl RlRun {
    pub fn final_eval(&self) -> Option<&MetricReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

pub fn write_rl_curve(path: &Path, rows: &[RlCurveRow]) -> Result<()> {
    crate::supervised::write_curve(path, rows)
}

pub type CheckpointHook<'a> = dyn FnMut(usize, &ScorerParams, &AdamState) -> Result<()> + 'a;

/// Options that do not affect the optimization itself.
pub struct RlHooks<'a> {
    pub method: &'a str,
    /// Held-out pairs for the periodic evaluation.
    pub eval_set: Option<&'a [Pair]>,
    /// Called after every update `i` with `i % k == 0`.
    pub checkpoint: Option<&'a mut CheckpointHook<'a>>,
}

impl Default for RlHooks<'_> {
    fn default() -> Self {
        Self {
            method: "rl",
            eval_set: None,
            checkpoint: None,
        }
    }
}

struct SlotOutcome {
    actions: Vec<Token>,
    total_reward: f64,
    len: usize,
    rho_sum: f64,
    grad: Gradient,
}

fn run_slot<R: TrajectoryReward + ?Sized>(
    sources: &[Vec<Token>],
    reward: &R,
    behavior: &ScorerParams,
    live: &ScorerParams,
    cfg: &RlConfig,
    update: usize,
    slot: usize,
) -> Result<SlotOutcome> {
    let idx = pick_source(cfg.seed, update, slot, sources.len());
    let mut rng = trajectory_rng(cfg.seed, idx, update, slot);
    let mut traj = sample_trajectory(behavior, &sources[idx], cfg.temperature, &mut rng)?;
    trajectory_rewards(reward, &mut traj)?;
    let total_reward = traj
        .rewards_to_go
        .as_ref()
        .and_then(|q| q.first().copied())
        .unwrap_or(0.0);
    let (grad, rhos) = fused_gradient(&traj, live, cfg.rho_cap)?;
    Ok(SlotOutcome {
        len: traj.len(),
        rho_sum: rhos.iter().sum(),
        actions: traj.actions,
        total_reward,
        grad,
    })
}

fn evaluate(params: &ScorerParams, set: &[Pair], cfg: &RlConfig, method: &str) -> Result<MetricReport> {
    Ok(evaluate_model(params, set, cfg.eval_decode, method, DEFAULT_ALPHA)?.report)
}

/// Train from `init` on the non-parallel `sources` with the given reward.
pub fn train_rl<R: TrajectoryReward + ?Sized>(
    sources: &[Vec<Token>],
    reward: &R,
    init: ScorerParams,
    cfg: &RlConfig,
    mut hooks: RlHooks<'_>,
) -> Result<RlRun> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Empty("non-parallel sources"));
    }
    for s in sources {
        init.check_source(s)?;
    }
    let mut live = init;
    let mut adam = AdamState::new(live.len());
    let mut behavior = BehaviorSnapshot::new(&live, 1);
    let mut syncs = 0;
    let mut curve = Vec::with_capacity(cfg.updates);
    let mut evals = Vec::new();
    let mut first_batch = Vec::new();
    if let Some(set) = hooks.eval_set {
        evals.push((0, evaluate(&live, set, cfg, hooks.method)?));
    }
    for update in 1..=cfg.updates {
        let sync = cfg.is_sync(update);
        if sync {
            behavior = BehaviorSnapshot::new(&live, update);
            syncs += 1;
        }
        let diverged = |what: String, last_good: &ScorerParams| Error::Diverged {
            step: update,
            what,
            last_good: Box::new(last_good.clone()),
        };
        let outcomes: Result<Vec<SlotOutcome>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|slot| run_slot(sources, reward, behavior.params(), &live, cfg, update, slot))
            .collect();
        let outcomes = match outcomes {
            Ok(o) => o,
            Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), &live)),
            Err(e) => return Err(e),
        };
        let mut grad = Gradient::zeros(live.len());
        let (mut total, mut len, mut rho_sum) = (0.0, 0usize, 0.0);
        for o in &outcomes {
            grad.add_assign(&o.grad);
            total += o.total_reward;
            len += o.len;
            rho_sum += o.rho_sum;
        }
        if update == 1 {
            first_batch = outcomes.into_iter().map(|o| o.actions).collect();
        }
        let b = cfg.batch_size as f64;
        grad.scale(1.0 / b);
        if !grad.is_finite() || !total.is_finite() {
            return Err(diverged("non-finite policy gradient".into(), &live));
        }
        let before = live.snapshot();
        adam.step(&mut live, &grad.negated(), cfg.lr)?;
        if live.values().iter().any(|v| !v.is_finite()) {
            return Err(diverged("non-finite parameters".into(), &before));
        }
        let mut row = RlCurveRow {
            update,
            mean_total_reward: total / b,
            mean_traj_len: len as f64 / b,
            mean_rho: rho_sum / len.max(1) as f64,
            eval_bleu2: None,
            eval_bleu4: None,
            sync_flag: sync,
            method: hooks.method.to_string(),
        };
        let due = update == cfg.updates || (cfg.eval_every > 0 && update % cfg.eval_every == 0);
        if let (true, Some(set)) = (due, hooks.eval_set) {
            let report = evaluate(&live, set, cfg, hooks.method)?;
            row.eval_bleu2 = Some(report.bleu2);
            row.eval_bleu4 = Some(report.bleu4);
            evals.push((update, report));
        }
        curve.push(row);
        if update % cfg.sync_period == 0 {
            if let Some(cb) = hooks.checkpoint.as_mut() {
                cb(update, &live, &adam)?;
            }
        }
    }
    Ok(RlRun {
        params: live,
        adam,
        curve,
        syncs,
        evals,
        first_batch,
    })
}
