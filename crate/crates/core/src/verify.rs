//! Exact property suites on micro instances. Each suite draws its own
//! random instances from a fixed seed and checks an identity against an
//! independent computation.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::ibleu;
use crate::mdp::{TextMdp, Token, Vocab, BOS, EOS};
use crate::oracle::{dp_optimal, enumerate, exact_policy_gradient, LogitTable, MicroSpec, SoftmaxPolicy};
use crate::reward::{
    rewards_to_go, splitmix, theorem2_adversarial, theorem2_certificate, RewardFn, ShiftField,
    TrajectoryReward,
};
use crate::rl::sample_trajectory;
use crate::scorer::{argmax_legal, LogitSource, LogprobItem, ScorerConfig, ScorerParams};
use crate::supervised::{irl_nll, tf_loss};
use crate::task::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Thm1,
    Thm2,
    Thm3,
    DpRoundtrip,
    IsUnbiased,
    Gradcheck,
    Telescoping,
    Ibleu,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Thm1,
        Suite::Thm2,
        Suite::Thm3,
        Suite::DpRoundtrip,
        Suite::IsUnbiased,
        Suite::Gradcheck,
        Suite::Telescoping,
        Suite::Ibleu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Thm1 => "thm1",
            Suite::Thm2 => "thm2",
            Suite::Thm3 => "thm3",
            Suite::DpRoundtrip => "dp-roundtrip",
            Suite::IsUnbiased => "is-unbiased",
            Suite::Gradcheck => "gradcheck",
            Suite::Telescoping => "telescoping",
            Suite::Ibleu => "ibleu",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed deviation from the checked identity.
    pub worst: f64,
    pub detail: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = match suite {
        Suite::Thm1 => thm1(seed)?,
        Suite::Thm2 => thm2(seed)?,
        Suite::Thm3 => thm3(seed)?,
        Suite::DpRoundtrip => dp_roundtrip(seed)?,
        Suite::IsUnbiased => is_unbiased(seed)?,
        Suite::Gradcheck => gradcheck(seed)?,
        Suite::Telescoping => telescoping(seed)?,
        Suite::Ibleu => ibleu_rows(),
    };
    r.elapsed = start.elapsed();
    Ok(r)
}

fn report(suite: Suite, passed: bool, cases: usize, worst: f64, detail: String) -> SuiteReport {
    SuiteReport {
        suite: suite.name().into(),
        passed,
        cases,
        worst,
        detail,
        elapsed: Duration::ZERO,
    }
}

fn rng_for(seed: u64, suite: Suite, case: usize) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for b in suite.name().bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h ^ case as u64))
}

/// Micro scorer with `actions` legal actions (vocabulary `actions + 2`).
fn micro_scorer(rng: &mut ChaCha8Rng, actions: usize, horizon: usize, scale: f64) -> Result<ScorerParams> {
    let cfg = ScorerConfig {
        vocab_size: actions + 2,
        embed_dim: rng.gen_range(2..=4),
        hidden_dim: rng.gen_range(2..=5),
        horizon,
        aligned_source: rng.gen_bool(0.5),
    };
    ScorerParams::init_uniform(cfg, rng.gen(), scale)
}

fn random_data(rng: &mut ChaCha8Rng, vocab: &Vocab, len: usize) -> Vec<Token> {
    (0..len)
        .map(|_| vocab.data(rng.gen_range(0..vocab.data_tokens())))
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Trajectory NLL from explicit factorization equals the summed unsmoothed
/// teacher-forcing loss.
fn thm1(seed: u64) -> Result<SuiteReport> {
    let cases = 100;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = rng_for(seed, Suite::Thm1, case);
        let actions = rng.gen_range(3..=5);
        let horizon = rng.gen_range(2..=6);
        let p = micro_scorer(&mut rng, actions, horizon, 1.0)?;
        let vocab = p.config().vocab();
        let batch: Vec<Pair> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let src_len = rng.gen_range(0..=4);
                let src = random_data(&mut rng, &vocab, src_len);
                let tgt_len = rng.gen_range(0..horizon);
                let mut tgt = random_data(&mut rng, &vocab, tgt_len);
                tgt.push(EOS);
                Pair { src, tgt }
            })
            .collect();
        let tf = tf_loss(&p, &batch, 0.0)?;
        let irl = irl_nll(&p, &batch)?;
        worst = worst.max((irl - tf.loss * tf.tokens as f64).abs());
    }
    Ok(report(
        Suite::Thm1,
        worst <= 1e-10,
        cases,
        worst,
        format!("max |irl_nll - summed tf_loss| = {worst:.3e} (tol 1e-10)"),
    ))
}

/// Reward error is at most twice the value error; the adversarial
/// construction approaches the factor.
fn thm2(seed: u64) -> Result<SuiteReport> {
    let mdp = TextMdp::new(Vocab::new(5)?, 3)?;
    let spec = MicroSpec::new(mdp, vec![3, 4])?;
    let mut max_ratio: f64 = 0.0;
    let mut ok = true;
    let mut trials = 0;
    for (i, eps) in [0.01, 0.1, 1.0].into_iter().enumerate() {
        // 334 + 333 + 333 = 1000 perturbations in total.
        let n = if i == 0 { 334 } else { 333 };
        for t in 0..n {
            let case_seed = splitmix(seed ^ (i as u64) << 32 ^ t as u64);
            let q_star = LogitTable::random(spec.mdp, spec.source.clone(), case_seed, 2.0);
            let rep = theorem2_certificate(&q_star, eps, 1, case_seed ^ 1)?;
            trials += rep.trials;
            ok &= rep.within_bound;
            max_ratio = max_ratio.max(rep.max_ratio);
        }
    }
    let q_star = LogitTable::random(spec.mdp, spec.source.clone(), seed, 2.0);
    let adv = theorem2_adversarial(&q_star, 0.1)?;
    let passed = ok && max_ratio <= 2.0 * (1.0 + 1e-12) && adv.max_ratio >= 1.9;
    Ok(report(
        Suite::Thm2,
        passed,
        trials,
        max_ratio,
        format!(
            "max ratio over {trials} perturbations = {max_ratio:.4} (bound 2); adversarial ratio = {:.4} (need >= 1.9)",
            adv.max_ratio
        ),
    ))
}

fn random_spec(rng: &mut ChaCha8Rng) -> Result<MicroSpec> {
    let actions = rng.gen_range(2..=4);
    let horizon = if actions == 4 {
        rng.gen_range(2..=3)
    } else {
        rng.gen_range(2..=4)
    };
    let mdp = TextMdp::new(Vocab::new(actions + 2)?, horizon)?;
    let src_len = rng.gen_range(1..=3);
    let source = random_data(rng, &mdp.vocab, src_len);
    MicroSpec::new(mdp, source)
}

fn spec_scorer(rng: &mut ChaCha8Rng, spec: &MicroSpec, scale: f64) -> Result<ScorerParams> {
    micro_scorer(rng, spec.mdp.vocab.num_legal_actions(), spec.mdp.horizon, scale)
}

/// A per-state shift moves every reward-to-go by exactly the shift of its
/// state and leaves the expected off-policy gradient unchanged.
fn thm3(seed: u64) -> Result<SuiteReport> {
    let cases = 50;
    let (mut worst_q, mut worst_g): (f64, f64) = (0.0, 0.0);
    for case in 0..cases {
        let mut rng = rng_for(seed, Suite::Thm3, case);
        let spec = random_spec(&mut rng)?;
        let f = spec_scorer(&mut rng, &spec, 1.5)?;
        let live = spec_scorer(&mut rng, &spec, 1.0)?;
        let behavior = LogitTable::random(spec.mdp, spec.source.clone(), rng.gen(), 1.0);
        let field = ShiftField::Hashed {
            seed: rng.gen(),
            amplitude: rng.gen_range(0.1..5.0),
        };
        let base = RewardFn::raw(&f);
        let shifted = RewardFn::raw(&f).apply_shift(field)?;
        for (traj, _) in enumerate(&spec, SoftmaxPolicy::new(&behavior))? {
            let q = rewards_to_go(&base.rewards(&traj)?);
            let qs = rewards_to_go(&shifted.rewards(&traj)?);
            for t in 0..traj.len() {
                let c = field.value(&traj.source, &traj.prefix(t));
                worst_q = worst_q.max((qs[t] - q[t] - c).abs());
            }
        }
        let g = exact_policy_gradient(&spec, &live, SoftmaxPolicy::new(&behavior), &base)?;
        let gs = exact_policy_gradient(&spec, &live, SoftmaxPolicy::new(&behavior), &shifted)?;
        worst_g = worst_g.max(max_abs_diff(g.off_policy.values(), gs.off_policy.values()));
    }
    Ok(report(
        Suite::Thm3,
        worst_q <= 1e-12 && worst_g <= 1e-9,
        cases,
        worst_q.max(worst_g),
        format!(
            "(a) max |q'_t - q_t - c(s_t)| = {worst_q:.3e} (tol 1e-12); (b) max gradient difference = {worst_g:.3e} (tol 1e-9)"
        ),
    ))
}

/// Backward induction on the induced reward recovers the scorer's logits
/// and its greedy policy.
fn dp_roundtrip(seed: u64) -> Result<SuiteReport> {
    let cases = 100;
    let mut worst: f64 = 0.0;
    let mut policy_mismatch = 0;
    for case in 0..cases {
        let mut rng = rng_for(seed, Suite::DpRoundtrip, case);
        let spec = random_spec(&mut rng)?;
        let f = spec_scorer(&mut rng, &spec, 2.0)?;
        let table = LogitTable::tabulate(&f, &spec)?;
        let dp = dp_optimal(&spec, &RewardFn::raw(&f))?;
        for (prefix, row) in table.iter() {
            let q = &dp.q[prefix];
            for a in spec.mdp.vocab.legal_actions() {
                worst = worst.max((q[a as usize] - row[a as usize]).abs());
            }
            if dp.policy[prefix] != argmax_legal(row) {
                policy_mismatch += 1;
            }
        }
    }
    Ok(report(
        Suite::DpRoundtrip,
        worst <= 1e-9 && policy_mismatch == 0,
        cases,
        worst,
        format!("max |q* - f| = {worst:.3e} (tol 1e-9); greedy-policy mismatches = {policy_mismatch}"),
    ))
}

/// Exact expected off-policy estimator (per-step weights) against the exact
/// on-policy gradient. The whole-trajectory-ratio form is reported too.
fn is_unbiased(seed: u64) -> Result<SuiteReport> {
    let cases = 50;
    let (mut worst, mut worst_traj, mut scale): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for case in 0..cases {
        let mut rng = rng_for(seed, Suite::IsUnbiased, case);
        let spec = random_spec(&mut rng)?;
        let live = spec_scorer(&mut rng, &spec, 1.0)?;
        let behavior = spec_scorer(&mut rng, &spec, 1.0)?;
        let f = spec_scorer(&mut rng, &spec, 1.5)?;
        let g = exact_policy_gradient(&spec, &live, SoftmaxPolicy::new(&behavior), &RewardFn::raw(&f))?;
        worst = worst.max(max_abs_diff(g.off_policy.values(), g.on_policy.values()));
        worst_traj = worst_traj.max(max_abs_diff(g.trajectory_ratio.values(), g.on_policy.values()));
        scale = scale.max(g.on_policy.max_abs());
    }
    Ok(report(
        Suite::IsUnbiased,
        worst < 1e-9,
        cases,
        worst,
        format!(
            "per-step weights: max |off - on| = {worst:.3e} (tol 1e-9, largest |on| = {scale:.3e}); \
             trajectory-ratio weights: max |off - on| = {worst_traj:.3e}"
        ),
    ))
}

/// Reverse-mode gradient of a weighted log-likelihood against central
/// finite differences.
fn gradcheck(seed: u64) -> Result<SuiteReport> {
    let cases = 20;
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for case in 0..cases {
        let mut rng = rng_for(seed, Suite::Gradcheck, case);
        let cfg = ScorerConfig {
            vocab_size: 4 + rng.gen_range(0..3),
            embed_dim: 3,
            hidden_dim: 4,
            horizon: 4,
            aligned_source: case % 2 == 0,
        };
        let p = ScorerParams::init_uniform(cfg, rng.gen(), 1.0)?;
        let vocab = cfg.vocab();
        let mut owned = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            let src_len = rng.gen_range(0..=3);
            let src = random_data(&mut rng, &vocab, src_len);
            let pre_len = rng.gen_range(0..cfg.horizon);
            let mut prefix = vec![BOS];
            prefix.extend(random_data(&mut rng, &vocab, pre_len));
            let legal: Vec<Token> = vocab.legal_actions().collect();
            let action = legal[rng.gen_range(0..legal.len())];
            owned.push((src, prefix, action, rng.gen_range(-2.0..2.0)));
        }
        let items: Vec<LogprobItem> = owned
            .iter()
            .map(|(s, p, a, w)| LogprobItem {
                source: s,
                prefix: p,
                action: *a,
                weight: *w,
            })
            .collect();
        let objective = |q: &ScorerParams| -> Result<f64> {
            let mut total = 0.0;
            for it in &items {
                total += it.weight * q.policy_logprobs(it.source, it.prefix)?[it.action as usize];
            }
            Ok(total)
        };
        let g = p.weighted_logprob_grad(&items)?;
        let mut q = p.clone();
        let mut at = |i: usize, x: f64| -> Result<f64> {
            let orig = q.values()[i];
            q.values_mut()[i] = orig + x;
            let v = objective(&q);
            q.values_mut()[i] = orig;
            v
        };
        for i in 0..p.len() {
            // Fourth-order central stencil.
            let fd = (8.0 * (at(i, h)? - at(i, -h)?) - (at(i, 2.0 * h)? - at(i, -2.0 * h)?)) / (12.0 * h);
            if fd.abs() > 1e-8 {
                checked += 1;
                worst = worst.max((g.values()[i] - fd).abs() / fd.abs());
            }
        }
    }
    Ok(report(
        Suite::Gradcheck,
        worst < 1e-4,
        cases,
        worst,
        format!("max relative error = {worst:.3e} over {checked} coordinates (tol 1e-4)"),
    ))
}

/// Induced rewards sum to the first logit along greedy rollouts and never
/// exceed it along any rollout.
fn telescoping(seed: u64) -> Result<SuiteReport> {
    let scorers = 10;
    let rollouts = 1000;
    let (mut worst_greedy, mut worst_excess): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for case in 0..scorers {
        let mut rng = rng_for(seed, Suite::Telescoping, case);
        let cfg = ScorerConfig {
            embed_dim: 6,
            hidden_dim: 8,
            ..ScorerConfig::new(12, 10)
        };
        let f = ScorerParams::init_uniform(cfg, rng.gen(), 1.0)?;
        let reward = RewardFn::raw(&f);
        let vocab = cfg.vocab();
        let src_len = rng.gen_range(1..=6);
        let source = random_data(&mut rng, &vocab, src_len);
        let first = f.logits(&source, &[BOS])?;

        let greedy = crate::eval::greedy_decode(&f, &source)?;
        let traj = crate::mdp::Trajectory::from_actions(
            &f.mdp(),
            source.clone(),
            greedy.clone(),
            vec![0.0; greedy.len()],
        )?;
        let q1 = rewards_to_go(&reward.rewards(&traj)?)[0];
        worst_greedy = worst_greedy.max((q1 - first[greedy[0] as usize]).abs());

        for _ in 0..rollouts / scorers {
            let traj = sample_trajectory(&f, &source, 1.0, &mut rng)?;
            let q1 = rewards_to_go(&reward.rewards(&traj)?)[0];
            worst_excess = worst_excess.max(q1 - first[traj.actions[0] as usize]);
        }
    }
    Ok(report(
        Suite::Telescoping,
        worst_greedy <= 1e-9 && worst_excess <= 1e-9,
        scorers + rollouts,
        worst_greedy,
        format!(
            "greedy: max |q1 - f(s1,a1)| = {worst_greedy:.3e} (tol 1e-9); \
             {rollouts} sampled rollouts: max q1 - f(s1,a1) = {worst_excess:.3e} (need <= 1e-9)"
        ),
    ))
}

fn ibleu_rows() -> SuiteReport {
    let a = ibleu(30.83, 44.77, 0.1);
    let b = ibleu(29.88, 100.0, 0.1);
    let worst = (a - 23.27).abs().max((b - 16.89).abs());
    report(
        Suite::Ibleu,
        worst <= 0.005,
        2,
        worst,
        format!("ibleu(30.83, 44.77) = {a:.4} (want 23.27); ibleu(29.88, 100) = {b:.4} (want 16.89)"),
    )
}
