//! Comparison methods: self-training on pseudo-targets, a learned BLEU
//! regressor used as an RL reward, and end-of-sequence reward relocation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{greedy_decode, sentence_bleu, strip_eos, Smoothing};
use crate::mdp::{Token, Trajectory, BOS, EOS};
use crate::reward::{splitmix, TrajectoryReward};
use crate::rl::sample_trajectory;
use crate::scorer::{AdamState, Checkpoint, CheckpointKind, Gradient, ScorerParams, SeqCache};
use crate::supervised::{split_validation, train_on_split, SupervisedRun, TfConfig};
use crate::task::Pair;

#[derive(Debug, Clone)]
pub struct SelfTrainRun {
    pub run: SupervisedRun,
    pub pseudo: Vec<Pair>,
    /// Sources whose greedy decode hit the horizon without `eos`.
    pub dropped: usize,
}

/// Greedy pseudo-targets for every source.
pub fn pseudo_label(params: &ScorerParams, sources: &[Vec<Token>]) -> Result<(Vec<Pair>, usize)> {
    let decoded: Vec<Vec<Token>> = sources
        .par_iter()
        .map(|s| greedy_decode(params, s))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(sources.len());
    let mut dropped = 0;
    for (src, tgt) in sources.iter().zip(decoded) {
        if tgt.last() == Some(&EOS) {
            pairs.push(Pair {
                src: src.clone(),
                tgt,
            });
        } else {
            dropped += 1;
        }
    }
    Ok((pairs, dropped))
}

/// Continue teacher-forced training of `supervised` on its own greedy
/// outputs for `sources`, early-stopping on `val`.
pub fn self_train(
    sources: &[Vec<Token>],
    supervised: &ScorerParams,
    val: &[Pair],
    cfg: &TfConfig,
) -> Result<SelfTrainRun> {
    let (pseudo, dropped) = pseudo_label(supervised, sources)?;
    if pseudo.is_empty() {
        return Err(Error::Empty(
            "pseudo-targets (every greedy decode hit the horizon)",
        ));
    }
    let run = train_on_split(supervised.clone(), &pseudo, val, cfg)?;
    Ok(SelfTrainRun { run, pseudo, dropped })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Score predictor: the scorer's encoder–decoder read over a hypothesis,
/// mean-pooled decoder states, then a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub scorer: ScorerParams,
    /// `hidden_dim` weights followed by the bias.
    pub head: Vec<f64>,
}

impl Regressor {
    pub fn new(scorer: ScorerParams) -> Self {
        let head = vec![0.0; scorer.config().hidden_dim + 1];
        Self { scorer, head }
    }

    fn check(&self, source: &[Token], hyp: &[Token]) -> Result<()> {
        self.scorer.check_source(source)?;
        let vocab = self.scorer.config().vocab();
        hyp.iter().try_for_each(|&t| vocab.check(t))?;
        if hyp.len() > self.scorer.config().horizon {
            return Err(Error::InvalidTrajectory(
                "hypothesis longer than the horizon".into(),
            ));
        }
        Ok(())
    }

    fn run(&self, source: &[Token], hyp: &[Token]) -> SeqCache {
        let mut inputs = Vec::with_capacity(hyp.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(hyp);
        self.scorer.forward(source, &inputs)
    }

    fn logit(&self, pooled: &[f64]) -> f64 {
        let (w, b) = self.head.split_at(pooled.len());
        w.iter().zip(pooled).map(|(a, x)| a * x).sum::<f64>() + b[0]
    }

    /// Predicted score after each hypothesis token: entry `t` scores the
    /// prefix `hyp[..=t]`.
    pub fn prefix_scores(&self, source: &[Token], hyp: &[Token]) -> Result<Vec<f64>> {
        self.check(source, hyp)?;
        let cache = self.run(source, hyp);
        let mut sum = vec![0.0; self.head.len() - 1];
        let mut out = Vec::with_capacity(hyp.len());
        for (t, h) in cache.hidden.iter().enumerate().skip(1) {
            for (s, x) in sum.iter_mut().zip(h) {
                *s += x;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / t as f64).collect();
            out.push(sigmoid(self.logit(&mean)));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regressor output"));
        }
        Ok(out)
    }

    /// Predicted score of the full hypothesis; 0 for an empty one.
    pub fn predict(&self, source: &[Token], hyp: &[Token]) -> Result<f64> {
        Ok(self.prefix_scores(source, hyp)?.last().copied().unwrap_or(0.0))
    }

    /// Squared error against `target` and its gradient (scorer part, head part).
    fn loss_grad(&self, source: &[Token], hyp: &[Token], target: f64) -> (f64, Gradient, Vec<f64>) {
        let hd = self.head.len() - 1;
        let cache = self.run(source, hyp);
        let n = hyp.len();
        let mut g = Gradient::zeros(self.scorer.len());
        let mut gh = vec![0.0; hd + 1];
        if n == 0 {
            return (target * target, g, gh);
        }
        let mut pooled = vec![0.0; hd];
        for h in &cache.hidden[1..] {
            for (p, x) in pooled.iter_mut().zip(h) {
                *p += x / n as f64;
            }
        }
        let pred = sigmoid(self.logit(&pooled));
        let err = pred - target;
        let dz = 2.0 * err * pred * (1.0 - pred);
        for j in 0..hd {
            gh[j] = dz * pooled[j];
        }
        gh[hd] = dz;
        let dpool: Vec<f64> = self.head[..hd].iter().map(|w| dz * w / n as f64).collect();
        let mut dhidden = vec![Vec::new(); cache.hidden.len()];
        for d in dhidden.iter_mut().skip(1) {
            *d = dpool.clone();
        }
        self.scorer.backward(&cache, &[], Some(&dhidden), &mut g);
        (err * err, g, gh)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut c = Checkpoint::from_params(&self.scorer, seed, None);
        c.kind = CheckpointKind::Regressor;
        c.head = Some(crate::scorer::encode_f64s(&self.head));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != CheckpointKind::Regressor {
            return Err(Error::Schema("checkpoint does not hold a regressor".into()));
        }
        let scorer = c.params()?;
        let head = c
            .head()?
            .ok_or_else(|| Error::Schema("regressor head missing".into()))?;
        if head.len() != scorer.config().hidden_dim + 1 {
            return Err(Error::Schema("regressor head has the wrong length".into()));
        }
        Ok(Self { scorer, head })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    /// Sampled hypotheses per source, in addition to the reference.
    pub hypotheses: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hypotheses: 4,
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            temperature: 1.0,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// One regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub src: Vec<Token>,
    pub hyp: Vec<Token>,
    pub target: f64,
}

/// Regression target: add-one smoothed sentence BLEU-4 of the content tokens.
pub fn bleu_target(hyp: &[Token], reference: &[Token]) -> f64 {
    sentence_bleu(strip_eos(hyp), strip_eos(reference), 4, Smoothing::AddOne)
}

/// Reference plus `cfg.hypotheses` samples from `model` for every pair.
pub fn build_triples(model: &ScorerParams, pairs: &[Pair], cfg: &RegressorConfig) -> Result<Vec<Triple>> {
    let per_pair: Vec<Vec<Triple>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(i as u64 + 1)));
            let mut out = vec![Triple {
                src: p.src.clone(),
                hyp: p.tgt.clone(),
                target: bleu_target(&p.tgt, &p.tgt),
            }];
            for _ in 0..cfg.hypotheses {
                let t = sample_trajectory(model, &p.src, cfg.temperature, &mut rng)?;
                out.push(Triple {
                    src: p.src.clone(),
                    target: bleu_target(&t.actions, &p.tgt),
                    hyp: t.actions,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressorCurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RegressorRun {
    pub regressor: Regressor,
    pub curve: Vec<RegressorCurveRow>,
    /// Pairs held out from fitting.
    pub held_out: Vec<Pair>,
}

fn mse(reg: &Regressor, triples: &[Triple]) -> Result<f64> {
    let preds: Vec<f64> = triples
        .par_iter()
        .map(|t| reg.predict(&t.src, &t.hyp))
        .collect::<Result<_>>()?;
    let sum: f64 = preds
        .iter()
        .zip(triples)
        .map(|(p, t)| (p - t.target).powi(2))
        .sum();
    Ok(sum / triples.len().max(1) as f64)
}

/// Fit a regressor initialized from `supervised` to sentence-BLEU targets
/// built from the parallel pairs. Returns the best held-out epoch.
pub fn train_regressor(
    pairs: &[Pair],
    supervised: &ScorerParams,
    cfg: &RegressorConfig,
) -> Result<RegressorRun> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "regressor needs lr > 0, batch ≥ 1, epochs ≥ 1".into(),
        ));
    }
    let (train_pairs, held_out) = split_validation(pairs, cfg.val_fraction, cfg.seed)?;
    let train = build_triples(supervised, &train_pairs, cfg)?;
    let val = build_triples(
        supervised,
        &held_out,
        &RegressorConfig {
            seed: cfg.seed ^ 0xa5a5,
            ..*cfg
        },
    )?;
    let mut reg = Regressor::new(supervised.clone());
    let mut adam = AdamState::new(reg.scorer.len());
    let mut adam_head = AdamState::new(reg.head.len());
    let mut best = reg.clone();
    let mut best_val = mse(&reg, &val)?;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(
            cfg.seed ^ (epoch as u64) << 20,
        )));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, Gradient, Vec<f64>)> = idx
                .par_iter()
                .map(|&i| reg.loss_grad(&train[i].src, &train[i].hyp, train[i].target))
                .collect();
            let mut g = Gradient::zeros(reg.scorer.len());
            let mut gh = vec![0.0; reg.head.len()];
            for (l, pg, ph) in &parts {
                loss_sum += l;
                g.add_assign(pg);
                for (a, b) in gh.iter_mut().zip(ph) {
                    *a += b;
                }
            }
            let k = 1.0 / idx.len() as f64;
            g.scale(k);
            gh.iter_mut().for_each(|v| *v *= k);
            if !g.is_finite() || gh.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: epoch,
                    what: "non-finite regressor gradient".into(),
                    last_good: Box::new(best.scorer),
                });
            }
            adam.step(&mut reg.scorer, &g, cfg.lr)?;
            adam_head.step_slice(&mut reg.head, &gh, cfg.lr)?;
        }
        let val_loss = mse(&reg, &val)?;
        curve.push(RegressorCurveRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = reg.clone();
        }
    }
    Ok(RegressorRun {
        regressor: best,
        curve,
        held_out,
    })
}

/// Share of `pairs` for which the reference is scored above a uniformly
/// random token string of the same length.
pub fn ranking_accuracy(reg: &Regressor, pairs: &[Pair], seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ranking pairs"));
    }
    let vocab = reg.scorer.config().vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    let mut wins = 0;
    for p in pairs {
        let mut random: Vec<Token> = (1..p.tgt.len())
            .map(|_| vocab.data(rng.gen_range(0..vocab.data_tokens())))
            .collect();
        random.push(EOS);
        if reg.predict(&p.src, &p.tgt)? > reg.predict(&p.src, &random)? {
            wins += 1;
        }
    }
    Ok(wins as f64 / pairs.len() as f64)
}

/// Regressor used as an RL reward. Sparse: the full-hypothesis score at the
/// last step. Dense: differences of consecutive prefix scores, which
/// telescope to the same total.
#[derive(Debug, Clone)]
pub struct RegressionReward {
    pub regressor: Regressor,
    pub dense: bool,
}

impl TrajectoryReward for RegressionReward {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let scores = self.regressor.prefix_scores(&traj.source, &traj.actions)?;
        let n = scores.len();
        if self.dense {
            let mut prev = 0.0;
            Ok(scores
                .into_iter()
                .map(|s| {
                    let r = s - prev;
                    prev = s;
                    r
                })
                .collect())
        } else {
            let mut r = vec![0.0; n];
            if let Some(last) = r.last_mut() {
                *last = scores[n - 1];
            }
            Ok(r)
        }
    }
}

/// Unsmoothed sentence BLEU-4 against the reference of the trajectory's
/// source, paid at the last step.
#[derive(Debug, Clone)]
pub struct SentenceBleuReward {
    references: HashMap<Vec<Token>, Vec<Token>>,
}

impl SentenceBleuReward {
    /// The first pair wins when a source occurs more than once.
    pub fn new(pairs: &[Pair]) -> Self {
        let mut references = HashMap::new();
        for p in pairs {
            references.entry(p.src.clone()).or_insert_with(|| p.tgt.clone());
        }
        Self { references }
    }
}

impl TrajectoryReward for SentenceBleuReward {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let reference = self
            .references
            .get(&*traj.source)
            .ok_or_else(|| Error::InvalidTrajectory("no reference for this source".into()))?;
        let mut r = vec![0.0; traj.len()];
        if let Some(last) = r.last_mut() {
            *last = sentence_bleu(strip_eos(&traj.actions), strip_eos(reference), 4, Smoothing::None);
        }
        Ok(r)
    }
}

/// Moves the whole trajectory reward of `R` onto the final step.
#[derive(Debug, Clone)]
pub struct Sparsified<R>(pub R);

/// Zeros everywhere except the last entry, which holds the total.
pub fn sparsify(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    if let Some(last) = out.last_mut() {
        *last = rewards.iter().sum();
    }
    out
}

impl<R: TrajectoryReward> TrajectoryReward for Sparsified<R> {
    fn rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        Ok(sparsify(&self.0.rewards(traj)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::rewards_to_go;
    use crate::scorer::ScorerConfig;

    fn micro() -> ScorerConfig {
        ScorerConfig {
            embed_dim: 4,
            hidden_dim: 5,
            ..ScorerConfig::new(8, 6)
        }
    }

    #[test]
    fn sparsify_relocates_sum() {
        let s = sparsify(&[0.5, -0.2, 0.3]);
        assert_eq!(s[..2], [0.0, 0.0]);
        assert!((s[2] - 0.6).abs() < 1e-15);
        let r = [0.5, -0.2, 0.3];
        let (q, qs) = (rewards_to_go(&r), rewards_to_go(&s));
        assert!((q[0] - qs[0]).abs() < 1e-15);
        assert!(qs.iter().all(|v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn bleu_targets() {
        let r = vec![3, 4, 5, 6, EOS];
        assert_eq!(bleu_target(&r, &r), 1.0);
        assert_eq!(bleu_target(&[7, 7, 7, EOS], &r), 0.0);
    }

    #[test]
    fn dense_rewards_telescope_to_sparse() {
        let reg = Regressor {
            head: (0..6).map(|i| 0.3 * i as f64 - 0.7).collect(),
            scorer: ScorerParams::init_uniform(micro(), 2, 0.5).unwrap(),
        };
        let mdp = micro().mdp();
        let traj = Trajectory::from_actions(&mdp, vec![3, 4], vec![5, 6, 3, EOS], vec![0.0; 4]).unwrap();
        let dense = RegressionReward {
            regressor: reg.clone(),
            dense: true,
        }
        .rewards(&traj)
        .unwrap();
        let sparse = RegressionReward {
            regressor: reg.clone(),
            dense: false,
        }
        .rewards(&traj)
        .unwrap();
        let total: f64 = dense.iter().sum();
        assert!((total - sparse[3]).abs() < 1e-12);
        assert!((sparse[3] - reg.predict(&[3, 4], &traj.actions).unwrap()).abs() < 1e-15);
        let q = rewards_to_go(&sparse);
        assert!(q.iter().all(|&v| v == q[0]));
    }

    #[test]
    fn regressor_gradient_matches_finite_differences() {
        let reg = Regressor {
            head: vec![0.4, -0.3, 0.2, 0.5, -0.1, 0.05],
            scorer: ScorerParams::init_uniform(micro(), 3, 0.7).unwrap(),
        };
        let (src, hyp, y) = (vec![3, 5], vec![4, 6, EOS], 0.3);
        let (_, g, gh) = reg.loss_grad(&src, &hyp, y);
        let loss = |r: &Regressor| (r.predict(&src, &hyp).unwrap() - y).powi(2);
        let h = 1e-6;
        for i in (0..reg.scorer.len()).step_by(5) {
            let mut p = reg.clone();
            p.scorer.values_mut()[i] += h;
            let mut m = reg.clone();
            m.scorer.values_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-7, "coord {i}");
        }
        for (i, ghi) in gh.iter().enumerate() {
            let mut p = reg.clone();
            p.head[i] += h;
            let mut m = reg.clone();
            m.head[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - ghi).abs() < 1e-7, "head {i}");
        }
    }

    #[test]
    fn pseudo_labels_are_greedy_decodes() {
        let p = ScorerParams::init_uniform(micro(), 5, 1.0).unwrap();
        let sources = vec![vec![3, 4], vec![5], vec![6, 7, 3]];
        let (pairs, dropped) = pseudo_label(&p, &sources).unwrap();
        assert_eq!(pairs.len() + dropped, 3);
        for pair in &pairs {
            assert_eq!(pair.tgt, greedy_decode(&p, &pair.src).unwrap());
        }
    }

    #[test]
    fn sentence_bleu_reward_pays_at_the_end() {
        let pairs = vec![Pair {
            src: vec![3, 4, 5, 6],
            tgt: vec![4, 5, 6, 7, EOS],
        }];
        let r = SentenceBleuReward::new(&pairs);
        let mdp = micro().mdp();
        let hit =
            Trajectory::from_actions(&mdp, vec![3, 4, 5, 6], vec![4, 5, 6, 7, EOS], vec![0.0; 5]).unwrap();
        assert_eq!(r.rewards(&hit).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let miss = Trajectory::from_actions(&mdp, vec![3, 4, 5, 6], vec![7, 7, EOS], vec![0.0; 3]).unwrap();
        assert_eq!(r.rewards(&miss).unwrap(), vec![0.0; 3]);
        let other = Trajectory::from_actions(&mdp, vec![3], vec![EOS], vec![0.0]).unwrap();
        assert!(r.rewards(&other).is_err());
    }

    #[test]
    fn regressor_checkpoint_round_trip() {
        let reg = Regressor::new(ScorerParams::init(micro(), 1).unwrap());
        let back = Regressor::from_checkpoint(&reg.to_checkpoint(1)).unwrap();
        assert_eq!(back, reg);
        let plain = Checkpoint::from_params(&reg.scorer, 1, None);
        assert!(Regressor::from_checkpoint(&plain).is_err());
    }
}
