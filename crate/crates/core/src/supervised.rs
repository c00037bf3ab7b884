//! Teacher-forced maximum-likelihood training on parallel pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Token, BOS, EOS, PAD};
use crate::reward::splitmix;
use crate::scorer::{inputs_for, log_softmax_masked, AdamState, Gradient, ScorerParams};
use crate::task::Pair;

/// Pairs per parallel work item. Fixed so the reduction order, and hence the
/// floating-point result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfConfig {
    pub smoothing: f64,
    pub warmup: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TfConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.1,
            warmup: 400,
            peak_lr: 3e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1)");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak learning rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Linear warmup to `peak_lr`, then decay with the inverse square root
    /// of the step. Steps count from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

pub(crate) fn check_target(params: &ScorerParams, pair: &Pair) -> Result<()> {
    let cfg = params.config();
    params.check_source(&pair.src)?;
    let body = match pair.tgt.split_last() {
        Some((&EOS, body)) => body,
        _ => return Err(Error::MalformedTarget("target must end with eos".into())),
    };
    if pair.tgt.len() > cfg.horizon {
        return Err(Error::MalformedTarget(format!(
            "target length {} exceeds horizon {}",
            pair.tgt.len(),
            cfg.horizon
        )));
    }
    let vocab = cfg.vocab();
    for &t in body {
        vocab
            .check(t)
            .map_err(|_| Error::MalformedTarget(format!("token {t} is out of range")))?;
        if matches!(t, BOS | EOS | PAD) {
            return Err(Error::MalformedTarget(format!(
                "reserved token {t} inside target"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TfLoss {
    /// Mean per-token loss.
    pub loss: f64,
    pub tokens: usize,
    /// Gradient of the mean loss.
    pub grad: Gradient,
}

/// Per-token smoothed NLL and its gradient with respect to the logits.
fn token_loss(logits: &[f64], y: Token, smoothing: f64) -> (f64, Vec<f64>) {
    let lp = log_softmax_masked(logits, 1.0);
    let m = lp.iter().filter(|v| v.is_finite()).count() as f64;
    let mut loss = -(1.0 - smoothing) * lp[y as usize];
    let mut d = Vec::with_capacity(lp.len());
    for (i, &v) in lp.iter().enumerate() {
        if v.is_finite() {
            loss -= smoothing / m * v;
            let target = smoothing / m + if i == y as usize { 1.0 - smoothing } else { 0.0 };
            d.push(v.exp() - target);
        } else {
            d.push(0.0);
        }
    }
    (loss, d)
}

struct Partial {
    loss: f64,
    tokens: usize,
    grad: Option<Gradient>,
}

fn chunk_loss(params: &ScorerParams, pairs: &[Pair], smoothing: f64, with_grad: bool) -> Partial {
    let mut out = Partial {
        loss: 0.0,
        tokens: 0,
        grad: with_grad.then(|| Gradient::zeros(params.len())),
    };
    for p in pairs {
        let cache = params.forward(&p.src, &inputs_for(&p.tgt));
        let mut dlogits = Vec::with_capacity(p.tgt.len());
        for (logits, &y) in cache.logits.iter().zip(&p.tgt) {
            let (l, d) = token_loss(logits, y, smoothing);
            out.loss += l;
            dlogits.push(d);
        }
        out.tokens += p.tgt.len();
        if let Some(g) = out.grad.as_mut() {
            params.backward(&cache, &dlogits, None, g);
        }
    }
    out
}

fn batch_loss(
    params: &ScorerParams,
    batch: &[Pair],
    smoothing: f64,
    with_grad: bool,
) -> Result<(f64, usize, Option<Gradient>)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidConfig("smoothing must lie in [0, 1)".into()));
    }
    for p in batch {
        check_target(params, p)?;
    }
    let parts: Vec<Partial> = batch
        .par_chunks(CHUNK)
        .map(|c| chunk_loss(params, c, smoothing, with_grad))
        .collect();
    let mut loss = 0.0;
    let mut tokens = 0;
    let mut grad = with_grad.then(|| Gradient::zeros(params.len()));
    for part in parts {
        loss += part.loss;
        tokens += part.tokens;
        if let (Some(g), Some(pg)) = (grad.as_mut(), part.grad.as_ref()) {
            g.add_assign(pg);
        }
    }
    Ok((loss, tokens, grad))
}

/// Mean label-smoothed negative log-likelihood over all target tokens of the
/// batch, with its gradient. Smoothing spreads mass uniformly over the legal
/// vocabulary only.
pub fn tf_loss(params: &ScorerParams, batch: &[Pair], smoothing: f64) -> Result<TfLoss> {
    let (sum, tokens, grad) = batch_loss(params, batch, smoothing, true)?;
    let mut grad = grad.expect("gradient requested");
    if tokens == 0 {
        return Ok(TfLoss {
            loss: 0.0,
            tokens,
            grad,
        });
    }
    grad.scale(1.0 / tokens as f64);
    let loss = sum / tokens as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    grad.ensure_finite()?;
    Ok(TfLoss { loss, tokens, grad })
}

/// Mean per-token loss without the gradient.
pub fn tf_loss_value(params: &ScorerParams, batch: &[Pair], smoothing: f64) -> Result<f64> {
    let (sum, tokens, _) = batch_loss(params, batch, smoothing, false)?;
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// Negative log-likelihood of the batch's target trajectories in the text
/// MDP, built step by step from the policy at each replayed state. The
/// initial state and transitions are deterministic and contribute nothing.
pub fn irl_nll(params: &ScorerParams, batch: &[Pair]) -> Result<f64> {
    let mdp = params.mdp();
    let mut total = 0.0;
    for p in batch {
        check_target(params, p)?;
        let mut state = mdp.initial(p.src.clone());
        for &a in &p.tgt {
            let lp = params.policy_logprobs(&state.source, &state.prefix)?;
            total -= lp[a as usize];
            state = mdp.transition(&state, a)?;
        }
    }
    Ok(total)
}

/// Seeded shuffle of `pairs` into (train, validation); validation gets
/// `fraction` of the data, at least one pair.
pub fn split_validation(pairs: &[Pair], fraction: f64, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if pairs.len() < 2 {
        return Err(Error::Empty("need at least two pairs to split off validation"));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed)));
    let n_val = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len() - 1);
    let val = idx[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_curve<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SupervisedRun {
    pub params: ScorerParams,
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Hold out a validation split of `pairs`, then train from `init`.
pub fn train_supervised(init: ScorerParams, pairs: &[Pair], cfg: &TfConfig) -> Result<SupervisedRun> {
    cfg.validate()?;
    let (train, val) = split_validation(pairs, cfg.val_fraction, cfg.seed)?;
    train_on_split(init, &train, &val, cfg)
}

/// Mini-batch Adam on `train`, early-stopped on unsmoothed validation NLL.
/// Returns the parameters of the best validation epoch.
pub fn train_on_split(
    init: ScorerParams,
    train: &[Pair],
    val: &[Pair],
    cfg: &TfConfig,
) -> Result<SupervisedRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    for p in train.iter().chain(val) {
        check_target(&init, p)?;
    }
    let mut params = init;
    let mut adam = AdamState::new(params.len());
    let mut best = params.snapshot();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(
            cfg.seed ^ splitmix(epoch as u64),
        )));
        let mut loss_sum = 0.0;
        let mut token_sum = 0;
        let mut lr = cfg.lr_at(step.max(1));
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            lr = cfg.lr_at(step);
            let batch: Vec<Pair> = idx.iter().map(|&i| train[i].clone()).collect();
            let out = match tf_loss(&params, &batch, cfg.smoothing) {
                Ok(out) => out,
                Err(e) if e.is_numerical() => {
                    return Err(Error::Diverged {
                        step,
                        what: e.to_string(),
                        last_good: Box::new(params),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += out.loss * out.tokens as f64;
            token_sum += out.tokens;
            adam.step(&mut params, &out.grad, lr)?;
        }
        let val_loss = tf_loss_value(&params, val, 0.0)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "validation loss is not finite".into(),
                last_good: Box::new(best),
            });
        }
        curve.push(CurveRow {
            epoch,
            step,
            train_loss: loss_sum / token_sum.max(1) as f64,
            val_loss,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    Ok(SupervisedRun {
        params: best,
        curve,
        best_epoch,
        best_val_loss: best_val,
    })
}
