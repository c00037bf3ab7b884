//! The scorer `f_ω`: logits over the vocabulary for a (source, prefix) pair.
//! The same function serves as the policy (through a masked softmax), the
//! action-value estimate and, once frozen, the source of induced rewards.

mod adam;
mod checkpoint;
mod gru;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub(crate) use checkpoint::encode_f64s;
pub use checkpoint::{Checkpoint, CheckpointKind, OptimizerSnapshot, FORMAT_VERSION};
pub(crate) use gru::SeqCache;

use crate::error::{Error, Result};
use crate::mdp::{TextMdp, Token, Vocab, BOS, EOS, PAD};
use gru::{Layout, Net};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Maximum number of generated tokens.
    pub horizon: usize,
    /// Feed the source token at the same position into each decoder step
    /// alongside the previous output token.
    pub aligned_source: bool,
}

impl ScorerConfig {
    pub fn new(vocab_size: usize, horizon: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            horizon,
            aligned_source: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig(
                "embed_dim, hidden_dim and horizon must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size).expect("validated scorer config")
    }

    pub fn mdp(&self) -> TextMdp {
        TextMdp {
            vocab: self.vocab(),
            horizon: self.horizon,
        }
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total()
    }
}

/// Flat parameter vector. Layout, in order: token embeddings (shared by
/// encoder and decoder), encoder GRU (`W_i`, `W_h`, `b_i`, `b_h`), decoder
/// GRU (same blocks), output projection weight (`vocab × hidden`), output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    config: ScorerConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl ScorerParams {
    pub fn zeros(config: ScorerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let values = vec![0.0; layout.total()];
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    /// Uniform initialization in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self> {
        Self::init_uniform(config, seed, INIT_SCALE)
    }

    pub fn init_uniform(config: ScorerConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.values {
            *v = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn from_values(config: ScorerConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total() {
            return Err(Error::ShapeMismatch {
                expected: layout.total(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scorer parameters"));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn mdp(&self) -> TextMdp {
        self.config.mdp()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Deep copy; later updates to `self` never reach the snapshot.
    pub fn snapshot(&self) -> ScorerParams {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &ScorerParams) {
        self.clone_from(snapshot);
    }

    /// Index of the output-projection weight connecting hidden unit `j` to token `tok`.
    pub fn projection_index(&self, tok: Token, j: usize) -> usize {
        self.layout.out_w.start + tok as usize * self.config.hidden_dim + j
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.config,
            layout: &self.layout,
            p: &self.values,
        }
    }

    pub(crate) fn check_source(&self, source: &[Token]) -> Result<()> {
        let vocab = self.config.vocab();
        source.iter().try_for_each(|&t| vocab.check(t))
    }

    /// Final encoder hidden state.
    pub fn encode(&self, source: &[Token]) -> Result<Vec<f64>> {
        self.check_source(source)?;
        Ok(self.net().encode(source))
    }

    /// Advance the decoder by the token at prefix position `pos` and return
    /// the new hidden state with its logits. Inputs are not validated.
    pub fn decode_step(
        &self,
        source: &[Token],
        hidden: &[f64],
        tok: Token,
        pos: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let net = self.net();
        let h = net.decode_step(source, hidden, tok, pos);
        let logits = net.project(&h);
        (h, logits)
    }

    pub(crate) fn forward(&self, source: &[Token], inputs: &[Token]) -> SeqCache {
        self.net().forward(source, inputs)
    }

    pub(crate) fn backward(
        &self,
        cache: &SeqCache,
        dlogits: &[Vec<f64>],
        dhidden: Option<&[Vec<f64>]>,
        grad: &mut Gradient,
    ) {
        self.net().backward(cache, dlogits, dhidden, &mut grad.values);
    }

    pub fn policy_logprobs(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        Ok(log_softmax_masked(&self.logits(source, prefix)?, 1.0))
    }

    /// `∇_ω Σ_i w_i log π_ω(a_i | s_i)` by reverse-mode differentiation.
    pub fn weighted_logprob_grad(&self, items: &[LogprobItem<'_>]) -> Result<Gradient> {
        let mdp = self.mdp();
        let mut grad = Gradient::zeros(self.len());
        for item in items {
            if !item.weight.is_finite() {
                return Err(Error::NonFinite("item weight"));
            }
            self.check_source(item.source)?;
            validate_prefix(&mdp, item.prefix)?;
            if !mdp.vocab.is_legal_action(item.action) {
                mdp.vocab.check(item.action)?;
                return Err(Error::IllegalAction(item.action));
            }
            if item.weight == 0.0 {
                continue;
            }
            let cache = self.forward(item.source, item.prefix);
            let last = cache.logits.len() - 1;
            let mut dlogits = vec![Vec::new(); cache.logits.len()];
            dlogits[last] = logprob_grad_wrt_logits(&cache.logits[last], item.action, item.weight);
            self.backward(&cache, &dlogits, None, &mut grad);
        }
        grad.ensure_finite()?;
        Ok(grad)
    }

    /// Teacher-forced pass over a whole action sequence: returns the
    /// log-probabilities of each action and accumulates
    /// `∇ Σ_t w_t log π(a_t | s_t)` into `grad`, where the weights are computed
    /// from those log-probabilities by `weights`.
    pub(crate) fn sequence_logprob_grad<F>(
        &self,
        source: &[Token],
        actions: &[Token],
        grad: &mut Gradient,
        weights: F,
    ) -> Result<Vec<f64>>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        let inputs = inputs_for(actions);
        let cache = self.forward(source, &inputs);
        let logprobs: Vec<Vec<f64>> = cache.logits.iter().map(|l| log_softmax_masked(l, 1.0)).collect();
        let taken: Vec<f64> = actions
            .iter()
            .zip(&logprobs)
            .map(|(&a, lp)| lp[a as usize])
            .collect();
        let w = weights(&taken)?;
        if w.len() != actions.len() {
            return Err(Error::ShapeMismatch {
                expected: actions.len(),
                actual: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sequence weights"));
        }
        let dlogits: Vec<Vec<f64>> = actions
            .iter()
            .zip(&logprobs)
            .zip(&w)
            .map(|((&a, lp), &wt)| {
                if wt == 0.0 {
                    Vec::new()
                } else {
                    let mut d: Vec<f64> = lp.iter().map(|x| -wt * x.exp()).collect();
                    d[a as usize] += wt;
                    d
                }
            })
            .collect();
        self.backward(&cache, &dlogits, None, grad);
        Ok(taken)
    }
}

/// Decoder inputs for a teacher-forced pass over `actions`: `bos` followed by
/// every action except the last.
pub(crate) fn inputs_for(actions: &[Token]) -> Vec<Token> {
    let mut inputs = Vec::with_capacity(actions.len());
    inputs.push(BOS);
    if actions.len() > 1 {
        inputs.extend_from_slice(&actions[..actions.len() - 1]);
    }
    inputs
}

/// `d/dlogits [w · log softmax(logits)[action]]` with reserved tokens masked.
fn logprob_grad_wrt_logits(logits: &[f64], action: Token, w: f64) -> Vec<f64> {
    let lp = log_softmax_masked(logits, 1.0);
    let mut d: Vec<f64> = lp.iter().map(|x| -w * x.exp()).collect();
    d[action as usize] += w;
    d
}

/// One term of a weighted log-likelihood.
#[derive(Debug, Clone, Copy)]
pub struct LogprobItem<'a> {
    pub source: &'a [Token],
    pub prefix: &'a [Token],
    pub action: Token,
    pub weight: f64,
}

/// Gradient with the same layout as [`ScorerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn negated(mut self) -> Self {
        self.scale(-1.0);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("gradient"))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Anything that produces per-token logits for a state. Implemented by the
/// neural scorer and by explicit logit tables used in exact checks.
pub trait LogitSource: Sync {
    fn mdp(&self) -> TextMdp;

    fn logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>>;

    /// Logits after each position of `prefix`, i.e. at the states
    /// `prefix[..1]`, `prefix[..2]`, ..., `prefix`.
    fn prefix_logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<Vec<f64>>> {
        (1..=prefix.len())
            .map(|i| self.logits(source, &prefix[..i]))
            .collect()
    }
}

impl LogitSource for ScorerParams {
    fn mdp(&self) -> TextMdp {
        self.config.mdp()
    }

    fn logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        let mut all = self.prefix_logits(source, prefix)?;
        Ok(all.pop().expect("validated prefix is non-empty"))
    }

    fn prefix_logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<Vec<f64>>> {
        self.check_source(source)?;
        validate_prefix(&self.mdp(), prefix)?;
        let logits = self.forward(source, prefix).logits;
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(logits)
    }
}

impl<T: LogitSource + ?Sized> LogitSource for &T {
    fn mdp(&self) -> TextMdp {
        (**self).mdp()
    }
    fn logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        (**self).logits(source, prefix)
    }
    fn prefix_logits(&self, source: &[Token], prefix: &[Token]) -> Result<Vec<Vec<f64>>> {
        (**self).prefix_logits(source, prefix)
    }
}

/// A prefix is a valid non-terminal state: starts with `bos`, contains only
/// data tokens afterwards, and is no longer than the horizon.
pub fn validate_prefix(mdp: &TextMdp, prefix: &[Token]) -> Result<()> {
    match prefix.first() {
        Some(&BOS) => {}
        _ => return Err(Error::InvalidTrajectory("prefix must start with bos".into())),
    }
    for &t in &prefix[1..] {
        mdp.vocab.check(t)?;
        if t == EOS {
            return Err(Error::TerminalState);
        }
        if !mdp.vocab.is_legal_action(t) {
            return Err(Error::IllegalAction(t));
        }
    }
    if prefix.len() > mdp.horizon {
        return Err(Error::TerminalState);
    }
    Ok(())
}

/// Log-softmax of `logits / temperature` with `bos` and `pad` forced to `-inf`.
pub fn log_softmax_masked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let masked = |i: usize| i == BOS as usize || i == PAD as usize;
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| !masked(i))
        .map(|(_, &v)| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| !masked(i))
        .map(|(_, &v)| (v / temperature - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if masked(i) {
                f64::NEG_INFINITY
            } else {
                v / temperature - lse
            }
        })
        .collect()
}

/// Highest-scoring legal action; ties go to the lowest token id.
pub fn argmax_legal(logits: &[f64]) -> Token {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i == BOS as usize || i == PAD as usize {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i as Token;
        }
    }
    best
}

/// Maximum logit over legal actions.
pub fn max_legal(logits: &[f64]) -> f64 {
    logits[argmax_legal(logits) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ScorerConfig {
        ScorerConfig {
            vocab_size: 6,
            embed_dim: 3,
            hidden_dim: 4,
            horizon: 5,
            aligned_source: true,
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ScorerParams::zeros(micro()).unwrap();
        let l = p.logits(&[3, 4], &[BOS, 5]).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_are_deterministic() {
        let p = ScorerParams::init(micro(), 3).unwrap();
        let a = p.logits(&[3, 4], &[BOS, 5]).unwrap();
        let b = p.logits(&[3, 4], &[BOS, 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_weight_moves_one_logit() {
        let p = ScorerParams::init(micro(), 5).unwrap();
        let (src, prefix) = ([3, 4, 5], [BOS, 4]);
        let base = p.logits(&src, &prefix).unwrap();
        let h = p.forward(&src, &prefix).hidden.pop().unwrap();
        let (tok, j, step) = (4, 2, 1e-3);
        let mut q = p.clone();
        q.values_mut()[p.projection_index(tok, j)] += step;
        let moved = q.logits(&src, &prefix).unwrap();
        for (i, (a, b)) in base.iter().zip(&moved).enumerate() {
            if i == tok as usize {
                assert!(((b - a) / step - h[j]).abs() < 1e-9);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn logits_reject_terminal_and_bad_tokens() {
        let p = ScorerParams::init(micro(), 1).unwrap();
        assert!(matches!(
            p.logits(&[3], &[BOS, 3, EOS]),
            Err(Error::TerminalState)
        ));
        assert!(matches!(
            p.logits(&[3], &[BOS, 3, 3, 3, 3, 3]),
            Err(Error::TerminalState)
        ));
        assert!(p.logits(&[3], &[BOS, 3, 3, 3, 3]).is_ok());
        assert!(matches!(
            p.logits(&[9], &[BOS]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            p.logits(&[3], &[BOS, PAD]),
            Err(Error::IllegalAction(_))
        ));
        assert!(p.logits(&[3], &[3]).is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_policy() {
        let lp = log_softmax_masked(&[0.0; 6], 1.0);
        let m = 4.0_f64;
        for (i, v) in lp.iter().enumerate() {
            if i == BOS as usize || i == PAD as usize {
                assert_eq!(*v, f64::NEG_INFINITY);
            } else {
                assert!((v + m.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_token_softmax_by_hand() {
        // Vocab of size 4: legal actions are eos (1) and token 3.
        let lp = log_softmax_masked(&[9.0, 0.0, -4.0, 3f64.ln()], 1.0);
        assert!((lp[1] - (-(4f64.ln()))).abs() < 1e-15);
        assert!((lp[3] - (0.75f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let l = [0.3, -1.2, 2.0, 0.7, 1.1, -0.4];
        let shifted: Vec<f64> = l.iter().map(|v| v + 123.25).collect();
        let a = log_softmax_masked(&l, 1.0);
        let b = log_softmax_masked(&shifted, 1.0);
        for (x, y) in a.iter().zip(&b) {
            if x.is_finite() {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_legal(&[5.0, 1.0, 5.0, 1.0, 0.0]), EOS);
        assert_eq!(argmax_legal(&[0.0, 0.0, 9.0, 2.0, 2.0]), 3);
    }

    #[test]
    fn empty_and_zero_weight_items_give_zero_gradient() {
        let p = ScorerParams::init(micro(), 2).unwrap();
        let g = p.weighted_logprob_grad(&[]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let items = [LogprobItem {
            source: &[3, 4],
            prefix: &[BOS, 3],
            action: 4,
            weight: 0.0,
        }];
        let g = p.weighted_logprob_grad(&items).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut live = ScorerParams::init(micro(), 4).unwrap();
        let snap = live.snapshot();
        live.values_mut()[7] += 1.0;
        assert_ne!(live, snap);
        let mut restored = live.clone();
        restored.restore(&snap);
        assert_eq!(restored, snap);
        assert!(restored
            .values()
            .iter()
            .zip(snap.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sequence_grad_matches_item_grad() {
        let p = ScorerParams::init_uniform(micro(), 8, 0.5).unwrap();
        let src = [3, 5, 4];
        let actions = [4, 3, EOS];
        let w = [0.7, -1.3, 2.0];
        let mut seq = Gradient::zeros(p.len());
        p.sequence_logprob_grad(&src, &actions, &mut seq, |_| Ok(w.to_vec()))
            .unwrap();
        let prefixes: Vec<Vec<Token>> = (0..3)
            .map(|t| {
                let mut v = vec![BOS];
                v.extend_from_slice(&actions[..t]);
                v
            })
            .collect();
        let items: Vec<LogprobItem> = (0..3)
            .map(|t| LogprobItem {
                source: &src,
                prefix: &prefixes[t],
                action: actions[t],
                weight: w[t],
            })
            .collect();
        let g = p.weighted_logprob_grad(&items).unwrap();
        for (a, b) in seq.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central finite differences of `Σ w log π`, computed only through `logits`.
    fn fd_objective(p: &ScorerParams, items: &[LogprobItem]) -> f64 {
        items
            .iter()
            .map(|it| {
                let lp = log_softmax_masked(&p.logits(it.source, it.prefix).unwrap(), 1.0);
                it.weight * lp[it.action as usize]
            })
            .sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for aligned in [false, true] {
            let cfg = ScorerConfig {
                aligned_source: aligned,
                vocab_size: 4,
                ..micro()
            };
            let p = ScorerParams::init_uniform(cfg, 21, 1.0).unwrap();
            let items = [
                LogprobItem {
                    source: &[3, 3],
                    prefix: &[BOS, 3],
                    action: EOS,
                    weight: 1.3,
                },
                LogprobItem {
                    source: &[3],
                    prefix: &[BOS],
                    action: 3,
                    weight: -0.6,
                },
            ];
            let g = p.weighted_logprob_grad(&items).unwrap();
            let h = 1e-5;
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus.values_mut()[i] += h;
                let mut minus = p.clone();
                minus.values_mut()[i] -= h;
                let fd = (fd_objective(&plus, &items) - fd_objective(&minus, &items)) / (2.0 * h);
                if fd.abs() > 1e-8 {
                    let rel = (g.values()[i] - fd).abs() / fd.abs().max(g.values()[i].abs());
                    assert!(rel < 1e-4, "coord {i}: analytic {} fd {fd}", g.values()[i]);
                }
            }
        }
    }
}
