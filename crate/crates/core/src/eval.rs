//! Corpus metrics, decoding, and reward-distribution histograms.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Token, BOS, EOS};
use crate::scorer::{argmax_legal, log_softmax_masked, ScorerParams};
use crate::task::Pair;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Drop a trailing `eos`, leaving only the content tokens.
pub fn strip_eos(seq: &[Token]) -> &[Token] {
    match seq.split_last() {
        Some((&EOS, body)) => body,
        _ => seq,
    }
}

fn ngram_counts(seq: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams of one order.
fn clipped(cand: &[Token], reference: &[Token], n: usize) -> (usize, usize) {
    let total = cand.len().saturating_sub(n - 1);
    if total == 0 {
        return (0, 0);
    }
    let refs = ngram_counts(reference, n);
    let hits = ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (hits, total)
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp()
    }
}

/// Corpus BLEU-`n` in percent, without smoothing.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[R], n: usize) -> Result<f64>
where
    C: AsRef<[Token]>,
    R: AsRef<[Token]>,
{
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch {
            expected: references.len(),
            actual: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("BLEU order must be at least 1".into()));
    }
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for i in 0..n {
            let (h, t) = clipped(c, r, i + 1);
            hits[i] += h;
            totals[i] += t;
        }
    }
    if hits.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (h as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    Ok(100.0 * brevity_penalty(c_len, r_len) * log_p.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator for orders above one.
    AddOne,
}

/// Sentence BLEU-`n` on the `[0, 1]` scale.
pub fn sentence_bleu(cand: &[Token], reference: &[Token], n: usize, smoothing: Smoothing) -> f64 {
    if cand.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for i in 1..=n {
        let (mut h, mut t) = clipped(cand, reference, i);
        if i > 1 && smoothing == Smoothing::AddOne {
            h += 1;
            t += 1;
        }
        if h == 0 {
            return 0.0;
        }
        log_p += (h as f64 / t as f64).ln();
    }
    brevity_penalty(cand.len(), reference.len()) * (log_p / n as f64).exp()
}

pub fn ibleu(bleu: f64, sbleu: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * bleu - alpha * sbleu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub bleu2: f64,
    pub bleu4: f64,
    pub sbleu4: f64,
    pub ibleu4: f64,
    pub alpha: f64,
    pub n_pairs: usize,
}

impl MetricReport {
    /// Score `outputs` (eos optional) against targets and sources of `pairs`.
    pub fn compute<C: AsRef<[Token]>>(
        method: &str,
        outputs: &[C],
        pairs: &[Pair],
        alpha: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
        }
        let cands: Vec<&[Token]> = outputs.iter().map(|o| strip_eos(o.as_ref())).collect();
        let refs: Vec<&[Token]> = pairs.iter().map(|p| strip_eos(&p.tgt)).collect();
        let srcs: Vec<&[Token]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let bleu4 = corpus_bleu(&cands, &refs, 4)?;
        let sbleu4 = corpus_bleu(&cands, &srcs, 4)?;
        Ok(Self {
            method: method.to_string(),
            bleu2: corpus_bleu(&cands, &refs, 2)?,
            bleu4,
            sbleu4,
            ibleu4: ibleu(bleu4, sbleu4, alpha),
            alpha,
            n_pairs: pairs.len(),
        })
    }
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "bleu2", "bleu4", "sbleu4", "ibleu4", "n_pairs"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.bleu2.to_string(),
            r.bleu4.to_string(),
            r.sbleu4.to_string(),
            r.ibleu4.to_string(),
            r.n_pairs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        match s.strip_prefix("beam").map(str::parse::<usize>) {
            Some(Ok(w)) if w >= 1 => Ok(DecodeMode::Beam(w)),
            _ => Err(Error::InvalidConfig(format!(
                "decode mode {s:?} is not greedy or beamN"
            ))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Beam(w) => write!(f, "beam{w}"),
        }
    }
}

/// Greedy decode; the result ends in `eos` unless cut off by the horizon.
pub fn greedy_decode(params: &ScorerParams, source: &[Token]) -> Result<Vec<Token>> {
    let horizon = params.config().horizon;
    let mut h = params.encode(source)?;
    let mut tok = BOS;
    let mut out = Vec::new();
    for pos in 0..horizon {
        let (hn, logits) = params.decode_step(source, &h, tok, pos);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        let a = argmax_legal(&logits);
        out.push(a);
        if a == EOS {
            break;
        }
        h = hn;
        tok = a;
    }
    Ok(out)
}

struct Hyp {
    tokens: Vec<Token>,
    hidden: Vec<f64>,
    logprob: f64,
    done: bool,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }
}

/// Beam search ranked by length-normalized log-probability. Width 1 is
/// token-for-token identical to [`greedy_decode`].
pub fn beam_decode(params: &ScorerParams, source: &[Token], width: usize) -> Result<Vec<Token>> {
    if width == 0 {
        return Err(Error::InvalidConfig("beam width must be positive".into()));
    }
    let horizon = params.config().horizon;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        hidden: params.encode(source)?,
        logprob: 0.0,
        done: false,
    }];
    for pos in 0..horizon {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut next = Vec::new();
        for b in beams {
            if b.done {
                next.push(b);
                continue;
            }
            let tok = b.tokens.last().copied().unwrap_or(BOS);
            let (h, logits) = params.decode_step(source, &b.hidden, tok, pos);
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("logits"));
            }
            for (a, lp) in log_softmax_masked(&logits, 1.0).into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = b.tokens.clone();
                tokens.push(a as Token);
                next.push(Hyp {
                    tokens,
                    hidden: h.clone(),
                    logprob: b.logprob + lp,
                    done: a as Token == EOS,
                });
            }
        }
        // Stable sort: ties keep generation order, i.e. lower token ids first.
        next.sort_by(|x, y| y.score().total_cmp(&x.score()));
        next.truncate(width);
        beams = next;
    }
    let best = beams
        .into_iter()
        .reduce(|a, b| if b.score() > a.score() { b } else { a })
        .expect("beam is never empty");
    Ok(best.tokens)
}

pub fn decode(params: &ScorerParams, source: &[Token], mode: DecodeMode) -> Result<Vec<Token>> {
    match mode {
        DecodeMode::Greedy => greedy_decode(params, source),
        DecodeMode::Beam(w) => beam_decode(params, source, w),
    }
}

pub fn decode_all(params: &ScorerParams, sources: &[&[Token]], mode: DecodeMode) -> Result<Vec<Vec<Token>>> {
    sources.par_iter().map(|s| decode(params, s, mode)).collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub outputs: Vec<Vec<Token>>,
}

pub fn evaluate_model(
    params: &ScorerParams,
    test: &[Pair],
    mode: DecodeMode,
    method: &str,
    alpha: f64,
) -> Result<Evaluation> {
    let sources: Vec<&[Token]> = test.iter().map(|p| p.src.as_slice()).collect();
    let outputs = decode_all(params, &sources, mode)?;
    let report = MetricReport::compute(method, &outputs, test, alpha)?;
    Ok(Evaluation { report, outputs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub method: String,
}

/// Equal-width histogram over the values' own range. A point mass yields a
/// single bin.
pub fn reward_histogram(values: &[f64], bins: usize, method: &str) -> Result<Vec<HistogramRow>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram values"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let row = |bin_lo, bin_hi, count| HistogramRow {
        bin_lo,
        bin_hi,
        count,
        method: method.to_string(),
    };
    if lo == hi {
        return Ok(vec![row(lo, hi, values.len())]);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let hi_edge = if i + 1 == bins {
                hi
            } else {
                lo + width * (i + 1) as f64
            };
            row(lo + width * i as f64, hi_edge, c)
        })
        .collect())
}

/// Share of all values that fall in the fullest bin.
pub fn max_bin_fraction(rows: &[HistogramRow]) -> f64 {
    let total: usize = rows.iter().map(|r| r.count).sum();
    if total == 0 {
        return 0.0;
    }
    rows.iter().map(|r| r.count).max().unwrap_or(0) as f64 / total as f64
}

pub fn write_histogram(path: &Path, rows: &[HistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
