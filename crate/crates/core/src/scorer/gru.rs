//! Forward and reverse passes of the gated recurrent encoder–decoder.
//!
//! Gate order inside every stacked weight block is (reset, update, candidate):
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use std::ops::Range;

use super::ScorerConfig;
use crate::mdp::{Token, PAD};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct GruLayout {
    pub wi: Range<usize>,
    pub wh: Range<usize>,
    pub bi: Range<usize>,
    pub bh: Range<usize>,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayout {
    fn new(offset: usize, input: usize, hidden: usize) -> Self {
        let g = 3 * hidden;
        let wi = offset..offset + g * input;
        let wh = wi.end..wi.end + g * hidden;
        let bi = wh.end..wh.end + g;
        let bh = bi.end..bi.end + g;
        Self {
            wi,
            wh,
            bi,
            bh,
            input,
            hidden,
        }
    }

    fn end(&self) -> usize {
        self.bh.end
    }
}

/// Offsets of each parameter block in the flat vector: embeddings, encoder,
/// decoder, output projection weight, output bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub emb: Range<usize>,
    pub enc: GruLayout,
    pub dec: GruLayout,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
}

impl Layout {
    pub fn new(c: &ScorerConfig) -> Self {
        let v = c.vocab_size;
        let (d, h) = (c.embed_dim, c.hidden_dim);
        let emb = 0..v * d;
        let enc = GruLayout::new(emb.end, d, h);
        let dec_in = if c.aligned_source { 2 * d } else { d };
        let dec = GruLayout::new(enc.end(), dec_in, h);
        let out_w = dec.end()..dec.end() + v * h;
        let out_b = out_w.end..out_w.end + v;
        Self {
            emb,
            enc,
            dec,
            out_w,
            out_b,
        }
    }

    pub fn total(&self) -> usize {
        self.out_b.end
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += W x` for row-major `W` with `x.len()` columns.
#[inline]
fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += Wᵀ dy`.
#[inline]
fn matvec_t_add(dx: &mut [f64], w: &[f64], dy: &[f64]) {
    let cols = dx.len();
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g != 0.0 {
            for (d, a) in dx.iter_mut().zip(row) {
                *d += g * a;
            }
        }
    }
}

/// `dW += dy xᵀ`.
#[inline]
fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if g != 0.0 {
            for (d, b) in row.iter_mut().zip(x) {
                *d += g * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
}

fn cell(p: &[f64], l: &GruLayout, x: &[f64], h: &[f64]) -> (Vec<f64>, CellCache) {
    let hd = l.hidden;
    let mut gi = p[l.bi.clone()].to_vec();
    matvec_add(&mut gi, &p[l.wi.clone()], x);
    let mut gh = p[l.bh.clone()].to_vec();
    matvec_add(&mut gh, &p[l.wh.clone()], h);

    let mut r = vec![0.0; hd];
    let mut z = vec![0.0; hd];
    let mut n = vec![0.0; hd];
    let mut out = vec![0.0; hd];
    for j in 0..hd {
        r[j] = sigmoid(gi[j] + gh[j]);
        z[j] = sigmoid(gi[hd + j] + gh[hd + j]);
        n[j] = (gi[2 * hd + j] + r[j] * gh[2 * hd + j]).tanh();
        out[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
    }
    let ghn = gh.split_off(2 * hd);
    (
        out,
        CellCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            r,
            z,
            n,
            ghn,
        },
    )
}

/// Reverse pass through one cell. Accumulates parameter gradients into `g`
/// and returns `(dx, dh_prev)`.
fn cell_backward(p: &[f64], g: &mut [f64], l: &GruLayout, c: &CellCache, dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = l.hidden;
    let mut dgi = vec![0.0; 3 * hd];
    let mut dgh = vec![0.0; 3 * hd];
    let mut dh_prev = vec![0.0; hd];
    for j in 0..hd {
        let (r, z, n) = (c.r[j], c.z[j], c.n[j]);
        let dn = dh[j] * (1.0 - z);
        let dz = dh[j] * (c.h_prev[j] - n);
        dh_prev[j] = dh[j] * z;
        let dn_pre = dn * (1.0 - n * n);
        let dr = dn_pre * c.ghn[j];
        let dr_pre = dr * r * (1.0 - r);
        let dz_pre = dz * z * (1.0 - z);
        dgi[j] = dr_pre;
        dgi[hd + j] = dz_pre;
        dgi[2 * hd + j] = dn_pre;
        dgh[j] = dr_pre;
        dgh[hd + j] = dz_pre;
        dgh[2 * hd + j] = dn_pre * r;
    }
    outer_add(&mut g[l.wi.clone()], &dgi, &c.x);
    outer_add(&mut g[l.wh.clone()], &dgh, &c.h_prev);
    for (a, b) in g[l.bi.clone()].iter_mut().zip(&dgi) {
        *a += b;
    }
    for (a, b) in g[l.bh.clone()].iter_mut().zip(&dgh) {
        *a += b;
    }
    let mut dx = vec![0.0; l.input];
    matvec_t_add(&mut dx, &p[l.wi.clone()], &dgi);
    matvec_t_add(&mut dh_prev, &p[l.wh.clone()], &dgh);
    (dx, dh_prev)
}

/// Borrowed view of a parameter vector together with its layout.
pub(crate) struct Net<'a> {
    pub cfg: &'a ScorerConfig,
    pub layout: &'a Layout,
    pub p: &'a [f64],
}

/// Decoder cache for a teacher-forced pass.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    source: Vec<Token>,
    inputs: Vec<Token>,
    enc: Vec<CellCache>,
    dec: Vec<CellCache>,
    /// Decoder hidden state after consuming `inputs[t]`.
    pub hidden: Vec<Vec<f64>>,
    /// Logits for the next token after consuming `inputs[t]`.
    pub logits: Vec<Vec<f64>>,
}

impl<'a> Net<'a> {
    fn embedding(&self, tok: Token) -> &'a [f64] {
        let d = self.cfg.embed_dim;
        let start = self.layout.emb.start + tok as usize * d;
        &self.p[start..start + d]
    }

    fn aligned(source: &[Token], pos: usize) -> Token {
        source.get(pos).copied().unwrap_or(PAD)
    }

    fn dec_input(&self, source: &[Token], tok: Token, pos: usize) -> Vec<f64> {
        let mut x = self.embedding(tok).to_vec();
        if self.cfg.aligned_source {
            x.extend_from_slice(self.embedding(Self::aligned(source, pos)));
        }
        x
    }

    pub fn project(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.p[self.layout.out_b.clone()].to_vec();
        matvec_add(&mut out, &self.p[self.layout.out_w.clone()], h);
        out
    }

    /// Final encoder state for `source`.
    pub fn encode(&self, source: &[Token]) -> Vec<f64> {
        let mut h = vec![0.0; self.cfg.hidden_dim];
        for &tok in source {
            h = cell(self.p, &self.layout.enc, self.embedding(tok), &h).0;
        }
        h
    }

    /// One decoder step consuming the token at prefix position `pos`.
    pub fn decode_step(&self, source: &[Token], h: &[f64], tok: Token, pos: usize) -> Vec<f64> {
        let x = self.dec_input(source, tok, pos);
        cell(self.p, &self.layout.dec, &x, h).0
    }

    pub fn forward(&self, source: &[Token], inputs: &[Token]) -> SeqCache {
        let mut h = vec![0.0; self.cfg.hidden_dim];
        let mut enc = Vec::with_capacity(source.len());
        for &tok in source {
            let (hn, c) = cell(self.p, &self.layout.enc, self.embedding(tok), &h);
            enc.push(c);
            h = hn;
        }
        let mut dec = Vec::with_capacity(inputs.len());
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for (pos, &tok) in inputs.iter().enumerate() {
            let x = self.dec_input(source, tok, pos);
            let (hn, c) = cell(self.p, &self.layout.dec, &x, &h);
            dec.push(c);
            logits.push(self.project(&hn));
            hidden.push(hn.clone());
            h = hn;
        }
        SeqCache {
            source: source.to_vec(),
            inputs: inputs.to_vec(),
            enc,
            dec,
            hidden,
            logits,
        }
    }

    /// Reverse pass. `dlogits[t]` is the loss gradient with respect to
    /// `cache.logits[t]` (an empty vector means zero); `dhidden`, when given,
    /// adds a gradient with respect to `cache.hidden[t]` directly.
    pub fn backward(
        &self,
        cache: &SeqCache,
        dlogits: &[Vec<f64>],
        dhidden: Option<&[Vec<f64>]>,
        g: &mut [f64],
    ) {
        let hd = self.cfg.hidden_dim;
        let d = self.cfg.embed_dim;
        let l = self.layout;
        let steps = cache.dec.len();
        let mut carry = vec![0.0; hd];
        for t in (0..steps).rev() {
            let mut dh = carry;
            if let Some(dl) = dlogits.get(t).filter(|v| !v.is_empty()) {
                outer_add(&mut g[l.out_w.clone()], dl, &cache.hidden[t]);
                for (a, b) in g[l.out_b.clone()].iter_mut().zip(dl) {
                    *a += b;
                }
                matvec_t_add(&mut dh, &self.p[l.out_w.clone()], dl);
            }
            if let Some(extra) = dhidden.and_then(|x| x.get(t)).filter(|v| !v.is_empty()) {
                for (a, b) in dh.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            let (dx, dh_prev) = cell_backward(self.p, g, &l.dec, &cache.dec[t], &dh);
            self.scatter_embedding(g, cache.inputs[t], &dx[..d]);
            if self.cfg.aligned_source {
                self.scatter_embedding(g, Self::aligned(&cache.source, t), &dx[d..]);
            }
            carry = dh_prev;
        }
        for t in (0..cache.enc.len()).rev() {
            let (dx, dh_prev) = cell_backward(self.p, g, &l.enc, &cache.enc[t], &carry);
            self.scatter_embedding(g, cache.source[t], &dx);
            carry = dh_prev;
        }
    }

    fn scatter_embedding(&self, g: &mut [f64], tok: Token, dx: &[f64]) {
        let d = self.cfg.embed_dim;
        let start = self.layout.emb.start + tok as usize * d;
        for (a, b) in g[start..start + d].iter_mut().zip(dx) {
            *a += b;
        }
    }
}
