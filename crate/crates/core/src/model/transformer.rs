//! Pre-norm decoder-only transformer with hand-written reverse mode.
//!
//! Activations are kept per sequence in a [`ForwardCache`]; `backward`
//! replays the layers in reverse and accumulates into flat gradient vectors
//! laid out exactly like the parameters (or the adapters).

use super::linalg::{add_column_sums, axpy, dot, exp_in_place, gemm, gemm_strided};
use super::params::{LayerIndex, ModelState};
use crate::error::{LabError, Result};
use crate::finetune::LoraAdapters;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Row-major `rows x vocab` matrix of next-token scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// First `rows` rows.
    pub fn truncated(&self, rows: usize) -> Logits {
        Logits {
            rows,
            vocab: self.vocab,
            data: self.data[..rows * self.vocab].to_vec(),
        }
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: NormCache,
    a: Vec<f64>,
    qh: Vec<f64>,
    kh: Vec<f64>,
    vh: Vec<f64>,
    probs: Vec<f64>,
    outh: Vec<f64>,
    att: Vec<f64>,
    low_rank: [Option<Vec<f64>>; 4],
    ln2: NormCache,
    m: Vec<f64>,
    u: Vec<f64>,
    /// `tanh` inside the GELU of every `u`, reused by the backward pass.
    gelu_t: Vec<f64>,
    gl: Vec<f64>,
}

/// Activations retained for the backward pass of one sequence.
pub struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    hf: Vec<f64>,
}

/// Where `backward` deposits gradients. Either side may be absent.
pub struct GradSink<'g> {
    pub base: Option<&'g mut [f64]>,
    pub adapters: Option<&'g mut [f64]>,
}

/// Weights plus the optional low-rank adapters applied on top of them.
#[derive(Clone, Copy)]
pub struct Transformer<'a> {
    pub state: &'a ModelState,
    pub adapters: Option<&'a LoraAdapters>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx`; parameter gradients when given.
fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    d: usize,
    dx: &mut [f64],
    params: Option<(&mut [f64], &mut [f64])>,
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    if let Some((dgain, dbias)) = params {
        for r in 0..rows {
            for c in 0..d {
                dgain[c] += dy[r * d + c] * cache.xhat[r * d + c];
                dbias[c] += dy[r * d + c];
            }
        }
    }
    for r in 0..rows {
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        for c in 0..d {
            dxhat[c] = dy[r * d + c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xhat) / d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
}

/// `tanh(sqrt(2/pi) (u + 0.044715 u^3))` for every `u`, via `1 - 2 / (e^{2y} + 1)`.
fn gelu_tanh(u: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = u.iter().map(|&v| 2.0 * GELU_C * (v + GELU_K * v * v * v)).collect();
    exp_in_place(&mut t);
    t.iter_mut().for_each(|e| *e = 1.0 - 2.0 / (*e + 1.0));
    t
}

/// Derivative of the tanh-approximated GELU given `t = gelu_tanh(u)`.
#[inline]
fn gelu_grad(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// One affine map `x W + b`, optionally with a low-rank update `s (x B) A`.
struct Affine<'a> {
    w: &'a [f64],
    b: &'a [f64],
    d_in: usize,
    d_out: usize,
    low_rank: Option<LowRank<'a>>,
}

struct LowRank<'a> {
    b: &'a [f64],
    a: &'a [f64],
    rank: usize,
    scale: f64,
    b_offset: usize,
    a_offset: usize,
}

impl Affine<'_> {
    fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut y = Vec::with_capacity(rows * self.d_out);
        for _ in 0..rows {
            y.extend_from_slice(self.b);
        }
        gemm(rows, self.d_in, self.d_out, 1.0, x, false, self.w, false, 1.0, &mut y);
        let xb = self.low_rank.as_ref().map(|lr| {
            let mut xb = vec![0.0; rows * lr.rank];
            gemm(rows, self.d_in, lr.rank, 1.0, x, false, lr.b, false, 0.0, &mut xb);
            gemm(rows, lr.rank, self.d_out, lr.scale, &xb, false, lr.a, false, 1.0, &mut y);
            xb
        });
        (y, xb)
    }

    /// Returns the input gradient; parameter gradients go to `sink`.
    fn backward(
        &self,
        x: &[f64],
        xb: Option<&Vec<f64>>,
        dy: &[f64],
        rows: usize,
        w_offset: usize,
        b_offset: usize,
        sink: &mut GradSink<'_>,
    ) -> Vec<f64> {
        let (d_in, d_out) = (self.d_in, self.d_out);
        let mut dx = vec![0.0; rows * d_in];
        gemm(rows, d_out, d_in, 1.0, dy, false, self.w, true, 0.0, &mut dx);
        if let Some(base) = sink.base.as_deref_mut() {
            gemm(d_in, rows, d_out, 1.0, x, true, dy, false, 1.0, &mut base[w_offset..w_offset + d_in * d_out]);
            add_column_sums(dy, d_out, &mut base[b_offset..b_offset + d_out]);
        }
        if let Some(lr) = &self.low_rank {
            let r = lr.rank;
            let xb = xb.expect("low-rank activations cached");
            // t = dy A^T
            let mut t = vec![0.0; rows * r];
            gemm(rows, d_out, r, 1.0, dy, false, lr.a, true, 0.0, &mut t);
            gemm(rows, r, d_in, lr.scale, &t, false, lr.b, true, 1.0, &mut dx);
            if let Some(g) = sink.adapters.as_deref_mut() {
                gemm(d_in, rows, r, lr.scale, x, true, &t, false, 1.0, &mut g[lr.b_offset..lr.b_offset + d_in * r]);
                gemm(r, rows, d_out, lr.scale, xb, true, dy, false, 1.0, &mut g[lr.a_offset..lr.a_offset + r * d_out]);
            }
        }
        dx
    }
}

fn to_heads(x: &[f64], rows: usize, heads: usize, hd: usize) -> Vec<f64> {
    let d = heads * hd;
    let mut out = vec![0.0; x.len()];
    for t in 0..rows {
        for h in 0..heads {
            out[(h * rows + t) * hd..(h * rows + t + 1) * hd].copy_from_slice(&x[t * d + h * hd..t * d + (h + 1) * hd]);
        }
    }
    out
}

fn from_heads(xh: &[f64], rows: usize, heads: usize, hd: usize) -> Vec<f64> {
    let d = heads * hd;
    let mut out = vec![0.0; xh.len()];
    for h in 0..heads {
        for t in 0..rows {
            out[t * d + h * hd..t * d + (h + 1) * hd].copy_from_slice(&xh[(h * rows + t) * hd..(h * rows + t + 1) * hd]);
        }
    }
    out
}

/// Query rows handled per matrix product in attention. Only the causal
/// prefix of keys is multiplied, so work outside the triangle is confined to
/// the diagonal blocks.
const ATT_BLOCK: usize = 32;

/// Causal softmax attention over head-major buffers. Probabilities are kept
/// as a `rows x rows` matrix per head with zeros above the diagonal.
fn attention_forward(qh: &[f64], kh: &[f64], vh: &[f64], rows: usize, heads: usize, hd: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; heads * rows * rows];
    let mut out = vec![0.0; heads * rows * hd];
    for h in 0..heads {
        let q = &qh[h * rows * hd..(h + 1) * rows * hd];
        let k = &kh[h * rows * hd..(h + 1) * rows * hd];
        let v = &vh[h * rows * hd..(h + 1) * rows * hd];
        let p = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        let o = &mut out[h * rows * hd..(h + 1) * rows * hd];
        for i0 in (0..rows).step_by(ATT_BLOCK) {
            let i1 = (i0 + ATT_BLOCK).min(rows);
            let nb = i1 - i0;
            let pb = &mut p[i0 * rows..];
            // scores against keys 0..i1, then mask and normalize row by row
            gemm_strided(nb, hd, i1, scale, &q[i0 * hd..], (hd, 1), k, (1, hd), 0.0, pb, rows);
            for r in 0..nb {
                let i = i0 + r;
                let row = &mut pb[r * rows..r * rows + i1];
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row[..=i].iter_mut().for_each(|pj| *pj -= max);
                exp_in_place(&mut row[..=i]);
                let inv = 1.0 / row[..=i].iter().sum::<f64>();
                row[..=i].iter_mut().for_each(|pj| *pj *= inv);
                row[i + 1..].fill(0.0);
            }
            gemm_strided(nb, i1, hd, 1.0, pb, (rows, 1), v, (hd, 1), 0.0, &mut o[i0 * hd..], hd);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` in head-major layout.
fn attention_backward(
    cache: &LayerCache,
    douth: &[f64],
    rows: usize,
    heads: usize,
    hd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; heads * rows * hd];
    let mut dk = vec![0.0; heads * rows * hd];
    let mut dv = vec![0.0; heads * rows * hd];
    let mut ds = vec![0.0; ATT_BLOCK * rows];
    for h in 0..heads {
        let span = h * rows * hd..(h + 1) * rows * hd;
        let (q, k, v) = (&cache.qh[span.clone()], &cache.kh[span.clone()], &cache.vh[span.clone()]);
        let (out, dout) = (&cache.outh[span.clone()], &douth[span.clone()]);
        let (dqh, dkh, dvh) = (&mut dq[span.clone()], &mut dk[span.clone()], &mut dv[span]);
        let p = &cache.probs[h * rows * rows..(h + 1) * rows * rows];
        for i0 in (0..rows).step_by(ATT_BLOCK) {
            let i1 = (i0 + ATT_BLOCK).min(rows);
            let nb = i1 - i0;
            let pb = &p[i0 * rows..];
            let dob = &dout[i0 * hd..];
            // dP = dO V^T, dV += P^T dO
            gemm_strided(nb, hd, i1, 1.0, dob, (hd, 1), v, (1, hd), 0.0, &mut ds, i1);
            gemm_strided(i1, nb, hd, 1.0, pb, (1, rows), dob, (hd, 1), 1.0, dvh, hd);
            for r in 0..nb {
                let i = i0 + r;
                let weighted = dot(&dout[i * hd..(i + 1) * hd], &out[i * hd..(i + 1) * hd]);
                let prow = &pb[r * rows..r * rows + i1];
                let drow = &mut ds[r * i1..(r + 1) * i1];
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - weighted) * scale;
                }
                drow[i + 1..].fill(0.0);
            }
            // dQ = dS K, dK += dS^T Q
            gemm_strided(nb, i1, hd, 1.0, &ds, (i1, 1), k, (hd, 1), 0.0, &mut dqh[i0 * hd..], hd);
            gemm_strided(i1, nb, hd, 1.0, &ds, (1, i1), &q[i0 * hd..], (hd, 1), 1.0, dkh, hd);
        }
    }
    (dq, dk, dv)
}

impl<'a> Transformer<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Transformer { state, adapters: None }
    }

    pub fn with_adapters(state: &'a ModelState, adapters: &'a LoraAdapters) -> Self {
        Transformer {
            state,
            adapters: Some(adapters),
        }
    }

    fn param(&self, offset: usize, len: usize) -> &'a [f64] {
        &self.state.data[offset..offset + len]
    }

    fn attn_affine(&self, layer: usize, idx: &LayerIndex, proj: usize) -> Affine<'a> {
        let d = self.state.config.d_model;
        let low_rank = self.adapters.and_then(|ad| {
            ad.target(layer, proj).map(|t| LowRank {
                b: &ad.data[t.b_offset..t.b_offset + t.d_in * ad.rank],
                a: &ad.data[t.a_offset..t.a_offset + ad.rank * t.d_out],
                rank: ad.rank,
                scale: ad.scale(),
                b_offset: t.b_offset,
                a_offset: t.a_offset,
            })
        });
        Affine {
            w: self.param(idx.attn.weight[proj], d * d),
            b: self.param(idx.attn.bias[proj], d),
            d_in: d,
            d_out: d,
            low_rank,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let cfg = &self.state.config;
        if tokens.is_empty() {
            return Err(LabError::Config("empty token sequence".into()));
        }
        if tokens.len() > cfg.context_len {
            return Err(LabError::SequenceTooLong {
                len: tokens.len(),
                context_len: cfg.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(LabError::InvalidToken(bad));
        }
        Ok(())
    }

    /// Logits for every position.
    pub fn forward(&self, tokens: &[u32]) -> Result<Logits> {
        Ok(self.forward_cached(tokens, tokens.len())?.0)
    }

    /// Runs the network and keeps activations; logits only for the first
    /// `logit_rows` positions.
    pub fn forward_cached(&self, tokens: &[u32], logit_rows: usize) -> Result<(Logits, ForwardCache)> {
        self.check_tokens(tokens)?;
        let cfg = self.state.config;
        let layout = &self.state.layout;
        let (rows, d, heads, hd) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
        let logit_rows = logit_rows.min(rows);

        let mut x = vec![0.0; rows * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.param(layout.tok_emb + tok as usize * d, d);
            let p = self.param(layout.pos_emb + t * d, d);
            for c in 0..d {
                x[t * d + c] = e[c] + p[c];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, idx) in layout.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, d, self.param(idx.ln1_gain, d), self.param(idx.ln1_bias, d));
            let mut low_rank: [Option<Vec<f64>>; 4] = Default::default();
            let mut qkv = Vec::with_capacity(3);
            for (proj, slot) in low_rank.iter_mut().enumerate().take(3) {
                let (y, xb) = self.attn_affine(l, idx, proj).forward(&a, rows);
                *slot = xb;
                qkv.push(to_heads(&y, rows, heads, hd));
            }
            let vh = qkv.pop().unwrap();
            let kh = qkv.pop().unwrap();
            let qh = qkv.pop().unwrap();
            let (outh, probs) = attention_forward(&qh, &kh, &vh, rows, heads, hd);
            let att = from_heads(&outh, rows, heads, hd);
            let (y, xb) = self.attn_affine(l, idx, 3).forward(&att, rows);
            low_rank[3] = xb;
            axpy(1.0, &y, &mut x);

            let (m, ln2) = layer_norm(&x, d, self.param(idx.ln2_gain, d), self.param(idx.ln2_bias, d));
            let fc = Affine {
                w: self.param(idx.fc_weight, d * cfg.d_ff),
                b: self.param(idx.fc_bias, cfg.d_ff),
                d_in: d,
                d_out: cfg.d_ff,
                low_rank: None,
            };
            let (u, _) = fc.forward(&m, rows);
            let gelu_t = gelu_tanh(&u);
            let gl: Vec<f64> = u.iter().zip(&gelu_t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
            let proj = Affine {
                w: self.param(idx.proj_weight, cfg.d_ff * d),
                b: self.param(idx.proj_bias, d),
                d_in: cfg.d_ff,
                d_out: d,
                low_rank: None,
            };
            let (z, _) = proj.forward(&gl, rows);
            axpy(1.0, &z, &mut x);

            layers.push(LayerCache {
                ln1,
                a,
                qh,
                kh,
                vh,
                probs,
                outh,
                att,
                low_rank,
                ln2,
                m,
                u,
                gelu_t,
                gl,
            });
        }

        let (hf, lnf) = layer_norm(&x, d, self.param(layout.lnf_gain, d), self.param(layout.lnf_bias, d));
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; logit_rows * vocab];
        gemm(logit_rows, d, vocab, 1.0, &hf, false, self.param(layout.tok_emb, vocab * d), true, 0.0, &mut logits);
        Ok((
            Logits {
                rows: logit_rows,
                vocab,
                data: logits,
            },
            ForwardCache {
                tokens: tokens.to_vec(),
                layers,
                lnf,
                hf,
            },
        ))
    }

    /// Backpropagates `dlogits` (one row per cached logit row).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], sink: &mut GradSink<'_>) {
        let cfg = self.state.config;
        let layout = &self.state.layout;
        let (rows, d, heads, hd, vocab) = (cache.tokens.len(), cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
        let logit_rows = dlogits.len() / vocab;
        if let Some(len) = sink.base.as_deref().map(<[f64]>::len) {
            assert_eq!(len, layout.total, "base gradient buffer does not match the layout");
        }

        let emb = self.param(layout.tok_emb, vocab * d);
        let mut dhf = vec![0.0; rows * d];
        gemm(logit_rows, vocab, d, 1.0, dlogits, false, emb, false, 0.0, &mut dhf);
        if let Some(base) = sink.base.as_deref_mut() {
            let demb = &mut base[layout.tok_emb..layout.tok_emb + vocab * d];
            gemm(vocab, logit_rows, d, 1.0, dlogits, true, &cache.hf, false, 1.0, demb);
        }

        let mut dx = vec![0.0; rows * d];
        {
            let gain = self.param(layout.lnf_gain, d);
            let params = sink.base.as_deref_mut().map(|g| split_pair(g, layout.lnf_gain, layout.lnf_bias, d));
            layer_norm_backward(&dhf, &cache.lnf, gain, d, &mut dx, params);
        }

        for (l, (idx, lc)) in layout.layers.iter().zip(&cache.layers).enumerate().rev() {
            // MLP branch
            let proj = Affine {
                w: self.param(idx.proj_weight, cfg.d_ff * d),
                b: self.param(idx.proj_bias, d),
                d_in: cfg.d_ff,
                d_out: d,
                low_rank: None,
            };
            let dgl = proj.backward(&lc.gl, None, &dx, rows, idx.proj_weight, idx.proj_bias, sink);
            let du: Vec<f64> = dgl
                .iter()
                .zip(lc.u.iter().zip(&lc.gelu_t))
                .map(|(g, (&u, &t))| g * gelu_grad(u, t))
                .collect();
            let fc = Affine {
                w: self.param(idx.fc_weight, d * cfg.d_ff),
                b: self.param(idx.fc_bias, cfg.d_ff),
                d_in: d,
                d_out: cfg.d_ff,
                low_rank: None,
            };
            let dm = fc.backward(&lc.m, None, &du, rows, idx.fc_weight, idx.fc_bias, sink);
            {
                let params = sink.base.as_deref_mut().map(|g| split_pair(g, idx.ln2_gain, idx.ln2_bias, d));
                layer_norm_backward(&dm, &lc.ln2, self.param(idx.ln2_gain, d), d, &mut dx, params);
            }

            // attention branch
            let out_proj = self.attn_affine(l, idx, 3);
            let datt = out_proj.backward(
                &lc.att,
                lc.low_rank[3].as_ref(),
                &dx,
                rows,
                idx.attn.weight[3],
                idx.attn.bias[3],
                sink,
            );
            let douth = to_heads(&datt, rows, heads, hd);
            let (dq, dk, dv) = attention_backward(lc, &douth, rows, heads, hd);
            let mut da = vec![0.0; rows * d];
            for (proj, dh) in [dq, dk, dv].iter().enumerate() {
                let dy = from_heads(dh, rows, heads, hd);
                let affine = self.attn_affine(l, idx, proj);
                let part = affine.backward(
                    &lc.a,
                    lc.low_rank[proj].as_ref(),
                    &dy,
                    rows,
                    idx.attn.weight[proj],
                    idx.attn.bias[proj],
                    sink,
                );
                axpy(1.0, &part, &mut da);
            }
            let params = sink.base.as_deref_mut().map(|g| split_pair(g, idx.ln1_gain, idx.ln1_bias, d));
            layer_norm_backward(&da, &lc.ln1, self.param(idx.ln1_gain, d), d, &mut dx, params);
        }

        if let Some(base) = sink.base.as_deref_mut() {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let row = &dx[t * d..(t + 1) * d];
                axpy(1.0, row, &mut base[layout.tok_emb + tok as usize * d..layout.tok_emb + (tok as usize + 1) * d]);
                axpy(1.0, row, &mut base[layout.pos_emb + t * d..layout.pos_emb + (t + 1) * d]);
            }
        }
    }

    /// Argmax continuation of `prefix`; ties go to the lowest token id.
    pub fn greedy_generate(&self, prefix: &[u32], n_new: usize) -> Result<Vec<u32>> {
        self.check_tokens(prefix)?;
        let context_len = self.state.config.context_len;
        if prefix.len() + n_new > context_len {
            return Err(LabError::SequenceTooLong {
                len: prefix.len() + n_new,
                context_len,
            });
        }
        let mut tokens = prefix.to_vec();
        for _ in 0..n_new {
            let logits = self.forward(&tokens)?;
            let last = logits.row(logits.rows - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            tokens.push(best as u32);
        }
        Ok(tokens)
    }
}

/// Two disjoint `len`-long windows of `g` starting at `a` and `b` (`a < b`).
fn split_pair(g: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// `-log softmax(logits[i])[targets[i]]` for every row.
pub fn per_token_loss(logits: &Logits, targets: &[u32]) -> Result<Vec<f64>> {
    if targets.len() != logits.rows {
        return Err(LabError::Config(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            let t = t as usize;
            if t >= row.len() {
                return Err(LabError::InvalidToken(t as u32));
            }
            Ok(log_sum_exp(row) - row[t])
        })
        .collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = row.iter().map(|v| v - max).collect();
    exp_in_place(&mut e);
    max + e.iter().sum::<f64>().ln()
}

/// Softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}
