//! Causal decoder forward pass and exact reverse-mode gradients.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! a  = LN1(x)
//! q  = a·Wq + Σ w_n s B_n(A_n drop(a))    k = a·Wk    v = a·Wv + (same for v)
//! h  = x + MultiHeadCausal(q, k, v)·Wo
//! y  = h + GELU(LN2(h)·W1 + b1)·W2 + b2
//! ```
//!
//! Logits are only materialized for the rows a caller asks for.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AdapterMix, LmParams, LoraAdapter, LoraPair};
use crate::dataset::Slot;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_nt_acc, matmul_tn, matmul_tn_acc, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Token ids with their input embedding rows, after slot substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct SplicedSequence {
    pub ids: Vec<u32>,
    pub embeddings: Mat,
    /// Index of the first answer token; equals `len()` for a bare prompt.
    pub answer_start: usize,
    pub slots: Vec<(usize, Slot)>,
}

impl SplicedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// LoRA dropout active, masks drawn from this seed.
    Train {
        seed: u64,
    },
}

/// Logits for a subset of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRows {
    pub rows: Vec<usize>,
    pub values: Mat,
}

impl LogitRows {
    /// The logit vector at sequence position `pos`, if it was computed.
    pub fn at(&self, pos: usize) -> Option<&[f64]> {
        self.rows
            .iter()
            .position(|&r| r == pos)
            .map(|i| self.values.row(i))
    }

    pub fn at_mut(&mut self, pos: usize) -> Option<&mut [f64]> {
        let i = self.rows.iter().position(|&r| r == pos)?;
        Some(self.values.row_mut(i))
    }
}

struct LoraCache {
    /// LoRA input after dropout (equal to the block input in eval mode).
    input: Mat,
    mask: Option<Mat>,
    /// `input · Aᵀ`
    z: Mat,
}

struct LayerCache {
    xhat1: Mat,
    rstd1: Vec<f64>,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    att: Mat,
    xhat2: Mat,
    rstd2: Vec<f64>,
    b: Mat,
    u: Mat,
    g: Mat,
    lora_q: Vec<LoraCache>,
    lora_v: Vec<LoraCache>,
}

/// Activations recorded by [`forward`] for [`backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    xhatf: Mat,
    rstdf: Vec<f64>,
    f: Mat,
    len: usize,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, Mat, Vec<f64>) {
    let d = x.cols;
    let mut xhat = Mat::zeros(x.rows, d);
    let mut y = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xh[c] * g.data[c] + b.data[c];
        }
    }
    (y, xhat, rstd)
}

/// Accumulates `dg`, `db` and returns `dx`.
fn layer_norm_backward(
    dy: &Mat,
    xhat: &Mat,
    rstd: &[f64],
    g: &Mat,
    dg: Option<&mut Mat>,
    db: Option<&mut Mat>,
) -> Mat {
    let d = dy.cols;
    if let Some(dg) = dg {
        for r in 0..dy.rows {
            for c in 0..d {
                dg.data[c] += dy.at(r, c) * xhat.at(r, c);
            }
        }
    }
    if let Some(db) = db {
        for r in 0..dy.rows {
            for c in 0..d {
                db.data[c] += dy.at(r, c);
            }
        }
    }
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let (dyr, xh) = (dy.row(r), xhat.row(r));
        for c in 0..d {
            dxhat[c] = dyr[c] * g.data[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_row_bias(m: &mut Mat, bias: &Mat) {
    for r in 0..m.rows {
        for (v, b) in m.row_mut(r).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

fn col_sum_into(dst: &mut Mat, src: &Mat) {
    for r in 0..src.rows {
        for (d, s) in dst.data.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn head_slice(m: &Mat, head: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, dh);
    for r in 0..m.rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[head * dh..(head + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Mat, src: &Mat, head: usize, dh: usize) {
    for r in 0..src.rows {
        for (d, s) in dst.row_mut(r)[head * dh..(head + 1) * dh]
            .iter_mut()
            .zip(src.row(r))
        {
            *d += s;
        }
    }
}

/// Applies every adapter in the mix to `a` and adds the deltas to `out`.
fn lora_forward(
    a: &Mat,
    mix: &[(f64, &LoraAdapter)],
    l: usize,
    which: Site,
    dropout_rng: Option<&mut ChaCha8Rng>,
    out: &mut Mat,
) -> Vec<LoraCache> {
    let mut rng = dropout_rng;
    let mut caches = Vec::with_capacity(mix.len());
    for &(w, adapter) in mix {
        let p = adapter.config.dropout;
        let pair = site(adapter, l, which);
        let (input, mask) = match rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_vec(
                    a.rows,
                    a.cols,
                    (0..a.data.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                );
                let mut input = a.clone();
                input
                    .data
                    .iter_mut()
                    .zip(&mask.data)
                    .for_each(|(x, m)| *x *= m);
                (input, Some(mask))
            }
            _ => (a.clone(), None),
        };
        let z = matmul_nt(&input, &pair.a);
        matmul_nt_acc(out, w * adapter.scaling(), &z, &pair.b);
        caches.push(LoraCache { input, mask, z });
    }
    caches
}

/// Runs the decoder on `seq` and returns logits at `logit_rows`.
pub fn forward(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    seq: &SplicedSequence,
    mode: Mode,
    logit_rows: &[usize],
) -> Result<(LogitRows, ForwardCache)> {
    let cfg = &params.config;
    let len = seq.len();
    if len > cfg.context_len {
        return Err(Error::ContextOverflow {
            len,
            context: cfg.context_len,
        });
    }
    if seq.embeddings.shape() != (len, cfg.d_model) {
        return Err(Error::Dimension {
            expected: cfg.d_model,
            got: seq.embeddings.cols,
        });
    }
    if let Some(&bad) = logit_rows.iter().find(|&&r| r >= len) {
        return Err(Error::Invalid(format!(
            "logit row {bad} outside sequence of length {len}"
        )));
    }
    let experts: &[(f64, &LoraAdapter)] = mix.map(|m| m.experts()).unwrap_or(&[]);
    let mut dropout_rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = seq.embeddings.clone();
    for r in 0..len {
        for (v, p) in x.row_mut(r).iter_mut().zip(params.pos_emb.row(r)) {
            *v += p;
        }
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let (a, xhat1, rstd1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
        let mut q = matmul(&a, &layer.wq);
        let k = matmul(&a, &layer.wk);
        let mut v = matmul(&a, &layer.wv);
        let lora_q = lora_forward(&a, experts, l, Site::Q, dropout_rng.as_mut(), &mut q);
        let lora_v = lora_forward(&a, experts, l, Site::V, dropout_rng.as_mut(), &mut v);

        let mut att = Mat::zeros(len, d);
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let (qh, kh, vh) = (
                head_slice(&q, h, dh),
                head_slice(&k, h, dh),
                head_slice(&v, h, dh),
            );
            let mut s = matmul_nt(&qh, &kh);
            for i in 0..len {
                let row = s.row_mut(i);
                let max = row[..=i]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                for (j, val) in row.iter_mut().enumerate() {
                    if j <= i {
                        *val = (*val * scale - max).exp();
                        sum += *val;
                    } else {
                        *val = 0.0;
                    }
                }
                row[..=i].iter_mut().for_each(|v| *v /= sum);
            }
            let oh = matmul(&s, &vh);
            add_head_slice(&mut att, &oh, h, dh);
            probs.push(s);
        }
        let mut hmid = x.clone();
        hmid.add_assign(&matmul(&att, &layer.wo));

        let (b, xhat2, rstd2) = layer_norm(&hmid, &layer.ln2_g, &layer.ln2_b);
        let mut u = matmul(&b, &layer.w1);
        add_row_bias(&mut u, &layer.b1);
        let g = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
        let mut out = matmul(&g, &layer.w2);
        add_row_bias(&mut out, &layer.b2);
        out.add_assign(&hmid);

        caches.push(LayerCache {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            probs,
            att,
            xhat2,
            rstd2,
            b,
            u,
            g,
            lora_q,
            lora_v,
        });
        x = out;
    }

    let (f, xhatf, rstdf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let frows = f.gather_rows(logit_rows);
    let values = match &params.w_out {
        Some(w) => matmul(&frows, w),
        None => matmul_nt(&frows, &params.tok_emb),
    };
    Ok((
        LogitRows {
            rows: logit_rows.to_vec(),
            values,
        },
        ForwardCache {
            layers: caches,
            xhatf,
            rstdf,
            f,
            len,
        },
    ))
}

/// Which gradients [`backward`] should produce.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub base: bool,
    /// Per-layer flags for adapter gradients; `None` skips adapters entirely.
    pub adapter_layers: Option<Vec<bool>>,
    /// Gradient w.r.t. the spliced input embedding rows.
    pub inputs: bool,
}

impl GradRequest {
    pub fn adapters_only(n_layers: usize) -> Self {
        Self {
            base: false,
            adapter_layers: Some(vec![true; n_layers]),
            inputs: false,
        }
    }

    pub fn full(n_layers: usize) -> Self {
        Self {
            base: true,
            adapter_layers: Some(vec![true; n_layers]),
            inputs: false,
        }
    }

    fn adapter_layer(&self, l: usize) -> bool {
        self.adapter_layers
            .as_ref()
            .is_some_and(|v| v.get(l).copied().unwrap_or(false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: Option<LmParams>,
    /// One gradient per adapter in the mix, in mix order.
    pub adapters: Vec<LoraAdapter>,
    pub inputs: Option<Mat>,
}

#[derive(Clone, Copy)]
enum Site {
    Q,
    V,
}

fn site(adapter: &LoraAdapter, l: usize, site: Site) -> &LoraPair {
    match site {
        Site::Q => &adapter.layers[l].q,
        Site::V => &adapter.layers[l].v,
    }
}

fn site_mut(adapter: &mut LoraAdapter, l: usize, site: Site) -> &mut LoraPair {
    match site {
        Site::Q => &mut adapter.layers[l].q,
        Site::V => &mut adapter.layers[l].v,
    }
}

#[allow(clippy::too_many_arguments)]
fn lora_backward(
    dy: &Mat,
    mix: &[(f64, &LoraAdapter)],
    l: usize,
    which: Site,
    caches: &[LoraCache],
    mut grads: Option<&mut [LoraAdapter]>,
    need_input: bool,
    da: &mut Mat,
) {
    for (n, (&(w, adapter), cache)) in mix.iter().zip(caches).enumerate() {
        let pair = site(adapter, l, which);
        let s = w * adapter.scaling();
        let dz = matmul(dy, &pair.b);
        if let Some(grads) = grads.as_deref_mut() {
            let g = site_mut(&mut grads[n], l, which);
            // dB = s·dyᵀz, dA = s·(dy B)ᵀ input
            matmul_tn_acc(&mut g.b, s, dy, &cache.z);
            matmul_tn_acc(&mut g.a, s, &dz, &cache.input);
        }
        if need_input {
            let mut dinput = matmul(&dz, &pair.a);
            dinput.scale(s);
            if let Some(mask) = &cache.mask {
                dinput
                    .data
                    .iter_mut()
                    .zip(&mask.data)
                    .for_each(|(x, m)| *x *= m);
            }
            da.add_assign(&dinput);
        }
    }
}

/// Reverse pass. `dlogits` holds the loss gradient for the rows the forward
/// pass produced, in the same order.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    seq: &SplicedSequence,
    cache: &ForwardCache,
    logit_rows: &[usize],
    dlogits: &Mat,
    request: &GradRequest,
) -> Result<Gradients> {
    let cfg = &params.config;
    let experts: &[(f64, &LoraAdapter)] = mix.map(|m| m.experts()).unwrap_or(&[]);
    if dlogits.shape() != (logit_rows.len(), cfg.vocab_size) {
        return Err(Error::Invalid(
            "dlogits shape does not match the requested rows".into(),
        ));
    }
    let len = cache.len;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut base = request.base.then(|| params.zeros_like());
    let mut adapters: Vec<LoraAdapter> = if request.adapter_layers.is_some() {
        experts.iter().map(|(_, a)| a.zeros_like()).collect()
    } else {
        Vec::new()
    };
    let lowest = if request.base || request.inputs {
        Some(0)
    } else {
        (0..cfg.n_layers)
            .find(|&l| request.adapter_layer(l))
            .filter(|_| !experts.is_empty())
    };
    let Some(lowest) = lowest else {
        return Ok(Gradients {
            base,
            adapters,
            inputs: None,
        });
    };

    let frows = cache.f.gather_rows(logit_rows);
    let dfrows = match &params.w_out {
        Some(w) => {
            if let Some(g) = base.as_mut() {
                matmul_tn_acc(g.w_out.as_mut().expect("untied"), 1.0, &frows, dlogits);
            }
            matmul_nt(dlogits, w)
        }
        None => {
            if let Some(g) = base.as_mut() {
                matmul_tn_acc(&mut g.tok_emb, 1.0, dlogits, &frows);
            }
            matmul(dlogits, &params.tok_emb)
        }
    };
    let mut df = Mat::zeros(len, d);
    for (i, &r) in logit_rows.iter().enumerate() {
        for (a, b) in df.row_mut(r).iter_mut().zip(dfrows.row(i)) {
            *a += b;
        }
    }
    let mut dx = {
        let (dg, db) = match base.as_mut() {
            Some(g) => (Some(&mut g.lnf_g), Some(&mut g.lnf_b)),
            None => (None, None),
        };
        layer_norm_backward(&df, &cache.xhatf, &cache.rstdf, &params.lnf_g, dg, db)
    };

    for l in (lowest..cfg.n_layers).rev() {
        let layer = &params.layers[l];
        let c = &cache.layers[l];
        let mut lg = base.as_mut().map(|g| &mut g.layers[l]);

        // MLP branch.
        if let Some(g) = lg.as_deref_mut() {
            col_sum_into(&mut g.b2, &dx);
            matmul_tn_acc(&mut g.w2, 1.0, &c.g, &dx);
        }
        let mut du = matmul_nt(&dx, &layer.w2);
        du.data
            .iter_mut()
            .zip(&c.u.data)
            .for_each(|(d, &u)| *d *= gelu_grad(u));
        if let Some(g) = lg.as_deref_mut() {
            col_sum_into(&mut g.b1, &du);
            matmul_tn_acc(&mut g.w1, 1.0, &c.b, &du);
        }
        let dbn = matmul_nt(&du, &layer.w1);
        let mut dres = {
            let (dg, db) = match lg.as_deref_mut() {
                Some(g) => (Some(&mut g.ln2_g), Some(&mut g.ln2_b)),
                None => (None, None),
            };
            layer_norm_backward(&dbn, &c.xhat2, &c.rstd2, &layer.ln2_g, dg, db)
        };
        dres.add_assign(&dx);

        // Attention branch.
        if let Some(g) = lg.as_deref_mut() {
            matmul_tn_acc(&mut g.wo, 1.0, &c.att, &dres);
        }
        let datt = matmul_nt(&dres, &layer.wo);
        let mut dq = Mat::zeros(len, d);
        let mut dk = Mat::zeros(len, d);
        let mut dv = Mat::zeros(len, d);
        for h in 0..nh {
            let p = &c.probs[h];
            let doh = head_slice(&datt, h, hd);
            let vh = head_slice(&c.v, h, hd);
            let mut ds = matmul_nt(&doh, &vh);
            add_head_slice(&mut dv, &matmul_tn(p, &doh), h, hd);
            for i in 0..len {
                let prow = p.row(i);
                let row = ds.row_mut(i);
                let dot: f64 = prow[..=i].iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    row[j] = if j <= i {
                        prow[j] * (row[j] - dot) * scale
                    } else {
                        0.0
                    };
                }
            }
            let qh = head_slice(&c.q, h, hd);
            let kh = head_slice(&c.k, h, hd);
            add_head_slice(&mut dq, &matmul(&ds, &kh), h, hd);
            add_head_slice(&mut dk, &matmul_tn(&ds, &qh), h, hd);
        }

        let need_below = l > lowest || request.base || request.inputs;
        let mut da = Mat::zeros(len, d);
        if let Some(g) = lg.as_deref_mut() {
            matmul_tn_acc(&mut g.wq, 1.0, &c.a, &dq);
            matmul_tn_acc(&mut g.wk, 1.0, &c.a, &dk);
            matmul_tn_acc(&mut g.wv, 1.0, &c.a, &dv);
        }
        if need_below || lg.is_some() {
            matmul_nt_acc(&mut da, 1.0, &dq, &layer.wq);
            matmul_nt_acc(&mut da, 1.0, &dk, &layer.wk);
            matmul_nt_acc(&mut da, 1.0, &dv, &layer.wv);
        }
        let mut ag = request.adapter_layer(l).then_some(adapters.as_mut_slice());
        lora_backward(
            &dq,
            experts,
            l,
            Site::Q,
            &c.lora_q,
            ag.as_deref_mut(),
            need_below,
            &mut da,
        );
        lora_backward(
            &dv,
            experts,
            l,
            Site::V,
            &c.lora_v,
            ag.as_deref_mut(),
            need_below,
            &mut da,
        );
        if !need_below {
            break;
        }
        let mut dprev = {
            let (dg, db) = match lg.as_deref_mut() {
                Some(g) => (Some(&mut g.ln1_g), Some(&mut g.ln1_b)),
                None => (None, None),
            };
            layer_norm_backward(&da, &c.xhat1, &c.rstd1, &layer.ln1_g, dg, db)
        };
        dprev.add_assign(&dres);
        dx = dprev;
    }

    let reached_input = lowest == 0 && (request.base || request.inputs);
    if reached_input {
        if let Some(g) = base.as_mut() {
            for r in 0..len {
                for (a, b) in g.pos_emb.row_mut(r).iter_mut().zip(dx.row(r)) {
                    *a += b;
                }
            }
            for (r, &id) in seq.ids.iter().enumerate() {
                if seq.slots.iter().any(|&(p, _)| p == r) {
                    continue;
                }
                for (a, b) in g.tok_emb.row_mut(id as usize).iter_mut().zip(dx.row(r)) {
                    *a += b;
                }
            }
        }
    }
    let inputs = (request.inputs && reached_input).then_some(dx);
    Ok(Gradients {
        base,
        adapters,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::LmConfig;

    #[test]
    fn attention_rows_are_causal_distributions() {
        let cfg = LmConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            vocab_size: 20,
            mlp_ratio: 2,
            tie_embeddings: false,
            seed: 3,
        };
        let params = LmParams::init(&cfg).unwrap();
        let ids: Vec<u32> = (0..9).map(|i| i + 7).collect();
        let mut embeddings = Mat::zeros(9, 8);
        for (r, &id) in ids.iter().enumerate() {
            embeddings
                .row_mut(r)
                .copy_from_slice(params.tok_emb.row(id as usize));
        }
        let seq = SplicedSequence {
            ids,
            embeddings,
            answer_start: 9,
            slots: vec![],
        };
        let (_, cache) = forward(&params, None, &seq, Mode::Eval, &[8]).unwrap();
        for layer in &cache.layers {
            for p in &layer.probs {
                for i in 0..9 {
                    let row = p.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
