//! Parameter containers for the decoder and its LoRA adapters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Filled in from the tokenizer when left at 0.
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 512,
            vocab_size: 0,
            mlp_ratio: 4,
            tie_embeddings: false,
            seed: 42,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0
            || self.context_len == 0
            || self.vocab_size == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config(
                "n_layers, context_len, vocab_size and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// One pre-norm transformer block. Weight matrices map row vectors:
/// `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    /// `d_model × vocab`; `None` when tied to `tok_emb`.
    pub w_out: Option<Mat>,
}

fn ones(n: usize) -> Mat {
    Mat::from_vec(1, n, vec![1.0; n])
}

impl LmParams {
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, v) = (config.d_model, config.hidden(), config.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Mat::randn(v, d, std, &mut rng);
        let pos_emb = Mat::randn(config.context_len, d, std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: ones(d),
                ln1_b: Mat::zeros(1, d),
                wq: Mat::randn(d, d, std, &mut rng),
                wk: Mat::randn(d, d, std, &mut rng),
                wv: Mat::randn(d, d, std, &mut rng),
                wo: Mat::randn(d, d, resid_std, &mut rng),
                ln2_g: ones(d),
                ln2_b: Mat::zeros(1, d),
                w1: Mat::randn(d, h, std, &mut rng),
                b1: Mat::zeros(1, h),
                w2: Mat::randn(h, d, resid_std, &mut rng),
                b2: Mat::zeros(1, d),
            })
            .collect();
        let w_out = (!config.tie_embeddings).then(|| Mat::randn(d, v, std, &mut rng));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones(d),
            lnf_b: Mat::zeros(1, d),
            w_out,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, m| m.data.iter_mut().for_each(|v| *v = 0.0));
        out
    }

    /// Visits every tensor with a stable name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Mat)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.named() {
                f(&format!("layers.{l}.{name}"), m);
            }
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        if let Some(w) = &self.w_out {
            f("w_out", w);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.named_mut() {
                f(&format!("layers.{l}.{name}"), m);
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        if let Some(w) = &mut self.w_out {
            f("w_out", w);
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, m| ok &= m.is_finite());
        ok
    }
}

impl LayerParams {
    pub fn named(&self) -> [(&'static str, &Mat); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Mat); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

/// Low-rank pair for one projection: delta `= (alpha/r) · B · A`, with
/// `A: r × d` and `B: d × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Mat,
    pub b: Mat,
}

/// Adapters on the query and value projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub q: LoraPair,
    pub v: LoraPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// `A` uniform in `±1/√d`, `B = 0`, so a fresh adapter is a no-op.
    pub fn init(lm: &LmConfig, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!(
                "LoRA dropout {} outside [0, 1)",
                config.dropout
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (lm.d_model, config.rank);
        let bound = 1.0 / (d as f64).sqrt();
        let mut pair = || LoraPair {
            a: Mat::uniform(r, d, bound, &mut rng),
            b: Mat::zeros(d, r),
        };
        let layers = (0..lm.n_layers)
            .map(|_| LoraLayer {
                q: pair(),
                v: pair(),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, _, m| m.data.iter_mut().for_each(|v| *v = 0.0));
        out
    }

    /// Visits `(name, layer, tensor)` in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, usize, &Mat)) {
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("lora.{l}.q.a"), l, &layer.q.a);
            f(&format!("lora.{l}.q.b"), l, &layer.q.b);
            f(&format!("lora.{l}.v.a"), l, &layer.v.a);
            f(&format!("lora.{l}.v.b"), l, &layer.v.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, usize, &mut Mat)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("lora.{l}.q.a"), l, &mut layer.q.a);
            f(&format!("lora.{l}.q.b"), l, &mut layer.q.b);
            f(&format!("lora.{l}.v.a"), l, &mut layer.v.a);
            f(&format!("lora.{l}.v.b"), l, &mut layer.v.b);
        }
    }

    /// True when both adapters have the same rank, scaling and shapes.
    pub fn same_structure(&self, other: &LoraAdapter) -> bool {
        if self.config != other.config || self.layers.len() != other.layers.len() {
            return false;
        }
        let mut shapes = Vec::new();
        self.visit(|_, _, m| shapes.push(m.shape()));
        let mut i = 0;
        let mut same = true;
        other.visit(|_, _, m| {
            same &= shapes.get(i) == Some(&m.shape());
            i += 1;
        });
        same
    }

    /// Base weights with this adapter folded in:
    /// `W_q ← W_q + s·(B A)ᵀ`, same for `W_v`.
    pub fn merge_into(&self, params: &LmParams) -> LmParams {
        let mut merged = params.clone();
        let s = self.scaling();
        for (layer, lora) in merged.layers.iter_mut().zip(&self.layers) {
            for (w, pair) in [(&mut layer.wq, &lora.q), (&mut layer.wv, &lora.v)] {
                // (B A)ᵀ = Aᵀ Bᵀ
                crate::linalg::matmul_tn_acc(w, s, &pair.a, &pair.b.transpose());
            }
        }
        merged
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, m| ok &= m.is_finite());
        ok
    }
}

/// Adapters active in one forward pass, each with its fusion weight.
/// The projection delta is `Σ_n w_n · (alpha/r) · B_n (A_n x)`.
#[derive(Debug, Clone)]
pub struct AdapterMix<'a> {
    pub(crate) experts: Vec<(f64, &'a LoraAdapter)>,
}

impl<'a> AdapterMix<'a> {
    pub fn single(adapter: &'a LoraAdapter) -> Self {
        Self {
            experts: vec![(1.0, adapter)],
        }
    }

    /// Weighted mix; zero-weight adapters are dropped so that a one-hot
    /// weight vector runs exactly the single-adapter computation.
    pub fn weighted(weights: &[f64], adapters: &[&'a LoraAdapter]) -> Result<Self> {
        if weights.len() != adapters.len() || adapters.is_empty() {
            return Err(Error::Invalid(
                "fusion weights and adapters differ in length".into(),
            ));
        }
        if adapters.iter().any(|a| !a.same_structure(adapters[0])) {
            return Err(Error::Invalid(
                "fused adapters are not structurally identical".into(),
            ));
        }
        let experts = weights
            .iter()
            .zip(adapters)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, a)| (*w, *a))
            .collect();
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[(f64, &'a LoraAdapter)] {
        &self.experts
    }
}
