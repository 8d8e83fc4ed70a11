//! Mixed thinking/recommendation training: instance construction, the two
//! losses and their weighted combination, AdamW, and the training loops for
//! LM adapters and the projector.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collab::CollabModel;
use crate::dataset::{PromptInstance, PromptKind, Slot};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, sigmoid, softplus, Mat};
use crate::lm::tokenizer::{BOS, EOS, NO, YES};
use crate::lm::{
    backward, embed_and_splice, forward, AdapterMix, GradRequest, LmParams, LogitRows, LoraAdapter,
    Mode, ScoreRule, SplicedSequence, Tokenizer,
};
use crate::projector::Projector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
            eta: 0.9,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.eta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )));
        }
        Ok(())
    }

    /// `(rec, think)` coefficients for an instance kind.
    pub fn coefficients(&self, kind: PromptKind) -> (f64, f64) {
        match kind {
            PromptKind::Thinking => (self.alpha, self.beta),
            PromptKind::Recommend => (self.eta, self.gamma),
        }
    }
}

/// Positions covered by the token cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkSpan {
    /// Answer tokens only.
    #[default]
    Answer,
    /// Every next-token target after the first, except feature slots.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub think_span: ThinkSpan,
    pub score_rule: ScoreRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub think_rate: f64,
    pub rec_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            think_rate: 0.2,
            rec_rate: 0.8,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 8,
            steps: 200,
            grad_clip: 1.0,
            seed: 42,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.think_rate)
            || (self.think_rate + self.rec_rate - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "think_rate ({}) and rec_rate ({}) must be in [0, 1] and sum to 1",
                self.think_rate, self.rec_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(
                "learning_rate must be positive, weight_decay and grad_clip nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Tokenized question and answer. `pos` is the negative answer length, so
/// `ids[ids.len() + pos]` is the first answer token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub ids: Vec<u32>,
    pub slots: Vec<(usize, Slot)>,
    pub pos: isize,
    pub kind: PromptKind,
    pub label: u8,
    pub user_id: usize,
    pub item_id: usize,
}

impl TrainingInstance {
    pub fn answer_start(&self) -> usize {
        (self.ids.len() as isize + self.pos) as usize
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Logit rows the losses read. Row `r` predicts token `r + 1`.
    pub fn loss_rows(&self, span: ThinkSpan) -> Vec<usize> {
        let first = match span {
            ThinkSpan::Answer => self.answer_start() - 1,
            ThinkSpan::Full => 0,
        };
        (first..self.len() - 1).collect()
    }

    pub fn splice(
        &self,
        params: &LmParams,
        features: &dyn FeatureSource,
    ) -> Result<SplicedSequence> {
        embed_and_splice(params, &self.ids, &self.slots, self.answer_start(), |s| {
            features.feature(s)
        })
    }
}

/// `BOS question answer`, with EOS closing thinking answers so generation
/// knows where a reason ends.
pub fn make_instance(
    prompt: &PromptInstance,
    tokenizer: &Tokenizer,
    context_len: usize,
) -> Result<TrainingInstance> {
    let question = tokenizer.encode(&prompt.question_text);
    let mut answer = tokenizer.encode(&prompt.answer_text);
    if answer.is_empty() {
        return Err(Error::Invalid(format!(
            "empty answer for user {} item {}",
            prompt.user_id, prompt.item_id
        )));
    }
    if !answer.slots.is_empty() {
        return Err(Error::Invalid(
            "answers cannot contain feature slots".into(),
        ));
    }
    if prompt.kind == PromptKind::Thinking {
        answer.ids.push(EOS);
    }
    let expected = if prompt.label == 1 { YES } else { NO };
    if answer.ids[0] != expected {
        return Err(Error::Invalid(format!(
            "answer {:?} does not start with the label word",
            prompt.answer_text
        )));
    }
    let mut ids = vec![BOS];
    ids.extend_from_slice(&question.ids);
    let slots = question.slots.iter().map(|&(p, s)| (p + 1, s)).collect();
    let pos = -(answer.ids.len() as isize);
    ids.extend_from_slice(&answer.ids);
    if ids.len() > context_len {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            context: context_len,
        });
    }
    Ok(TrainingInstance {
        ids,
        slots,
        pos,
        kind: prompt.kind,
        label: prompt.label,
        user_id: prompt.user_id,
        item_id: prompt.item_id,
    })
}

/// Vectors for feature slots.
pub trait FeatureSource {
    fn feature(&self, slot: Slot) -> Result<Vec<f64>>;
}

/// For text-only prompts: any slot is an error.
pub struct NoFeatures;

impl FeatureSource for NoFeatures {
    fn feature(&self, slot: Slot) -> Result<Vec<f64>> {
        Err(Error::Invalid(format!(
            "prompt contains feature slot {slot} but no feature source is configured"
        )))
    }
}

/// Collaborative embeddings passed through the projector.
pub struct ProjectedFeatures<'a> {
    pub collab: &'a CollabModel,
    pub projector: &'a Projector,
}

fn collab_vector<'a>(collab: &'a CollabModel, slot: Slot) -> Result<&'a [f64]> {
    match slot {
        Slot::User(u) => collab.embed_user(u),
        Slot::Item(i) => collab.embed_item(i),
    }
}

impl FeatureSource for ProjectedFeatures<'_> {
    fn feature(&self, slot: Slot) -> Result<Vec<f64>> {
        self.projector.project(collab_vector(self.collab, slot)?)
    }
}

/// Loss values for one instance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub think: f64,
    pub total: f64,
}

fn think_targets(inst: &TrainingInstance, span: ThinkSpan) -> Vec<(usize, u32)> {
    let slot_positions: Vec<usize> = inst.slots.iter().map(|&(p, _)| p).collect();
    inst.loss_rows(span)
        .into_iter()
        .filter(|r| !slot_positions.contains(&(r + 1)))
        .map(|r| (r, inst.ids[r + 1]))
        .collect()
}

fn row<'a>(logits: &'a LogitRows, r: usize) -> Result<&'a [f64]> {
    logits
        .at(r)
        .ok_or_else(|| Error::Invalid(format!("logits for position {r} were not computed")))
}

/// Mean next-token cross-entropy over the configured span.
pub fn loss_think(logits: &LogitRows, inst: &TrainingInstance, span: ThinkSpan) -> Result<f64> {
    let targets = think_targets(inst, span);
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(r, t) in &targets {
        let z = row(logits, r)?;
        total += log_sum_exp(z) - z[t as usize];
    }
    Ok(total / targets.len() as f64)
}

/// Binary cross-entropy of the `Yes` score read at the first answer position.
pub fn loss_rec(logits: &LogitRows, inst: &TrainingInstance, rule: ScoreRule) -> Result<f64> {
    let z = row(logits, inst.answer_start() - 1)?;
    let m = match rule {
        ScoreRule::YesNoMargin => z[YES as usize] - z[NO as usize],
        ScoreRule::YesLogit => z[YES as usize],
    };
    Ok(if inst.label == 1 {
        softplus(-m)
    } else {
        softplus(m)
    })
}

/// `α·L_rec + β·L_think` for thinking instances, `η·L_rec + γ·L_think` for
/// recommendation instances.
pub fn weighted_loss(kind: PromptKind, rec: f64, think: f64, weights: &LossWeights) -> f64 {
    let (a, b) = weights.coefficients(kind);
    a * rec + b * think
}

pub fn combined_loss(
    logits: &LogitRows,
    inst: &TrainingInstance,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let rec = loss_rec(logits, inst, cfg.score_rule)?;
    let think = loss_think(logits, inst, cfg.think_span)?;
    Ok(LossParts {
        rec,
        think,
        total: weighted_loss(inst.kind, rec, think, &cfg.weights),
    })
}

/// Combined loss and its gradient with respect to the logit rows of
/// `inst.loss_rows(cfg.think_span)`, in that order.
pub fn combined_loss_grad(
    logits: &LogitRows,
    inst: &TrainingInstance,
    cfg: &LossConfig,
) -> Result<(LossParts, Mat)> {
    let parts = combined_loss(logits, inst, cfg)?;
    let (c_rec, c_think) = cfg.weights.coefficients(inst.kind);
    let mut grad = Mat::zeros(logits.rows.len(), logits.values.cols);
    let index = |r: usize| {
        logits
            .rows
            .iter()
            .position(|&x| x == r)
            .expect("row present")
    };

    let targets = think_targets(inst, cfg.think_span);
    if !targets.is_empty() {
        let scale = c_think / targets.len() as f64;
        for &(r, t) in &targets {
            let i = index(r);
            let z = logits.values.row(i);
            let lse = log_sum_exp(z);
            let g = grad.row_mut(i);
            for (gv, zv) in g.iter_mut().zip(z) {
                *gv += scale * (zv - lse).exp();
            }
            g[t as usize] -= scale;
        }
    }

    let i = index(inst.answer_start() - 1);
    let z = logits.values.row(i);
    let y = f64::from(inst.label);
    let g = grad.row_mut(i);
    match cfg.score_rule {
        ScoreRule::YesNoMargin => {
            let d = c_rec * (sigmoid(z[YES as usize] - z[NO as usize]) - y);
            g[YES as usize] += d;
            g[NO as usize] -= d;
        }
        ScoreRule::YesLogit => g[YES as usize] += c_rec * (sigmoid(z[YES as usize]) - y),
    }
    Ok((parts, grad))
}

/// Draws instance kinds i.i.d. with the configured thinking rate.
pub struct MixSampler {
    rng: ChaCha8Rng,
    think_rate: f64,
}

impl MixSampler {
    pub fn new(seed: u64, think_rate: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            think_rate,
        }
    }

    pub fn next_kind(&mut self) -> PromptKind {
        if self.rng.gen::<f64>() < self.think_rate {
            PromptKind::Thinking
        } else {
            PromptKind::Recommend
        }
    }

    /// A kind, then a uniform index into that corpus.
    pub fn next(&mut self, n_rec: usize, n_think: usize) -> (PromptKind, usize) {
        let kind = self.next_kind();
        let n = if kind == PromptKind::Thinking {
            n_think
        } else {
            n_rec
        };
        (kind, self.rng.gen_range(0..n))
    }
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by the order in
/// which tensors are presented each step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        if self.moments.len() <= slot {
            self.moments.resize_with(slot + 1, Default::default);
        }
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..param.len() {
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let step = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            param[k] -= self.lr * (step + self.weight_decay * param[k]);
        }
    }
}

/// What an LM training run may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainScope {
    pub base: bool,
    pub adapter_layers: Vec<bool>,
}

impl TrainScope {
    pub fn everything(n_layers: usize) -> Self {
        Self {
            base: true,
            adapter_layers: vec![true; n_layers],
        }
    }

    /// Adapter weights in the top `k` layers only.
    pub fn last_layers(n_layers: usize, k: usize) -> Self {
        Self {
            base: false,
            adapter_layers: (0..n_layers).map(|l| l + k >= n_layers).collect(),
        }
    }

    fn is_empty(&self) -> bool {
        !self.base && !self.adapter_layers.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub rec: f64,
    pub think: f64,
    pub combined: f64,
    pub think_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tl_rec\tl_think\tcombined\tthink_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
                r.step, r.rec, r.think, r.combined, r.think_fraction
            );
        }
        out
    }
}

fn instance_seed(seed: u64, step: usize, b: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 24) ^ b as u64
}

fn flatten_base(p: &LmParams) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    p.visit(|_, m| out.push(m.data.clone()));
    out
}

fn flatten_adapter(a: &LoraAdapter, layers: &[bool]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    a.visit(|_, l, m| {
        if layers[l] {
            out.push(m.data.clone())
        }
    });
    out
}

fn accumulate(acc: &mut Vec<Vec<f64>>, add: Vec<Vec<f64>>) {
    if acc.is_empty() {
        *acc = add;
    } else {
        for (a, b) in acc.iter_mut().zip(add) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Scales all gradient buffers by `1/batch` and clips the global norm.
fn finish_gradients(groups: &mut [&mut Vec<Vec<f64>>], batch: usize, clip: f64) {
    let inv = 1.0 / batch as f64;
    let mut sq = 0.0;
    for g in groups.iter_mut() {
        for t in g.iter_mut() {
            for v in t.iter_mut() {
                *v *= inv;
                sq += *v * *v;
            }
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in groups.iter_mut() {
            g.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
}

fn check_corpora(
    rec: &[TrainingInstance],
    think: &[TrainingInstance],
    mix: &MixConfig,
) -> Result<()> {
    if mix.rec_rate > 0.0 && rec.is_empty() {
        return Err(Error::Invalid(
            "recommendation corpus is empty but rec_rate > 0".into(),
        ));
    }
    if mix.think_rate > 0.0 && think.is_empty() {
        return Err(Error::Invalid(
            "thinking corpus is empty but think_rate > 0".into(),
        ));
    }
    Ok(())
}

/// Combined loss of one instance and the requested gradients.
pub fn lm_instance_grad(
    params: &LmParams,
    adapter: &LoraAdapter,
    inst: &TrainingInstance,
    loss: &LossConfig,
    features: &dyn FeatureSource,
    mode: Mode,
    request: &GradRequest,
) -> Result<(LossParts, crate::lm::Gradients)> {
    let seq = inst.splice(params, features)?;
    let rows = inst.loss_rows(loss.think_span);
    let amix = AdapterMix::single(adapter);
    let (logits, cache) = forward(params, Some(&amix), &seq, mode, &rows)?;
    let (parts, dlogits) = combined_loss_grad(&logits, inst, loss)?;
    let grads = backward(params, Some(&amix), &seq, &cache, &rows, &dlogits, request)?;
    Ok((parts, grads))
}

/// Trains `params` and/or `adapter` as allowed by `scope` on a mix of
/// recommendation and thinking instances. Parameters outside the scope are
/// never written.
#[allow(clippy::too_many_arguments)]
pub fn train_lm(
    params: &mut LmParams,
    adapter: &mut LoraAdapter,
    rec: &[TrainingInstance],
    think: &[TrainingInstance],
    mix: &MixConfig,
    loss: &LossConfig,
    scope: &TrainScope,
    features: &dyn FeatureSource,
) -> Result<TrainLog> {
    mix.validate()?;
    loss.weights.validate()?;
    check_corpora(rec, think, mix)?;
    if scope.is_empty() {
        return Err(Error::Invalid(
            "nothing to train: empty trainable set".into(),
        ));
    }
    if scope.adapter_layers.len() != params.config.n_layers {
        return Err(Error::Dimension {
            expected: params.config.n_layers,
            got: scope.adapter_layers.len(),
        });
    }
    let request = GradRequest {
        base: scope.base,
        adapter_layers: Some(scope.adapter_layers.clone()),
        inputs: false,
    };
    let mut sampler = MixSampler::new(mix.seed, mix.think_rate);
    let mut opt = AdamW::new(mix.learning_rate, mix.weight_decay);
    let mut log = TrainLog::default();

    for step in 0..mix.steps {
        let mut base_grad: Vec<Vec<f64>> = Vec::new();
        let mut adapter_grad: Vec<Vec<f64>> = Vec::new();
        let mut sums = LossParts::default();
        let mut thinking = 0usize;
        for b in 0..mix.batch_size {
            let (kind, idx) = sampler.next(rec.len(), think.len());
            let inst = if kind == PromptKind::Thinking {
                &think[idx]
            } else {
                &rec[idx]
            };
            thinking += usize::from(kind == PromptKind::Thinking);
            let mode = Mode::Train {
                seed: instance_seed(mix.seed, step, b),
            };
            let (parts, grads) =
                lm_instance_grad(params, adapter, inst, loss, features, mode, &request)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at step {step}")));
            }
            sums.rec += parts.rec;
            sums.think += parts.think;
            sums.total += parts.total;
            if let Some(g) = &grads.base {
                accumulate(&mut base_grad, flatten_base(g));
            }
            accumulate(
                &mut adapter_grad,
                flatten_adapter(&grads.adapters[0], &scope.adapter_layers),
            );
        }
        finish_gradients(
            &mut [&mut base_grad, &mut adapter_grad],
            mix.batch_size,
            mix.grad_clip,
        );

        opt.begin_step();
        let mut slot = 0;
        if scope.base {
            params.visit_mut(|_, m| {
                opt.update(slot, &mut m.data, &base_grad[slot]);
                slot += 1;
            });
        }
        let offset = slot;
        adapter.visit_mut(|_, l, m| {
            if scope.adapter_layers[l] {
                opt.update(slot, &mut m.data, &adapter_grad[slot - offset]);
                slot += 1;
            }
        });
        if !params.is_finite() || !adapter.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after step {step}"
            )));
        }
        let n = mix.batch_size as f64;
        log.rows.push(LogRow {
            step,
            rec: sums.rec / n,
            think: sums.think / n,
            combined: sums.total / n,
            think_fraction: thinking as f64 / n,
        });
    }
    Ok(log)
}

/// Loss and projector gradient for one instance, LM frozen in eval mode.
pub fn projector_instance_grad(
    params: &LmParams,
    mix: &AdapterMix,
    collab: &CollabModel,
    projector: &Projector,
    inst: &TrainingInstance,
    loss: &LossConfig,
) -> Result<(LossParts, Projector)> {
    let mut inputs = Mat::zeros(inst.slots.len(), collab.dim());
    for (k, &(_, slot)) in inst.slots.iter().enumerate() {
        inputs
            .row_mut(k)
            .copy_from_slice(collab_vector(collab, slot)?);
    }
    let (projected, pcache) = projector.forward(&inputs);
    let seq = embed_and_splice(
        params,
        &inst.ids,
        &inst.slots,
        inst.answer_start(),
        |slot| {
            let k = inst
                .slots
                .iter()
                .position(|&(_, s)| s == slot)
                .expect("slot listed");
            Ok(projected.row(k).to_vec())
        },
    )?;
    let rows = inst.loss_rows(loss.think_span);
    let (logits, cache) = forward(params, Some(mix), &seq, Mode::Eval, &rows)?;
    let (parts, dlogits) = combined_loss_grad(&logits, inst, loss)?;
    let mut grad = projector.zeros_like();
    if !inst.slots.is_empty() {
        let request = GradRequest {
            base: false,
            adapter_layers: None,
            inputs: true,
        };
        let grads = backward(params, Some(mix), &seq, &cache, &rows, &dlogits, &request)?;
        let dinput = grads.inputs.expect("input gradient requested");
        let slot_rows: Vec<usize> = inst.slots.iter().map(|&(p, _)| p).collect();
        projector.backward(&pcache, &dinput.gather_rows(&slot_rows), &mut grad);
    }
    Ok((parts, grad))
}

/// Trains only the projector, with the LM and its adapter frozen and run in
/// evaluation mode. Instances must carry feature slots to have any effect.
#[allow(clippy::too_many_arguments)]
pub fn train_projector(
    params: &LmParams,
    adapter: &LoraAdapter,
    collab: &CollabModel,
    projector: &mut Projector,
    rec: &[TrainingInstance],
    think: &[TrainingInstance],
    mix: &MixConfig,
    loss: &LossConfig,
) -> Result<TrainLog> {
    mix.validate()?;
    loss.weights.validate()?;
    check_corpora(rec, think, mix)?;
    if projector.output_dim() != params.config.d_model || projector.input_dim() != collab.dim() {
        return Err(Error::Dimension {
            expected: params.config.d_model,
            got: projector.output_dim(),
        });
    }
    let amix = AdapterMix::single(adapter);
    let mut sampler = MixSampler::new(mix.seed, mix.think_rate);
    let mut opt = AdamW::new(mix.learning_rate, mix.weight_decay);
    let mut log = TrainLog::default();

    for step in 0..mix.steps {
        let mut grad = projector.zeros_like();
        let mut sums = LossParts::default();
        let mut thinking = 0usize;
        for _ in 0..mix.batch_size {
            let (kind, idx) = sampler.next(rec.len(), think.len());
            let inst = if kind == PromptKind::Thinking {
                &think[idx]
            } else {
                &rec[idx]
            };
            thinking += usize::from(kind == PromptKind::Thinking);

            let (parts, g) = projector_instance_grad(params, &amix, collab, projector, inst, loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at step {step}")));
            }
            sums.rec += parts.rec;
            sums.think += parts.think;
            sums.total += parts.total;
            grad.w1.add_assign(&g.w1);
            grad.b1.add_assign(&g.b1);
            grad.w2.add_assign(&g.w2);
            grad.b2.add_assign(&g.b2);
        }
        let mut flat = Vec::new();
        grad.visit(|_, m| flat.push(m.data.clone()));
        finish_gradients(&mut [&mut flat], mix.batch_size, mix.grad_clip);
        opt.begin_step();
        let mut slot = 0;
        projector.visit_mut(|_, m| {
            opt.update(slot, &mut m.data, &flat[slot]);
            slot += 1;
        });
        if !projector.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite projector after step {step}"
            )));
        }
        let n = mix.batch_size as f64;
        log.rows.push(LogRow {
            step,
            rec: sums.rec / n,
            think: sums.think / n,
            combined: sums.total / n,
            think_fraction: thinking as f64 / n,
        });
    }
    Ok(log)
}

/// `Yes` probability for each instance, read at its first answer position.
pub fn score_instances(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    instances: &[TrainingInstance],
    features: &dyn FeatureSource,
    rule: ScoreRule,
) -> Result<Vec<f64>> {
    instances
        .iter()
        .map(|inst| {
            let seq = inst.splice(params, features)?;
            let (logits, _) = forward(params, mix, &seq, Mode::Eval, &[inst.answer_start() - 1])?;
            Ok(rule.apply(logits.values.row(0)))
        })
        .collect()
}

/// Prompt part of an instance, ready for scoring or generation.
pub fn prompt_only(inst: &TrainingInstance) -> TrainingInstance {
    let start = inst.answer_start();
    TrainingInstance {
        ids: inst.ids[..start].to_vec(),
        slots: inst.slots.clone(),
        pos: 0,
        ..inst.clone()
    }
}
