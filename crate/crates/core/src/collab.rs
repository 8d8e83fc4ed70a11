//! Matrix-factorization collaborative encoder trained with BCE on binary
//! labels. Its user and item rows are the collaborative embeddings used for
//! grouping, gating and projection into the language model.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softplus, Mat};

/// Anything that can hand out a fixed-size user embedding.
pub trait UserEmbedder {
    fn dim(&self) -> usize;
    fn user_embedding(&self, user_id: usize) -> Result<&[f64]>;
    fn user_count(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabModel {
    pub user_vectors: Mat,
    pub item_vectors: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CollabTrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for CollabTrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 256,
            seed: 42,
            optimizer: Optimizer::Adam,
        }
    }
}

impl CollabModel {
    /// Uniform init in `[-0.1/√d, 0.1/√d]`.
    pub fn init(users: usize, items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.1 / (dim as f64).sqrt();
        Self {
            user_vectors: Mat::uniform(users, dim, bound, &mut rng),
            item_vectors: Mat::uniform(items, dim, bound, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.user_vectors.cols
    }

    pub fn embed_user(&self, user_id: usize) -> Result<&[f64]> {
        if user_id >= self.user_vectors.rows {
            return Err(Error::UnknownId {
                kind: "user",
                id: user_id,
            });
        }
        Ok(self.user_vectors.row(user_id))
    }

    pub fn embed_item(&self, item_id: usize) -> Result<&[f64]> {
        if item_id >= self.item_vectors.rows {
            return Err(Error::UnknownId {
                kind: "item",
                id: item_id,
            });
        }
        Ok(self.item_vectors.row(item_id))
    }

    /// `σ(e_u · e_i)`
    pub fn score(&self, user_id: usize, item_id: usize) -> Result<f64> {
        Ok(score_vectors(
            self.embed_user(user_id)?,
            self.embed_item(item_id)?,
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.user_vectors.is_finite() && self.item_vectors.is_finite()
    }
}

impl UserEmbedder for CollabModel {
    fn dim(&self) -> usize {
        CollabModel::dim(self)
    }

    fn user_embedding(&self, user_id: usize) -> Result<&[f64]> {
        self.embed_user(user_id)
    }

    fn user_count(&self) -> usize {
        self.user_vectors.rows
    }
}

pub fn score_vectors(user: &[f64], item: &[f64]) -> f64 {
    sigmoid(dot(user, item))
}

/// Per-example objective: `BCE(σ(u·i), label) + wd/2 · (‖u‖² + ‖i‖²)`.
pub fn example_loss(user: &[f64], item: &[f64], label: u8, weight_decay: f64) -> f64 {
    let z = dot(user, item);
    let bce = if label == 1 {
        softplus(-z)
    } else {
        softplus(z)
    };
    bce + 0.5 * weight_decay * (dot(user, user) + dot(item, item))
}

/// Gradients of [`example_loss`] w.r.t. the user and item vectors:
/// `(σ(u·i) − l)·i + wd·u` and `(σ(u·i) − l)·u + wd·i`.
pub fn example_grad(
    user: &[f64],
    item: &[f64],
    label: u8,
    weight_decay: f64,
) -> (Vec<f64>, Vec<f64>) {
    let err = sigmoid(dot(user, item)) - f64::from(label);
    let gu = user
        .iter()
        .zip(item)
        .map(|(u, i)| err * i + weight_decay * u)
        .collect();
    let gi = user
        .iter()
        .zip(item)
        .map(|(u, i)| err * u + weight_decay * i)
        .collect();
    (gu, gi)
}

/// Mean per-example objective over `data`.
pub fn objective(model: &CollabModel, data: &Dataset, weight_decay: f64) -> Result<f64> {
    let mut total = 0.0;
    for it in &data.interactions {
        total += example_loss(
            model.embed_user(it.user_id)?,
            model.embed_item(it.item_id)?,
            it.label,
            weight_decay,
        );
    }
    Ok(total / data.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabReport {
    /// Full-data objective after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Row-sparse optimizer state: only rows touched by a batch are updated.
struct RowOptimizer {
    kind: Optimizer,
    lr: f64,
    m: Mat,
    v: Mat,
    steps: Vec<u32>,
}

impl RowOptimizer {
    fn new(kind: Optimizer, lr: f64, rows: usize, cols: usize) -> Self {
        Self {
            kind,
            lr,
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            steps: vec![0; rows],
        }
    }

    fn apply(&mut self, params: &mut Mat, row: usize, grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.row_mut(row).iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Adam => {
                self.steps[row] += 1;
                let t = self.steps[row] as i32;
                let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
                let m = self.m.row_mut(row);
                let v = self.v.row_mut(row);
                let p = params.row_mut(row);
                for k in 0..grad.len() {
                    m[k] = B1 * m[k] + (1.0 - B1) * grad[k];
                    v[k] = B2 * v[k] + (1.0 - B2) * grad[k] * grad[k];
                    p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

struct Trainer {
    user_opt: RowOptimizer,
    item_opt: RowOptimizer,
    weight_decay: f64,
}

impl Trainer {
    fn new(model: &CollabModel, config: &CollabTrainConfig) -> Self {
        let d = model.dim();
        Self {
            user_opt: RowOptimizer::new(
                config.optimizer,
                config.learning_rate,
                model.user_vectors.rows,
                d,
            ),
            item_opt: RowOptimizer::new(
                config.optimizer,
                config.learning_rate,
                model.item_vectors.rows,
                d,
            ),
            weight_decay: config.weight_decay,
        }
    }

    /// One optimizer step on the batch-mean objective.
    fn step(&mut self, model: &mut CollabModel, batch: &[(usize, usize, u8)]) -> f64 {
        let d = model.dim();
        let scale = 1.0 / batch.len() as f64;
        let mut user_grads: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        let mut item_grads: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        let mut loss = 0.0;
        for &(u, i, l) in batch {
            let (uv, iv) = (model.user_vectors.row(u), model.item_vectors.row(i));
            loss += example_loss(uv, iv, l, self.weight_decay) * scale;
            let (gu, gi) = example_grad(uv, iv, l, self.weight_decay);
            let acc = user_grads.entry(u).or_insert_with(|| vec![0.0; d]);
            acc.iter_mut().zip(&gu).for_each(|(a, g)| *a += g * scale);
            let acc = item_grads.entry(i).or_insert_with(|| vec![0.0; d]);
            acc.iter_mut().zip(&gi).for_each(|(a, g)| *a += g * scale);
        }
        for (u, g) in &user_grads {
            self.user_opt.apply(&mut model.user_vectors, *u, g);
        }
        for (i, g) in &item_grads {
            self.item_opt.apply(&mut model.item_vectors, *i, g);
        }
        loss
    }
}

/// Applies a single optimizer step on one `(user, item, label)` example.
pub fn single_step(
    model: &mut CollabModel,
    config: &CollabTrainConfig,
    user: usize,
    item: usize,
    label: u8,
) -> Result<f64> {
    model.embed_user(user)?;
    model.embed_item(item)?;
    let mut trainer = Trainer::new(model, config);
    Ok(trainer.step(model, &[(user, item, label)]))
}

/// Trains on every interaction of `train`, shuffling each epoch with the
/// configured seed.
pub fn train_mf(
    train: &Dataset,
    config: &CollabTrainConfig,
) -> Result<(CollabModel, CollabReport)> {
    if train.is_empty() {
        return Err(Error::Invalid("collaborative training set is empty".into()));
    }
    if config.dim == 0 || config.learning_rate <= 0.0 || config.batch_size == 0 {
        return Err(Error::Config(
            "collab dim, learning_rate and batch_size must be positive".into(),
        ));
    }
    let users_seen: BTreeSet<usize> = train.interactions.iter().map(|i| i.user_id).collect();
    if users_seen.len() < train.user_count() {
        log::warn!(
            "{} users have no training events; their vectors stay at initialization",
            train.user_count() - users_seen.len()
        );
    }
    let mut model = CollabModel::init(
        train.user_count(),
        train.item_count(),
        config.dim,
        config.seed,
    );
    let mut trainer = Trainer::new(&model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c011ab);
    let mut examples: Vec<(usize, usize, u8)> = train
        .interactions
        .iter()
        .map(|i| (i.user_id, i.item_id, i.label))
        .collect();
    let mut report = CollabReport {
        epoch_loss: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        examples.shuffle(&mut rng);
        for batch in examples.chunks(config.batch_size) {
            let loss = trainer.step(&mut model, batch);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "collaborative loss became {loss} in epoch {epoch}"
                )));
            }
        }
        let loss = objective(&model, train, config.weight_decay)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence(format!(
                "collaborative objective became {loss} after epoch {epoch}"
            )));
        }
        log::debug!("collab epoch {epoch}: objective {loss:.6}");
        report.epoch_loss.push(loss);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::dataset::{Dataset, Interaction};

    fn toy(events: &[(usize, usize, u8)], users: usize, items: usize) -> Dataset {
        let mut base = crate::dataset::fixtures::dataset(users, items, &[]);
        base.interactions = events
            .iter()
            .enumerate()
            .map(|(t, &(u, i, l))| Interaction {
                user_id: u,
                item_id: i,
                rating: l as f64,
                label: l,
                timestamp: t as i64,
            })
            .collect();
        base.with_interactions(base.interactions.clone())
    }

    fn separable() -> Dataset {
        toy(&[(0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)], 2, 2)
    }

    #[test]
    fn score_reference_values() {
        let mut m = CollabModel::init(2, 2, 3, 0);
        m.user_vectors = Mat::zeros(2, 3);
        assert_eq!(m.score(0, 0).unwrap(), 0.5);
        m.user_vectors = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        m.item_vectors = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((m.score(0, 0).unwrap() - 0.731_058_578_630_005).abs() < 1e-12);
        assert!((m.score(1, 0).unwrap() - 0.268_941_421_369_995).abs() < 1e-12);
        assert!(m.score(2, 0).is_err());
        assert!(m.embed_item(5).is_err());
        assert_eq!(m.embed_user(0).unwrap(), m.embed_user(0).unwrap());
    }

    #[test]
    fn score_is_symmetric_in_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(score_vectors(&a, &b), score_vectors(&b, &a));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wd = 1e-2;
        for label in [0u8, 1] {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let i: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (gu, gi) = example_grad(&u, &i, label, wd);
            let h = 1e-6;
            for k in 0..6 {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[k] += h;
                dn[k] -= h;
                let num = (example_loss(&up, &i, label, wd) - example_loss(&dn, &i, label, wd))
                    / (2.0 * h);
                assert!((num - gu[k]).abs() <= 1e-4 * num.abs().max(gu[k].abs()).max(1e-6));
                let (mut ip, mut idn) = (i.clone(), i.clone());
                ip[k] += h;
                idn[k] -= h;
                let num = (example_loss(&u, &ip, label, wd) - example_loss(&u, &idn, label, wd))
                    / (2.0 * h);
                assert!((num - gi[k]).abs() <= 1e-4 * num.abs().max(gi[k].abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn separable_toy_is_learned_monotonically() {
        let cfg = CollabTrainConfig {
            dim: 4,
            learning_rate: 0.5,
            weight_decay: 0.0,
            epochs: 400,
            batch_size: 4,
            seed: 1,
            optimizer: Optimizer::Sgd,
        };
        let (model, report) = train_mf(&separable(), &cfg).unwrap();
        assert!(
            *report.epoch_loss.last().unwrap() < 0.1,
            "{:?}",
            report.epoch_loss.last()
        );
        for w in report.epoch_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(model.score(0, 0).unwrap() > 0.5 && model.score(0, 1).unwrap() < 0.5);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CollabTrainConfig {
            dim: 8,
            epochs: 5,
            batch_size: 2,
            ..Default::default()
        };
        let a = train_mf(&separable(), &cfg).unwrap();
        let b = train_mf(&separable(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_touches_only_its_rows() {
        let cfg = CollabTrainConfig {
            dim: 4,
            ..Default::default()
        };
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let cfg = CollabTrainConfig {
                optimizer: opt,
                ..cfg.clone()
            };
            let before = CollabModel::init(5, 4, 4, 7);
            let mut after = before.clone();
            single_step(&mut after, &cfg, 2, 1, 1).unwrap();
            for u in 0..5 {
                assert_eq!(
                    before.user_vectors.row(u) == after.user_vectors.row(u),
                    u != 2
                );
            }
            for i in 0..4 {
                assert_eq!(
                    before.item_vectors.row(i) == after.item_vectors.row(i),
                    i != 1
                );
            }
        }
    }

    #[test]
    fn planted_rank8_factors_generalize() {
        let (users, items, d) = (200, 120, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let uf: Vec<Vec<f64>> = (0..users)
            .map(|_| (0..d).map(|_| normal()).collect())
            .collect();
        let vf: Vec<Vec<f64>> = (0..items)
            .map(|_| (0..d).map(|_| normal()).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for u in 0..users {
            for i in 0..items {
                if rng.gen_bool(0.6) {
                    let label = u8::from(dot(&uf[u], &vf[i]) > 0.0);
                    if rng.gen_bool(0.8) {
                        train.push((u, i, label))
                    } else {
                        held.push((u, i, label))
                    }
                }
            }
        }
        let cfg = CollabTrainConfig {
            dim: 16,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 64,
            seed: 3,
            optimizer: Optimizer::Adam,
        };
        let (model, _) = train_mf(&toy(&train, users, items), &cfg).unwrap();
        let scored: Vec<(f64, u8)> = held
            .iter()
            .map(|&(u, i, l)| (model.score(u, i).unwrap(), l))
            .collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for &(sp, lp) in &scored {
            if lp != 1 {
                continue;
            }
            for &(sn, ln) in &scored {
                if ln != 0 {
                    continue;
                }
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let auc = wins / pairs;
        assert!(auc >= 0.9, "held-out AUC {auc}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let ds = toy(&[], 1, 1);
        assert!(train_mf(&ds, &CollabTrainConfig::default()).is_err());
    }
}
