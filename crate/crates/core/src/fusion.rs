//! User grouping, expert representations, participation weights, the
//! entropy/concentration gate and adapter fusion.
//!
//! Experts are indexed from 0.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collab::UserEmbedder;
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, dot, norm, softmax_in_place, Mat};
use crate::lm::{AdapterMix, LoraAdapter};

pub const MAX_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct UserGroups {
    pub assignment: Vec<usize>,
    pub centroids: Mat,
}

impl UserGroups {
    pub fn group_count(&self) -> usize {
        self.centroids.rows
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&u| self.assignment[u] == group).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means with k-means++ seeding and at most [`MAX_KMEANS_ITERS`] Lloyd
/// rounds. A cluster left empty takes the point farthest from its centroid
/// among clusters with more than one member.
pub fn cluster_users(embeddings: &Mat, n_groups: usize, seed: u64) -> Result<UserGroups> {
    let n = embeddings.rows;
    if n_groups == 0 {
        return Err(Error::Invalid("group count must be at least 1".into()));
    }
    if n_groups > n {
        return Err(Error::Invalid(format!("{n_groups} groups requested for {n} users")));
    }
    let d = embeddings.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Mat::zeros(n_groups, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(embeddings.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(embeddings.row(i), centroids.row(0))).collect();
    for c in 1..n_groups {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(embeddings.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(embeddings.row(i), centroids.row(c)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_KMEANS_ITERS {
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest(embeddings.row(i), &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        repair_empty(embeddings, &mut assignment, &mut centroids);
        let updated = recompute_centroids(embeddings, &assignment, n_groups);
        let moved = updated != centroids;
        centroids = updated;
        if !changed && !moved {
            break;
        }
    }
    Ok(UserGroups { assignment, centroids })
}

fn repair_empty(embeddings: &Mat, assignment: &mut [usize], centroids: &mut Mat) {
    let k = centroids.rows;
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(embeddings.row(a), centroids.row(assignment[a]));
                let db = sq_dist(embeddings.row(b), centroids.row(assignment[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("more users than groups");
        assignment[far] = empty;
        centroids.row_mut(empty).copy_from_slice(embeddings.row(far));
    }
}

fn recompute_centroids(embeddings: &Mat, assignment: &[usize], k: usize) -> Mat {
    let d = embeddings.cols;
    let mut out = Mat::zeros(k, d);
    for c in 0..k {
        let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == c).collect();
        let row = out.row_mut(c);
        for (j, v) in row.iter_mut().enumerate() {
            *v = compensated_sum(members.iter().map(|&i| embeddings.at(i, j))) / members.len() as f64;
        }
    }
    out
}

/// Mean user embedding of each group.
pub fn expert_representation(groups: &UserGroups, collab: &dyn UserEmbedder) -> Result<Vec<Vec<f64>>> {
    (0..groups.group_count())
        .map(|g| {
            let members = groups.members(g);
            if members.is_empty() {
                return Err(Error::Invalid(format!("group {g} is empty")));
            }
            let vectors = members.iter().map(|&u| collab.user_embedding(u)).collect::<Result<Vec<_>>>()?;
            Ok((0..collab.dim())
                .map(|j| compensated_sum(vectors.iter().map(|v| v[j])) / members.len() as f64)
                .collect())
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `softmax(cos(e_u, e_n) / τ)` over experts.
pub fn participation(user: &[f64], representations: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let mut w = representations
        .iter()
        .map(|r| {
            if r.len() != user.len() {
                return Err(Error::Dimension { expected: user.len(), got: r.len() });
            }
            Ok(cosine(user, r)? / tau)
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_in_place(&mut w);
    Ok(w)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `Σ w_n s B_n A_n`
    #[default]
    DeltaSum,
    /// `s (Σ w_n B_n)(Σ w_n A_n)`
    FactorSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub tau: f64,
    pub entropy_factor: f64,
    pub conc_base: f64,
    pub conc_slope: f64,
    pub fusion: FusionMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau: 0.1, entropy_factor: 0.95, conc_base: 0.5, conc_slope: 0.6, fusion: FusionMode::DeltaSum }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionDecision {
    Global,
    Single(usize),
    Fused(Vec<f64>),
}

impl fmt::Display for FusionDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionDecision::Global => write!(f, "global"),
            FusionDecision::Single(n) => write!(f, "single({n})"),
            FusionDecision::Fused(_) => write!(f, "fused"),
        }
    }
}

/// `−Σ w ln w` with `0·ln 0 = 0`.
pub fn entropy(w: &[f64]) -> f64 {
    -compensated_sum(w.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()))
}

/// Near-uniform weights go to the global adapter; a dominant expert serves
/// alone; anything else is fused. The entropy check runs first.
pub fn gate(w: &[f64], cfg: &GateConfig) -> FusionDecision {
    let n = w.len() as f64;
    if entropy(w) > cfg.entropy_factor * n.ln() {
        return FusionDecision::Global;
    }
    let (arg, max) = w
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(i, m), (j, &v)| if v > m { (j, v) } else { (i, m) });
    if max > cfg.conc_base + cfg.conc_slope / n {
        FusionDecision::Single(arg)
    } else {
        FusionDecision::Fused(w.to_vec())
    }
}

/// One adapter whose factors are the weighted sums of the experts' factors.
pub fn factor_sum(adapters: &[&LoraAdapter], w: &[f64]) -> Result<LoraAdapter> {
    if adapters.is_empty() || adapters.len() != w.len() {
        return Err(Error::Invalid("fusion weights and adapters differ in length".into()));
    }
    if adapters.iter().any(|a| !a.same_structure(adapters[0])) {
        return Err(Error::Invalid("fused adapters are not structurally identical".into()));
    }
    let mut out = adapters[0].zeros_like();
    for (a, &wn) in adapters.iter().zip(w) {
        let mut mats = Vec::new();
        a.visit(|_, _, m| mats.push(m.data.clone()));
        let mut k = 0;
        out.visit_mut(|_, _, m| {
            m.data.iter_mut().zip(&mats[k]).for_each(|(o, v)| *o += wn * v);
            k += 1;
        });
    }
    Ok(out)
}

/// The adapter(s) serving one request.
pub enum Served<'a> {
    Mix(AdapterMix<'a>),
    Owned(LoraAdapter),
}

impl Served<'_> {
    pub fn mix(&self) -> AdapterMix<'_> {
        match self {
            Served::Mix(m) => m.clone(),
            Served::Owned(a) => AdapterMix::single(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    pub global: LoraAdapter,
    pub experts: Vec<LoraAdapter>,
    pub representations: Vec<Vec<f64>>,
}

impl ExpertSet {
    pub fn validate(&self) -> Result<()> {
        if self.experts.len() != self.representations.len() || self.experts.is_empty() {
            return Err(Error::Invalid("expert and representation counts differ".into()));
        }
        if self.experts.iter().any(|e| !e.same_structure(&self.global)) {
            return Err(Error::Invalid("experts are not structurally identical to the global adapter".into()));
        }
        Ok(())
    }

    pub fn serve(&self, decision: &FusionDecision, mode: FusionMode) -> Result<Served<'_>> {
        Ok(match decision {
            FusionDecision::Global => Served::Mix(AdapterMix::single(&self.global)),
            FusionDecision::Single(n) => Served::Mix(AdapterMix::single(
                self.experts.get(*n).ok_or(Error::UnknownId { kind: "expert", id: *n })?,
            )),
            FusionDecision::Fused(w) => {
                let refs: Vec<&LoraAdapter> = self.experts.iter().collect();
                match mode {
                    FusionMode::DeltaSum => Served::Mix(AdapterMix::weighted(w, &refs)?),
                    FusionMode::FactorSum => Served::Owned(factor_sum(&refs, w)?),
                }
            }
        })
    }
}

/// Gate outcome for one user, with the numbers behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub user_id: usize,
    pub decision: FusionDecision,
    pub weights: Vec<f64>,
    pub entropy: f64,
    pub cold_start: bool,
}

/// Participation, gate and routing for `user_id`. Users without an
/// embedding go to the global adapter.
pub fn select_for_user(user_id: usize, set: &ExpertSet, collab: &dyn UserEmbedder, cfg: &GateConfig) -> Result<Selection> {
    let Ok(embedding) = collab.user_embedding(user_id) else {
        log::warn!("user {user_id} has no collaborative embedding; serving the global adapter");
        return Ok(Selection { user_id, decision: FusionDecision::Global, weights: Vec::new(), entropy: f64::NAN, cold_start: true });
    };
    let weights = participation(embedding, &set.representations, cfg.tau)?;
    Ok(Selection { user_id, decision: gate(&weights, cfg), entropy: entropy(&weights), weights, cold_start: false })
}

pub fn decision_log_tsv(selections: &[Selection]) -> String {
    let mut out = String::from("user\tentropy\tmax_w\tbranch\tweights\n");
    for s in selections {
        let max = s.weights.iter().copied().fold(f64::NAN, f64::max);
        let weights: Vec<String> = s.weights.iter().map(|w| format!("{w:.6}")).collect();
        let branch = if s.cold_start { "global(cold)".to_string() } else { s.decision.to_string() };
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}\t{}", s.user_id, s.entropy, max, branch, weights.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::CollabModel;
    use crate::lm::{forward, LmConfig, LmParams, LoraConfig, Mode, SplicedSequence};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    struct Fixed(Vec<Vec<f64>>);

    impl UserEmbedder for Fixed {
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn user_embedding(&self, u: usize) -> Result<&[f64]> {
            self.0.get(u).map(|v| v.as_slice()).ok_or(Error::UnknownId { kind: "user", id: u })
        }
        fn user_count(&self) -> usize {
            self.0.len()
        }
    }

    #[test]
    fn gate_fixtures() {
        let cfg = GateConfig::default();
        assert_eq!(gate(&[1.0 / 3.0; 3], &cfg), FusionDecision::Global);
        assert_eq!(gate(&[0.8, 0.1, 0.1], &cfg), FusionDecision::Single(0));
        assert_eq!(gate(&[0.55, 0.35, 0.10], &cfg), FusionDecision::Fused(vec![0.55, 0.35, 0.10]));
        // One expert: both conditions fail, fusion over one is that expert.
        assert_eq!(gate(&[1.0], &cfg), FusionDecision::Fused(vec![1.0]));
        assert_eq!(gate(&[0.45, 0.45, 0.1], &cfg), FusionDecision::Fused(vec![0.45, 0.45, 0.1]));
    }

    #[test]
    fn gate_is_log_base_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GateConfig::default();
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let h2 = -w.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
            let global2 = h2 > cfg.entropy_factor * (n as f64).log2();
            assert_eq!(global2, gate(&w, &cfg) == FusionDecision::Global);
        }
    }

    #[test]
    fn participation_examples() {
        let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let w = participation(&[3.0, 0.0], &reps, 0.1).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((w[0] - 0.99995).abs() < 1e-5);
        let same = participation(&[0.3, 0.2], &vec![vec![1.0, 1.0]; 4], 0.1).unwrap();
        assert!(same.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(participation(&[0.0, 0.0], &reps, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn participation_properties(
            user in prop::collection::vec(-1.0f64..1.0, 4),
            reps in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..5),
            scale in 0.01f64..100.0,
            tau in 0.01f64..2.0,
        ) {
            prop_assume!(norm(&user) > 1e-3 && reps.iter().all(|r| norm(r) > 1e-3));
            let w = participation(&user, &reps, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let scaled: Vec<f64> = user.iter().map(|v| v * scale).collect();
            let ws = participation(&scaled, &reps, tau).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mut rev = reps.clone();
            rev.reverse();
            let wr = participation(&user, &rev, tau).unwrap();
            for (a, b) in w.iter().zip(wr.iter().rev()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let sharper = participation(&user, &reps, tau / 2.0).unwrap();
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            prop_assert!(max(&sharper) >= max(&w) - 1e-12);
        }
    }

    #[test]
    fn representation_is_group_mean() {
        let users = Fixed(vec![
            vec![1.0, 2.0],
            vec![3.0, -1.0],
            vec![-1.0, -2.0],
            vec![0.5, 0.25],
            vec![2.0, 2.0],
        ]);
        let groups = UserGroups { assignment: vec![0, 0, 0, 1, 2], centroids: Mat::zeros(3, 2) };
        let reps = expert_representation(&groups, &users).unwrap();
        assert!((reps[0][0] - 1.0).abs() < 1e-12 && (reps[0][1] + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(reps[1], vec![0.5, 0.25]);
        let sym = Fixed(vec![vec![1.5, -2.0], vec![-1.5, 2.0]]);
        let one = UserGroups { assignment: vec![0, 0], centroids: Mat::zeros(1, 2) };
        assert_eq!(expert_representation(&one, &sym).unwrap()[0], vec![0.0, 0.0]);
        let empty = UserGroups { assignment: vec![0, 0], centroids: Mat::zeros(2, 2) };
        assert!(expert_representation(&empty, &sym).is_err());
    }

    fn blobs(n: usize, seed: u64) -> (Mat, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let blob = i % 2;
            let center = if blob == 0 { -5.0 } else { 5.0 };
            data.extend((0..3).map(|_| center + normal.sample(&mut rng)));
            truth.push(blob);
        }
        (Mat::from_vec(n, 3, data), truth)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (x, truth) = blobs(400, 1);
        let g = cluster_users(&x, 2, 9).unwrap();
        let agree = g.assignment.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let agree = agree.max(400 - agree);
        assert!(agree as f64 >= 0.99 * 400.0);
        assert_eq!(g, cluster_users(&x, 2, 9).unwrap());
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let (x, _) = blobs(10, 2);
        let one = cluster_users(&x, 1, 0).unwrap();
        assert!(one.assignment.iter().all(|&a| a == 0));
        for j in 0..3 {
            let mean = (0..10).map(|i| x.at(i, j)).sum::<f64>() / 10.0;
            assert!((one.centroids.at(0, j) - mean).abs() < 1e-12);
        }
        assert!(cluster_users(&x, 11, 0).is_err());
        // Duplicated points force empty clusters that must be repaired.
        let dup = Mat::from_vec(4, 1, vec![1.0, 1.0, 1.0, 5.0]);
        let g = cluster_users(&dup, 3, 0).unwrap();
        for c in 0..3 {
            assert!(!g.members(c).is_empty());
        }
    }

    fn lm() -> (LmParams, Vec<LoraAdapter>) {
        let cfg = LmConfig { d_model: 8, n_layers: 2, n_heads: 2, context_len: 16, vocab_size: 20, mlp_ratio: 2, tie_embeddings: false, seed: 1 };
        let params = LmParams::init(&cfg).unwrap();
        let adapters = (0..3)
            .map(|k| {
                let mut a = LoraAdapter::init(&cfg, LoraConfig { rank: 2, alpha: 4.0, dropout: 0.05 }, 10 + k).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
                a.visit_mut(|_, _, m| m.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3)));
                a
            })
            .collect();
        (params, adapters)
    }

    fn seq(params: &LmParams, seed: u64) -> SplicedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(2..10);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(7..20)).collect();
        crate::lm::embed_and_splice(params, &ids, &[], len, |_| unreachable!()).unwrap()
    }

    #[test]
    fn one_hot_fusion_is_bit_identical_to_single_expert() {
        let (params, adapters) = lm();
        let set = ExpertSet { global: adapters[0].clone(), experts: adapters.clone(), representations: vec![vec![1.0]; 3] };
        for s in 0..20 {
            let x = seq(&params, s);
            let rows: Vec<usize> = (0..x.len()).collect();
            let served = set.serve(&FusionDecision::Fused(vec![0.0, 1.0, 0.0]), FusionMode::DeltaSum).unwrap();
            let (fused, _) = forward(&params, Some(&served.mix()), &x, Mode::Eval, &rows).unwrap();
            let (single, _) = forward(&params, Some(&AdapterMix::single(&adapters[1])), &x, Mode::Eval, &rows).unwrap();
            assert_eq!(fused.values, single.values);
        }
    }

    #[test]
    fn half_half_fusion_matches_averaged_merged_delta() {
        let (params, adapters) = lm();
        let m0 = adapters[0].merge_into(&params);
        let m1 = adapters[1].merge_into(&params);
        let mut averaged = params.clone();
        let (mut a, mut b, mut base) = (Vec::new(), Vec::new(), Vec::new());
        m0.visit(|_, m| a.push(m.data.clone()));
        m1.visit(|_, m| b.push(m.data.clone()));
        params.visit(|_, m| base.push(m.data.clone()));
        let mut k = 0;
        averaged.visit_mut(|_, m| {
            for i in 0..m.data.len() {
                m.data[i] = base[k][i] + 0.5 * (a[k][i] - base[k][i]) + 0.5 * (b[k][i] - base[k][i]);
            }
            k += 1;
        });
        let mix = AdapterMix::weighted(&[0.5, 0.5], &[&adapters[0], &adapters[1]]).unwrap();
        for s in 0..10 {
            let x = seq(&params, s);
            let rows: Vec<usize> = (0..x.len()).collect();
            let (fused, _) = forward(&params, Some(&mix), &x, Mode::Eval, &rows).unwrap();
            let (reference, _) = forward(&averaged, None, &x, Mode::Eval, &rows).unwrap();
            assert!(fused.values.max_abs_diff(&reference.values) <= 1e-6);
        }
    }

    #[test]
    fn identical_experts_fuse_to_themselves() {
        let (params, adapters) = lm();
        let same = [&adapters[2], &adapters[2], &adapters[2]];
        let mix = AdapterMix::weighted(&[0.2, 0.3, 0.5], &same).unwrap();
        let x = seq(&params, 3);
        let rows: Vec<usize> = (0..x.len()).collect();
        let (fused, _) = forward(&params, Some(&mix), &x, Mode::Eval, &rows).unwrap();
        let (single, _) = forward(&params, Some(&AdapterMix::single(&adapters[2])), &x, Mode::Eval, &rows).unwrap();
        assert!(fused.values.max_abs_diff(&single.values) <= 1e-12);
        let factor = factor_sum(&same, &[0.2, 0.3, 0.5]).unwrap();
        let (f, _) = forward(&params, Some(&AdapterMix::single(&factor)), &x, Mode::Eval, &rows).unwrap();
        assert!(f.values.max_abs_diff(&single.values) <= 1e-12);
    }

    #[test]
    fn fused_delta_is_bounded_by_the_largest_expert_delta() {
        let (_, adapters) = lm();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let delta = |a: &LoraAdapter, x: &[f64]| -> Vec<f64> {
            let pair = &a.layers[0].q;
            let xm = Mat::from_vec(1, x.len(), x.to_vec());
            let z = crate::linalg::matmul_nt(&xm, &pair.a);
            let mut y = crate::linalg::matmul_nt(&z, &pair.b);
            y.scale(a.scaling());
            y.data
        };
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let deltas: Vec<Vec<f64>> = adapters.iter().map(|a| delta(a, &x)).collect();
            let fused: Vec<f64> = (0..8).map(|j| (0..3).map(|n| w[n] * deltas[n][j]).sum()).collect();
            let max = deltas.iter().map(|d| norm(d)).fold(0.0, f64::max);
            assert!(norm(&fused) <= max + 1e-12);
        }
    }

    #[test]
    fn selection_routes_users() {
        let (_, adapters) = lm();
        let set = ExpertSet {
            global: adapters[0].clone(),
            experts: vec![adapters[1].clone(), adapters[2].clone()],
            representations: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        set.validate().unwrap();
        let users = Fixed(vec![vec![2.0, 0.0], vec![1.0, 1.0]]);
        let cfg = GateConfig { tau: 0.01, ..Default::default() };
        let at_centroid = select_for_user(0, &set, &users, &cfg).unwrap();
        assert_eq!(at_centroid.decision, FusionDecision::Single(0));
        let between = select_for_user(1, &set, &users, &cfg).unwrap();
        assert_eq!(between.decision, FusionDecision::Global);
        let cold = select_for_user(7, &set, &users, &cfg).unwrap();
        assert!(cold.cold_start);
        assert_eq!(cold.decision, FusionDecision::Global);
        assert_eq!(select_for_user(0, &set, &users, &cfg).unwrap(), at_centroid);
        let log = decision_log_tsv(&[at_centroid, cold]);
        assert!(log.lines().nth(1).unwrap().contains("single(0)"));
        assert!(log.contains("global(cold)"));
    }

    #[test]
    fn mf_model_plugs_in_as_embedder() {
        let collab = CollabModel::init(4, 3, 5, 2);
        let groups = cluster_users(&collab.user_vectors, 2, 1).unwrap();
        let reps = expert_representation(&groups, &collab).unwrap();
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[0].len(), 5);
    }
}
