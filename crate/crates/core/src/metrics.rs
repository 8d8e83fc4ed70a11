//! Ranking metrics and a stem-matching METEOR.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub user_id: usize,
    pub item_id: usize,
    pub score: f64,
    pub label: u8,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let p = order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as u128;
        twice_rank_sum += p * twice_avg;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

fn by_user(entries: &[Scored]) -> BTreeMap<usize, Vec<Scored>> {
    let mut users: BTreeMap<usize, Vec<Scored>> = BTreeMap::new();
    for e in entries {
        users.entry(e.user_id).or_default().push(*e);
    }
    users
}

/// Mean per-user AUC over users with both classes, and the number of users
/// skipped for having only one.
pub fn uauc(entries: &[Scored]) -> Result<(f64, usize)> {
    let mut values = Vec::new();
    let mut skipped = 0;
    for list in by_user(entries).values() {
        let scores: Vec<f64> = list.iter().map(|e| e.score).collect();
        let labels: Vec<u8> = list.iter().map(|e| e.label).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == labels.len() {
            skipped += 1;
            continue;
        }
        values.push(auc(&scores, &labels)?);
    }
    if values.is_empty() {
        return Err(Error::Invalid("no user has both classes".into()));
    }
    Ok((compensated_sum(values.iter().copied()) / values.len() as f64, skipped))
}

/// Labels ordered by descending score, ties by ascending item id.
pub fn ranked_labels(list: &[Scored]) -> Vec<u8> {
    let mut sorted = list.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    sorted.iter().map(|e| e.label).collect()
}

fn dcg(labels: &[u8], k: usize) -> f64 {
    compensated_sum(
        labels
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &l)| (2f64.powi(l as i32) - 1.0) / ((r + 2) as f64).log2()),
    )
}

/// NDCG@k of one ranked label list; 0 when there are no positives.
pub fn ndcg_at_k(ranked: &[u8], k: usize) -> f64 {
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(ranked, k) / idcg
}

/// Average precision truncated at k, normalised by `min(k, positives)`.
pub fn map_at_k(ranked: &[u8], k: usize) -> f64 {
    let positives = ranked.iter().filter(|&&l| l == 1).count();
    if positives == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &l) in ranked.iter().take(k).enumerate() {
        if l == 1 {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / positives.min(k) as f64
}

fn mean_over_users(entries: &[Scored], f: impl Fn(&[u8]) -> f64) -> f64 {
    let users = by_user(entries);
    if users.is_empty() {
        return 0.0;
    }
    compensated_sum(users.values().map(|l| f(&ranked_labels(l)))) / users.len() as f64
}

pub fn mean_ndcg_at_k(entries: &[Scored], k: usize) -> f64 {
    mean_over_users(entries, |r| ndcg_at_k(r, k))
}

pub fn mean_map_at_k(entries: &[Scored], k: usize) -> f64 {
    mean_over_users(entries, |r| map_at_k(r, k))
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// METEOR with exact then stem unigram matching (no synonym stage).
/// Within a stage each candidate word prefers the reference position that
/// extends the previous match, then the leftmost free one.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refr = words(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let cand_stem: Vec<String> = cand.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stem: Vec<String> = refr.iter().map(|w| stemmer.stem(w).into_owned()).collect();

    let mut align: Vec<Option<usize>> = vec![None; cand.len()];
    let mut used = vec![false; refr.len()];
    for stage in 0..2 {
        let (c, r) = if stage == 0 { (&cand, &refr) } else { (&cand_stem, &ref_stem) };
        for i in 0..c.len() {
            if align[i].is_some() {
                continue;
            }
            let free = |j: usize| !used[j] && c[i] == r[j];
            let next = i.checked_sub(1).and_then(|p| align[p]).map(|j| j + 1).filter(|&j| j < r.len() && free(j));
            if let Some(j) = next.or_else(|| (0..r.len()).find(|&j| free(j))) {
                align[i] = Some(j);
                used[j] = true;
            }
        }
    }

    let matched: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, a)| a.map(|j| (i, j))).collect();
    let m = matched.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + matched.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refr.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub uauc: f64,
    pub ndcg_at_k: f64,
    pub map_at_k: f64,
    pub meteor_mean: Option<f64>,
    pub k: usize,
    pub users_skipped: usize,
}

impl MetricReport {
    pub fn from_scores(entries: &[Scored], k: usize) -> Result<Self> {
        let scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
        let labels: Vec<u8> = entries.iter().map(|e| e.label).collect();
        let (uauc, users_skipped) = uauc(entries)?;
        Ok(Self {
            auc: auc(&scores, &labels)?,
            uauc,
            ndcg_at_k: mean_ndcg_at_k(entries, k),
            map_at_k: mean_map_at_k(entries, k),
            meteor_mean: None,
            k,
            users_skipped,
        })
    }

    pub fn with_meteor(mut self, pairs: &[(String, String)]) -> Self {
        if !pairs.is_empty() {
            let total = compensated_sum(pairs.iter().map(|(c, r)| meteor(c, r)));
            self.meteor_mean = Some(total / pairs.len() as f64);
        }
        self
    }

    pub fn to_table(&self) -> String {
        let meteor = self.meteor_mean.map_or("n/a".to_string(), |m| format!("{m:.4}"));
        format!(
            "AUC      {:.4}\nUAUC     {:.4}  ({} single-class users skipped)\nNDCG@{}   {:.4}\nMAP@{}    {:.4}\nMETEOR   {}\nBLEURT   unavailable\n",
            self.auc, self.uauc, self.users_skipped, self.k, self.ndcg_at_k, self.k, self.map_at_k, meteor
        )
    }

    pub fn tsv_header(&self) -> String {
        format!("auc\tuauc\tndcg@{0}\tmap@{0}\tmeteor\tusers_skipped", self.k)
    }

    pub fn tsv_row(&self) -> String {
        let meteor = self.meteor_mean.map_or("nan".to_string(), |m| format!("{m:.17e}"));
        let mut s = String::new();
        let _ = write!(
            s,
            "{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}\t{}",
            self.auc, self.uauc, self.ndcg_at_k, self.map_at_k, meteor, self.users_skipped
        );
        s
    }
}
