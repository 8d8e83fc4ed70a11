//! Interaction logs, item metadata and the transformations applied before
//! any model sees them: binarization, temporal splitting, sparsity filtering
//! and history-window construction.

mod ingest;
mod keywords;
mod prompt;
mod store;

use std::collections::{BTreeMap, HashMap};

pub use ingest::{ingest_raw, load_item_metadata, IngestOptions, IngestReport};
pub use keywords::{extract_keywords, KeywordExtractor, STOPWORDS};
pub use prompt::{
    label_word, render_history, render_item_line, render_rec_prompt, PromptInstance, PromptKind,
    PromptStyle, Slot, FEATURE_CLOSE, FEATURE_OPEN,
};
pub use store::{load_processed, save_processed, ProcessedDataset, PROCESSED_VERSION};

use crate::error::{Error, Result};

/// One timestamped user–item event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user_id: usize,
    pub item_id: usize,
    pub rating: f64,
    pub label: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub item_id: usize,
    pub title: String,
    pub description: String,
    pub keywords: Vec<String>,
}

/// Interactions sorted by `(user_id, timestamp)` plus the item table.
///
/// `user_raw` and `item_raw` map dense indices back to the ids found in the
/// source files.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub items: BTreeMap<usize, Item>,
    pub user_raw: Vec<u64>,
    pub item_raw: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset, sorting interactions and checking item references.
    pub fn new(
        mut interactions: Vec<Interaction>,
        items: BTreeMap<usize, Item>,
        user_raw: Vec<u64>,
        item_raw: Vec<u64>,
    ) -> Result<Self> {
        sort_interactions(&mut interactions);
        for it in &interactions {
            if !items.contains_key(&it.item_id) {
                return Err(Error::UnknownId {
                    kind: "item",
                    id: it.item_id,
                });
            }
            if it.user_id >= user_raw.len() {
                return Err(Error::UnknownId {
                    kind: "user",
                    id: it.user_id,
                });
            }
        }
        Ok(Self {
            interactions,
            items,
            user_raw,
            item_raw,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_raw.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_raw.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Same users and items, different interaction subset.
    pub fn with_interactions(&self, mut interactions: Vec<Interaction>) -> Dataset {
        sort_interactions(&mut interactions);
        Dataset {
            interactions,
            items: self.items.clone(),
            user_raw: self.user_raw.clone(),
            item_raw: self.item_raw.clone(),
        }
    }

    pub fn item(&self, item_id: usize) -> Result<&Item> {
        self.items.get(&item_id).ok_or(Error::UnknownId {
            kind: "item",
            id: item_id,
        })
    }

    /// Chronological event list per user.
    pub fn timelines(&self) -> Vec<Vec<Interaction>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for it in &self.interactions {
            out[it.user_id].push(*it);
        }
        out
    }
}

fn sort_interactions(v: &mut [Interaction]) {
    v.sort_by(|a, b| (a.user_id, a.timestamp, a.item_id).cmp(&(b.user_id, b.timestamp, b.item_id)));
}

/// 1 iff `rating` is strictly greater than `threshold`.
pub fn binarize(rating: f64, threshold: f64) -> u8 {
    u8::from(rating > threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Assigns `t <= train_end` to train, `train_end < t <= valid_end` to valid
/// and the rest to test.
pub fn temporal_split(dataset: &Dataset, train_end: i64, valid_end: i64) -> Result<TemporalSplit> {
    if train_end >= valid_end {
        return Err(Error::Invalid(format!(
            "train_end ({train_end}) must be before valid_end ({valid_end})"
        )));
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for it in &dataset.interactions {
        if it.timestamp <= train_end {
            train.push(*it);
        } else if it.timestamp <= valid_end {
            valid.push(*it);
        } else {
            test.push(*it);
        }
    }
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if part.is_empty() {
            log::warn!("temporal split produced an empty {name} set");
        }
    }
    Ok(TemporalSplit {
        train: dataset.with_interactions(train),
        valid: dataset.with_interactions(valid),
        test: dataset.with_interactions(test),
    })
}

/// Repeatedly drops users and items with fewer than `min_interactions`
/// events until nothing changes, then re-densifies ids.
pub fn filter_sparse(dataset: &Dataset, min_interactions: usize) -> Result<Dataset> {
    if min_interactions == 0 {
        return Err(Error::Invalid("min_interactions must be at least 1".into()));
    }
    let mut kept: Vec<Interaction> = dataset.interactions.clone();
    loop {
        let mut user_counts: HashMap<usize, usize> = HashMap::new();
        let mut item_counts: HashMap<usize, usize> = HashMap::new();
        for it in &kept {
            *user_counts.entry(it.user_id).or_default() += 1;
            *item_counts.entry(it.item_id).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|it| {
            user_counts[&it.user_id] >= min_interactions
                && item_counts[&it.item_id] >= min_interactions
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::Invalid(format!(
            "no interactions survive filtering at min_interactions={min_interactions}"
        )));
    }
    densify(dataset, kept)
}

fn densify(dataset: &Dataset, kept: Vec<Interaction>) -> Result<Dataset> {
    let mut users: Vec<usize> = kept.iter().map(|it| it.user_id).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<usize> = kept.iter().map(|it| it.item_id).collect();
    items.sort_unstable();
    items.dedup();
    let user_map: HashMap<usize, usize> = users.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let item_map: HashMap<usize, usize> = items.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let interactions = kept
        .into_iter()
        .map(|it| Interaction {
            user_id: user_map[&it.user_id],
            item_id: item_map[&it.item_id],
            ..it
        })
        .collect();
    let mut item_table = BTreeMap::new();
    for (new, &old) in items.iter().enumerate() {
        let mut item = dataset.item(old)?.clone();
        item.item_id = new;
        item_table.insert(new, item);
    }
    Dataset::new(
        interactions,
        item_table,
        users.iter().map(|&u| dataset.user_raw[u]).collect(),
        items.iter().map(|&i| dataset.item_raw[i]).collect(),
    )
}

/// Chronological history preceding a target event.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub user_id: usize,
    pub entries: Vec<(Item, u8)>,
    pub target: Item,
    pub target_label: u8,
    pub timestamp: i64,
}

/// Builds a window for each target event from the full `timeline` dataset,
/// keeping at most `max_history` of the most recent strictly earlier events.
/// Targets without any earlier event are skipped.
pub fn build_windows(
    timeline: &Dataset,
    targets: &[Interaction],
    max_history: usize,
) -> Result<Vec<HistoryWindow>> {
    if max_history == 0 {
        return Err(Error::Invalid("max_history must be at least 1".into()));
    }
    let timelines = timeline.timelines();
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let events = timelines.get(target.user_id).ok_or(Error::UnknownId {
            kind: "user",
            id: target.user_id,
        })?;
        let end = events.partition_point(|e| e.timestamp < target.timestamp);
        if end == 0 {
            continue;
        }
        let start = end.saturating_sub(max_history);
        let entries = events[start..end]
            .iter()
            .map(|e| Ok((timeline.item(e.item_id)?.clone(), e.label)))
            .collect::<Result<Vec<_>>>()?;
        out.push(HistoryWindow {
            user_id: target.user_id,
            entries,
            target: timeline.item(target.item_id)?.clone(),
            target_label: target.label,
            timestamp: target.timestamp,
        });
    }
    Ok(out)
}
