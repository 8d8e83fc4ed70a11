use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::{binarize, Dataset, Interaction, Item};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Field separator, e.g. `::` (MovieLens) or `\t`.
    pub delimiter: String,
    /// Ratings strictly above this become positive labels.
    pub threshold: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            delimiter: "::".into(),
            threshold: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

struct RawRow {
    user: u64,
    item: u64,
    rating: f64,
    timestamp: i64,
}

fn parse_row(line: &str, delimiter: &str) -> Option<RawRow> {
    let mut fields = line.split(delimiter).map(str::trim);
    let user = fields.next()?.parse().ok()?;
    let item = fields.next()?.parse().ok()?;
    let rating: f64 = fields.next()?.parse().ok()?;
    let timestamp: i64 = fields.next()?.parse().ok()?;
    if fields.next().is_some() || !rating.is_finite() || timestamp < 0 {
        return None;
    }
    Some(RawRow {
        user,
        item,
        rating,
        timestamp,
    })
}

/// Reads `user<d>item<d>rating<d>timestamp` rows. Blank lines and lines
/// starting with `#` are ignored; anything else that fails to parse is
/// counted as malformed. Items get placeholder titles until metadata is
/// attached with [`load_item_metadata`].
pub fn ingest_raw(path: &Path, options: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        report.rows += 1;
        match parse_row(line, &options.delimiter) {
            Some(row) => {
                if seen.insert((row.user, row.item, row.timestamp)) {
                    rows.push(row);
                } else {
                    report.duplicates += 1;
                }
            }
            None => report.malformed += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: no valid rating rows",
            path.display()
        )));
    }
    if report.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed rows",
            path.display(),
            report.malformed
        );
    }

    let mut user_raw: Vec<u64> = rows.iter().map(|r| r.user).collect();
    user_raw.sort_unstable();
    user_raw.dedup();
    let mut item_raw: Vec<u64> = rows.iter().map(|r| r.item).collect();
    item_raw.sort_unstable();
    item_raw.dedup();
    let user_index: HashMap<u64, usize> =
        user_raw.iter().enumerate().map(|(n, &r)| (r, n)).collect();
    let item_index: HashMap<u64, usize> =
        item_raw.iter().enumerate().map(|(n, &r)| (r, n)).collect();

    let interactions = rows
        .iter()
        .map(|r| Interaction {
            user_id: user_index[&r.user],
            item_id: item_index[&r.item],
            rating: r.rating,
            label: binarize(r.rating, options.threshold),
            timestamp: r.timestamp,
        })
        .collect();
    let items: BTreeMap<usize, Item> = item_raw
        .iter()
        .enumerate()
        .map(|(n, raw)| {
            (
                n,
                Item {
                    item_id: n,
                    title: format!("item {raw}"),
                    description: String::new(),
                    keywords: vec![],
                },
            )
        })
        .collect();
    Ok((
        Dataset::new(interactions, items, user_raw, item_raw)?,
        report,
    ))
}

/// Attaches `id<d>title<d>description` rows to the dataset's items, matched on
/// raw item id. Rows for unknown items are ignored; a missing description is
/// treated as empty.
pub fn load_item_metadata(dataset: &mut Dataset, path: &Path, delimiter: &str) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: HashMap<u64, usize> = dataset
        .item_raw
        .iter()
        .enumerate()
        .map(|(n, &r)| (r, n))
        .collect();
    let mut attached = 0;
    for line in text.lines() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, delimiter);
        let (Some(id), Some(title)) = (fields.next(), fields.next()) else {
            continue;
        };
        let Ok(raw) = id.trim().parse::<u64>() else {
            continue;
        };
        let Some(&dense) = index.get(&raw) else {
            continue;
        };
        let title = title.trim();
        if title.is_empty() {
            continue;
        }
        let item = dataset
            .items
            .get_mut(&dense)
            .expect("dense index is in the item table");
        item.title = title.to_string();
        item.description = fields.next().unwrap_or("").trim().to_string();
        attached += 1;
    }
    Ok(attached)
}
