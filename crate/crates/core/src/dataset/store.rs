//! Processed-dataset directory: four tab-separated files, each starting with
//! a version line.
//!
//! ```text
//! manifest.tsv      key<TAB>value
//! users.tsv         user  raw_id
//! items.tsv         item  raw_id  title  description  keywords(comma-joined)
//! interactions.tsv  user  item  rating  label  timestamp  split
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{temporal_split, Dataset, Interaction, Item, TemporalSplit};
use crate::error::{Error, Result};

pub const PROCESSED_VERSION: &str = "# thinkrec-processed v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub dataset: Dataset,
    pub train_end: i64,
    pub valid_end: i64,
    pub manifest: BTreeMap<String, String>,
}

impl ProcessedDataset {
    pub fn split(&self) -> Result<TemporalSplit> {
        temporal_split(&self.dataset, self.train_end, self.valid_end)
    }
}

fn clean(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

pub fn save_processed(dir: &Path, processed: &ProcessedDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = &processed.dataset;
    let split = processed.split()?;

    let mut manifest = processed.manifest.clone();
    manifest.insert("train_end".into(), processed.train_end.to_string());
    manifest.insert("valid_end".into(), processed.valid_end.to_string());
    manifest.insert("users".into(), ds.user_count().to_string());
    manifest.insert("items".into(), ds.item_count().to_string());
    manifest.insert("interactions".into(), ds.len().to_string());
    manifest.insert("train".into(), split.train.len().to_string());
    manifest.insert("valid".into(), split.valid.len().to_string());
    manifest.insert("test".into(), split.test.len().to_string());
    let mut text = format!("{PROCESSED_VERSION}\n");
    for (k, v) in &manifest {
        text.push_str(&format!("{}\t{}\n", clean(k), clean(v)));
    }
    write(dir, "manifest.tsv", &text)?;

    let mut text = format!("{PROCESSED_VERSION}\nuser\traw_id\n");
    for (n, raw) in ds.user_raw.iter().enumerate() {
        text.push_str(&format!("{n}\t{raw}\n"));
    }
    write(dir, "users.tsv", &text)?;

    let mut text = format!("{PROCESSED_VERSION}\nitem\traw_id\ttitle\tdescription\tkeywords\n");
    for (id, item) in &ds.items {
        text.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\n",
            ds.item_raw[*id],
            clean(&item.title),
            clean(&item.description),
            clean(&item.keywords.join(","))
        ));
    }
    write(dir, "items.tsv", &text)?;

    let mut text = format!("{PROCESSED_VERSION}\nuser\titem\trating\tlabel\ttimestamp\tsplit\n");
    for it in &ds.interactions {
        let split = if it.timestamp <= processed.train_end {
            "train"
        } else if it.timestamp <= processed.valid_end {
            "valid"
        } else {
            "test"
        };
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{split}\n",
            it.user_id, it.item_id, it.rating, it.label, it.timestamp
        ));
    }
    write(dir, "interactions.tsv", &text)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Data rows of a processed file, after checking the version line and
/// skipping the column header.
fn read_rows(dir: &Path, name: &str, header: bool) -> Result<Vec<Vec<String>>> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Prerequisite(format!(
            "processed dataset file {} is missing",
            path.display()
        ))
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(PROCESSED_VERSION) {
        return Err(Error::Format(format!(
            "{}: unsupported version header",
            path.display()
        )));
    }
    if header {
        lines.next();
    }
    Ok(lines
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

fn field<T: std::str::FromStr>(row: &[String], n: usize, file: &str) -> Result<T> {
    row.get(n)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{file}: bad field {n} in row {row:?}")))
}

pub fn load_processed(dir: &Path) -> Result<ProcessedDataset> {
    let mut manifest: BTreeMap<String, String> = read_rows(dir, "manifest.tsv", false)?
        .into_iter()
        .filter(|r| r.len() == 2)
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    let train_end = manifest
        .get("train_end")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("manifest lacks train_end".into()))?;
    let valid_end = manifest
        .get("valid_end")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("manifest lacks valid_end".into()))?;
    for derived in [
        "train_end",
        "valid_end",
        "users",
        "items",
        "interactions",
        "train",
        "valid",
        "test",
    ] {
        manifest.remove(derived);
    }

    let user_raw = read_rows(dir, "users.tsv", true)?
        .iter()
        .map(|r| field(r, 1, "users.tsv"))
        .collect::<Result<Vec<u64>>>()?;
    let mut items = BTreeMap::new();
    let mut item_raw = Vec::new();
    for row in read_rows(dir, "items.tsv", true)? {
        let id: usize = field(&row, 0, "items.tsv")?;
        item_raw.push(field(&row, 1, "items.tsv")?);
        let keywords = row
            .get(4)
            .map(|k| {
                k.split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        items.insert(
            id,
            Item {
                item_id: id,
                title: row.get(2).cloned().unwrap_or_default(),
                description: row.get(3).cloned().unwrap_or_default(),
                keywords,
            },
        );
    }
    let interactions = read_rows(dir, "interactions.tsv", true)?
        .iter()
        .map(|r| {
            Ok(Interaction {
                user_id: field(r, 0, "interactions.tsv")?,
                item_id: field(r, 1, "interactions.tsv")?,
                rating: field(r, 2, "interactions.tsv")?,
                label: field(r, 3, "interactions.tsv")?,
                timestamp: field(r, 4, "interactions.tsv")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProcessedDataset {
        dataset: Dataset::new(interactions, items, user_raw, item_raw)?,
        train_end,
        valid_end,
        manifest,
    })
}
