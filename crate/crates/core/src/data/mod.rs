//! Interaction ingestion, chronological splitting and item partitions.

mod snapshot;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use snapshot::{PreparedData, SemanticSource};

/// Users with fewer interactions are dropped before splitting.
pub const MIN_USER_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemMeta {
    pub category: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub item: String,
    pub timestamp: i64,
}

/// One user's interactions in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub events: Vec<Event>,
}

/// Interactions grouped per user and sorted by time, plus item metadata.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub users: Vec<UserSequence>,
    pub metadata: BTreeMap<String, ItemMeta>,
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn valid_id(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// Parse `user<TAB>item<TAB>timestamp` lines; `#` lines and blank lines are skipped.
pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if !valid_id(user) || !valid_id(item) {
            return Err(Error::Parse {
                line: line_no,
                msg: "ids must be nonempty and free of whitespace".into(),
            });
        }
        let timestamp: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid timestamp `{}`", fields[2]),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no interactions found".into()));
    }
    Ok(out)
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    parse_interactions(&read_text(path.as_ref())?)
}

/// Parse `item<TAB>category<TAB>title` records.
pub fn parse_item_metadata(text: &str) -> Result<BTreeMap<String, ItemMeta>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let item = fields.next().unwrap_or("").trim();
        let category = fields.next().unwrap_or("").trim();
        let title = fields.next().unwrap_or("").trim();
        if !valid_id(item) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "missing item id".into(),
            });
        }
        out.insert(
            item.to_string(),
            ItemMeta {
                category: category.to_string(),
                title: title.to_string(),
            },
        );
    }
    Ok(out)
}

pub fn load_item_metadata(path: impl AsRef<Path>) -> Result<BTreeMap<String, ItemMeta>> {
    parse_item_metadata(&read_text(path.as_ref())?)
}

impl Dataset {
    /// Group interactions per user (users in id order) and sort each
    /// sequence by timestamp. Equal timestamps keep file order.
    pub fn from_interactions(interactions: Vec<Interaction>, metadata: BTreeMap<String, ItemMeta>) -> Self {
        let mut per_user: BTreeMap<String, Vec<Event>> = BTreeMap::new();
        for it in interactions {
            per_user.entry(it.user).or_default().push(Event {
                item: it.item,
                timestamp: it.timestamp,
            });
        }
        let users = per_user
            .into_iter()
            .map(|(user, mut events)| {
                events.sort_by_key(|e| e.timestamp);
                UserSequence { user, events }
            })
            .collect();
        Self { users, metadata }
    }
}

/// A user's contiguous train / validation / test segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<Event>,
    pub val: Vec<Event>,
    pub test: Vec<Event>,
}

impl UserSplit {
    /// All events in time order.
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub users: Vec<UserSplit>,
    /// Users removed for having fewer than [`MIN_USER_LEN`] interactions.
    pub dropped_users: usize,
}

/// `(train, val, test)` sizes for a sequence of `n` events, or `None` when
/// the user is too short to keep.
pub fn split_sizes(n: usize) -> Option<(usize, usize, usize)> {
    if n < MIN_USER_LEN {
        return None;
    }
    let tenth = ((n as f64) * 0.1).round() as usize;
    let n_test = tenth.max(1);
    let n_val = tenth.max(1);
    Some((n - n_val - n_test, n_val, n_test))
}

/// Per-user chronological 8:1:1 split.
pub fn chronological_split(dataset: &Dataset) -> Result<Splits> {
    let mut users = Vec::new();
    let mut dropped = 0;
    for seq in &dataset.users {
        let Some((n_train, n_val, _)) = split_sizes(seq.events.len()) else {
            dropped += 1;
            continue;
        };
        let ev = &seq.events;
        users.push(UserSplit {
            user: seq.user.clone(),
            train: ev[..n_train].to_vec(),
            val: ev[n_train..n_train + n_val].to_vec(),
            test: ev[n_train + n_val..].to_vec(),
        });
    }
    if users.is_empty() {
        return Err(Error::Data(format!(
            "all {dropped} users have fewer than {MIN_USER_LEN} interactions"
        )));
    }
    if dropped > 0 {
        log::info!("dropped {dropped} users shorter than {MIN_USER_LEN} interactions");
    }
    Ok(Splits {
        users,
        dropped_users: dropped,
    })
}

/// Every item seen in any segment of any retained user, plus metadata items.
pub fn catalog(splits: &Splits, metadata: &BTreeMap<String, ItemMeta>) -> BTreeSet<String> {
    let mut items: BTreeSet<String> = splits
        .users
        .iter()
        .flat_map(|u| u.events().map(|e| e.item.clone()))
        .collect();
    items.extend(metadata.keys().cloned());
    items
}

/// Warm items occur in some training segment; the rest of the catalog is cold.
pub fn warm_cold_partition(splits: &Splits, catalog: &BTreeSet<String>) -> (BTreeSet<String>, BTreeSet<String>) {
    let warm: BTreeSet<String> = splits
        .users
        .iter()
        .flat_map(|u| u.train.iter().map(|e| e.item.clone()))
        .collect();
    let cold = catalog.difference(&warm).cloned().collect();
    (warm, cold)
}

/// Training interaction count per item.
pub fn train_counts(splits: &Splits) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for u in &splits.users {
        for e in &u.train {
            *counts.entry(e.item.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Assign warm items to `groups` equal-size popularity bins; group 0 holds
/// the most popular items. Ties in count are ordered by item id.
pub fn popularity_groups(splits: &Splits, warm: &BTreeSet<String>, groups: usize) -> Result<BTreeMap<String, usize>> {
    if groups == 0 || warm.len() < groups {
        return Err(Error::Data(format!(
            "{} warm items cannot fill {groups} popularity groups",
            warm.len()
        )));
    }
    let counts = train_counts(splits);
    let mut ranked: Vec<(&String, usize)> = warm.iter().map(|i| (i, counts.get(i).copied().unwrap_or(0))).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(pos, (item, _))| (item.clone(), pos * groups / n))
        .collect())
}

/// Parse the `SEMTXT1 <count> <dim>` semantic vector format.
pub fn parse_semantic_vectors(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty semantic vector file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 || head[0] != "SEMTXT1" {
        return Err(Error::Format(format!(
            "expected header `SEMTXT1 <count> <dim>`, found `{header}`"
        )));
    }
    let count: usize = head[1]
        .parse()
        .map_err(|_| Error::Format(format!("bad count `{}`", head[1])))?;
    let dim: usize = head[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad dim `{}`", head[2])))?;
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("invalid value `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("item `{id}` has {} values, header says {dim}", vals.len()),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("item `{id}` has a non-finite value"),
            });
        }
        if out.insert(id.clone(), vals).is_some() {
            return Err(Error::Data(format!("duplicate semantic vector for item `{id}`")));
        }
    }
    if out.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} vectors, found {}",
            out.len()
        )));
    }
    Ok(out)
}

pub fn load_semantic_vectors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    parse_semantic_vectors(&read_text(path.as_ref())?)
}

pub fn format_semantic_vectors(vectors: &BTreeMap<String, Vec<f64>>) -> String {
    let dim = vectors.values().next().map_or(0, Vec::len);
    let mut s = format!("SEMTXT1 {} {dim}\n", vectors.len());
    for (id, v) in vectors {
        s.push_str(id);
        for x in v {
            s.push(' ');
            s.push_str(&format!("{x:?}"));
        }
        s.push('\n');
    }
    s
}

pub use synth::synth_semantic;
