use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{
    catalog, chronological_split, popularity_groups, read_text, synth_semantic, warm_cold_partition, Dataset, Event,
    Splits, UserSplit,
};
use crate::error::{Error, Result};

const MAGIC: &str = "SETIDENT-SNAPSHOT\t1";

/// Where semantic feature vectors come from.
#[derive(Debug, Clone)]
pub enum SemanticSource {
    Vectors(BTreeMap<String, Vec<f64>>),
    Synth { seed: u64, d_sem: usize },
}

/// A split dataset with its item partitions and semantic features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub splits: Splits,
    pub catalog: BTreeSet<String>,
    pub warm: BTreeSet<String>,
    pub cold: BTreeSet<String>,
    /// Popularity group of every warm item, 0 = most popular.
    pub groups: BTreeMap<String, usize>,
    pub group_count: usize,
    pub semantic: BTreeMap<String, Vec<f64>>,
    /// Provenance of the semantic vectors, e.g. `synth:7` or `file`.
    pub semantic_source: String,
}

impl PreparedData {
    pub fn build(dataset: &Dataset, source: SemanticSource, group_count: usize) -> Result<Self> {
        let splits = chronological_split(dataset)?;
        let catalog = catalog(&splits, &dataset.metadata);
        let (warm, cold) = warm_cold_partition(&splits, &catalog);
        let groups = popularity_groups(&splits, &warm, group_count)?;
        let (semantic, semantic_source) = match source {
            SemanticSource::Vectors(v) => (v, "file".to_string()),
            SemanticSource::Synth { seed, d_sem } => {
                if d_sem == 0 {
                    return Err(Error::Config("d_sem must be >= 1".into()));
                }
                (
                    synth_semantic(&catalog, &dataset.metadata, d_sem, seed),
                    format!("synth:{seed}"),
                )
            }
        };
        if let Some(missing) = catalog.iter().find(|i| !semantic.contains_key(*i)) {
            return Err(Error::Data(format!("item `{missing}` has no semantic vector")));
        }
        let semantic: BTreeMap<String, Vec<f64>> = semantic.into_iter().filter(|(k, _)| catalog.contains(k)).collect();
        let dims: BTreeSet<usize> = semantic.values().map(Vec::len).collect();
        if dims.len() > 1 {
            return Err(Error::Data(format!("semantic vectors have mixed lengths {dims:?}")));
        }
        Ok(Self {
            splits,
            catalog,
            warm,
            cold,
            groups,
            group_count,
            semantic,
            semantic_source,
        })
    }

    pub fn d_sem(&self) -> usize {
        self.semantic.values().next().map_or(0, Vec::len)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "semantic_source\t{}", self.semantic_source);
        let _ = writeln!(s, "dropped_users\t{}", self.splits.dropped_users);
        let _ = writeln!(s, "group_count\t{}", self.group_count);
        let _ = writeln!(s, "users\t{}", self.splits.users.len());
        let seg = |name: &str, evs: &[Event]| {
            let mut line = name.to_string();
            for e in evs {
                let _ = write!(line, "\t{}@{}", e.item, e.timestamp);
            }
            line
        };
        for u in &self.splits.users {
            let _ = writeln!(s, "user\t{}", u.user);
            let _ = writeln!(s, "{}", seg("train", &u.train));
            let _ = writeln!(s, "{}", seg("val", &u.val));
            let _ = writeln!(s, "{}", seg("test", &u.test));
        }
        let _ = writeln!(s, "items\t{}", self.catalog.len());
        for item in &self.catalog {
            let state = if self.warm.contains(item) { "warm" } else { "cold" };
            let group = self.groups.get(item).map_or("-".to_string(), |g| g.to_string());
            let _ = writeln!(s, "item\t{item}\t{state}\t{group}");
        }
        let _ = writeln!(s, "semantic\t{}\t{}", self.semantic.len(), self.d_sem());
        for (id, v) in &self.semantic {
            let _ = write!(s, "{id}");
            for x in v {
                let _ = write!(s, "\t{x:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            let (i, l) = lines
                .next()
                .ok_or_else(|| Error::Format(format!("snapshot truncated, expected {what}")))?;
            Ok((i + 1, l.split('\t').collect()))
        };
        let bad = |line: usize, msg: String| Error::Parse { line, msg };

        let (_, magic) = next("magic")?;
        if magic.join("\t") != MAGIC {
            return Err(Error::Format("not a dataset snapshot".into()));
        }
        let mut header = |key: &str| -> Result<String> {
            let (ln, f) = next(key)?;
            if f.len() != 2 || f[0] != key {
                return Err(bad(ln, format!("expected `{key}`")));
            }
            Ok(f[1].to_string())
        };
        let semantic_source = header("semantic_source")?;
        let num = |ln: usize, s: &str| s.parse::<usize>().map_err(|_| bad(ln, format!("bad number `{s}`")));
        let dropped_users = num(0, &header("dropped_users")?)?;
        let group_count = num(0, &header("group_count")?)?;
        let n_users = num(0, &header("users")?)?;

        let parse_seg = |ln: usize, f: &[&str], name: &str| -> Result<Vec<Event>> {
            if f.first() != Some(&name) {
                return Err(bad(ln, format!("expected `{name}` segment")));
            }
            f[1..]
                .iter()
                .map(|tok| {
                    let (item, ts) = tok
                        .rsplit_once('@')
                        .ok_or_else(|| bad(ln, format!("bad event `{tok}`")))?;
                    let timestamp = ts.parse().map_err(|_| bad(ln, format!("bad timestamp `{ts}`")))?;
                    Ok(Event {
                        item: item.to_string(),
                        timestamp,
                    })
                })
                .collect()
        };
        let mut users = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            let (ln, f) = next("user")?;
            if f.len() != 2 || f[0] != "user" {
                return Err(bad(ln, "expected `user`".into()));
            }
            let user = f[1].to_string();
            let (ln, f) = next("train")?;
            let train = parse_seg(ln, &f, "train")?;
            let (ln, f) = next("val")?;
            let val = parse_seg(ln, &f, "val")?;
            let (ln, f) = next("test")?;
            let test = parse_seg(ln, &f, "test")?;
            users.push(UserSplit { user, train, val, test });
        }

        let (ln, f) = next("items")?;
        if f.len() != 2 || f[0] != "items" {
            return Err(bad(ln, "expected `items`".into()));
        }
        let n_items = num(ln, f[1])?;
        let (mut catalog, mut warm, mut cold, mut groups) =
            (BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), BTreeMap::new());
        for _ in 0..n_items {
            let (ln, f) = next("item")?;
            if f.len() != 4 || f[0] != "item" {
                return Err(bad(ln, "expected `item`".into()));
            }
            let id = f[1].to_string();
            match f[2] {
                "warm" => warm.insert(id.clone()),
                "cold" => cold.insert(id.clone()),
                other => return Err(bad(ln, format!("bad item state `{other}`"))),
            };
            if f[3] != "-" {
                groups.insert(id.clone(), num(ln, f[3])?);
            }
            catalog.insert(id);
        }

        let (ln, f) = next("semantic")?;
        if f.len() != 3 || f[0] != "semantic" {
            return Err(bad(ln, "expected `semantic`".into()));
        }
        let (n_sem, dim) = (num(ln, f[1])?, num(ln, f[2])?);
        let mut semantic = BTreeMap::new();
        for _ in 0..n_sem {
            let (ln, f) = next("semantic vector")?;
            let vals: Vec<f64> = f[1..]
                .iter()
                .map(|v| v.parse().map_err(|_| bad(ln, format!("bad value `{v}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != dim {
                return Err(bad(ln, format!("expected {dim} values, got {}", vals.len())));
            }
            semantic.insert(f[0].to_string(), vals);
        }

        Ok(Self {
            splits: Splits { users, dropped_users },
            catalog,
            warm,
            cold,
            groups,
            group_count,
            semantic,
            semantic_source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&read_text(path.as_ref())?)
    }
}
