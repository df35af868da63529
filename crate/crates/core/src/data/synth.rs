//! Seeded synthetic inputs: semantic feature vectors and interaction logs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Interaction, ItemMeta};

/// Noise scale around a category centroid.
const CATEGORY_NOISE: f64 = 0.3;

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic stand-in semantic features. Items that share a metadata
/// category sit near a common centroid; uncategorized items are
/// independent standard Gaussians.
pub fn synth_semantic(
    catalog: &BTreeSet<String>,
    metadata: &BTreeMap<String, ItemMeta>,
    d_sem: usize,
    seed: u64,
) -> BTreeMap<String, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categories: BTreeSet<&str> = catalog
        .iter()
        .filter_map(|i| metadata.get(i))
        .map(|m| m.category.as_str())
        .filter(|c| !c.is_empty())
        .collect();
    let centroids: BTreeMap<&str, Vec<f64>> = categories.into_iter().map(|c| (c, gaussian(&mut rng, d_sem))).collect();
    catalog
        .iter()
        .map(|item| {
            let noise = gaussian(&mut rng, d_sem);
            let centroid = metadata.get(item).and_then(|m| centroids.get(m.category.as_str()));
            let v = match centroid {
                Some(c) => c.iter().zip(&noise).map(|(a, b)| a + CATEGORY_NOISE * b).collect(),
                None => noise,
            };
            (item.clone(), v)
        })
        .collect()
}

/// Shape of a synthetic interaction log.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub users: usize,
    /// Items that appear in interactions.
    pub items: usize,
    /// Extra items that only ever show up as a user's final interaction.
    pub cold_items: usize,
    pub categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of following the item's fixed successor instead of jumping.
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 50,
            items: 30,
            cold_items: 0,
            categories: 5,
            min_len: 8,
            max_len: 12,
            follow_prob: 0.9,
            seed: 7,
        }
    }
}

pub fn item_name(i: usize) -> String {
    format!("i{i:03}")
}

pub fn cold_item_name(i: usize) -> String {
    format!("c{i:03}")
}

/// Markov-chain users over a fixed successor permutation. Each item's
/// successor lies in the same category, so sequences are learnable and
/// semantically coherent. Cold items replace the last event of some users.
pub fn synth_interactions(cfg: &SynthConfig) -> (Vec<Interaction>, BTreeMap<String, ItemMeta>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cats = cfg.categories.max(1);
    let category = |i: usize| format!("cat{}", i % cats);

    // successor cycle inside each category
    let mut successor = vec![0; cfg.items];
    for c in 0..cats {
        let mut members: Vec<usize> = (0..cfg.items).filter(|i| i % cats == c).collect();
        members.shuffle(&mut rng);
        for w in 0..members.len() {
            successor[members[w]] = members[(w + 1) % members.len()];
        }
    }

    let mut metadata = BTreeMap::new();
    for i in 0..cfg.items {
        metadata.insert(
            item_name(i),
            ItemMeta {
                category: category(i),
                title: format!("item {i}"),
            },
        );
    }
    for j in 0..cfg.cold_items {
        metadata.insert(
            cold_item_name(j),
            ItemMeta {
                category: category(j),
                title: format!("new item {j}"),
            },
        );
    }

    let mut out = Vec::new();
    for u in 0..cfg.users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut cur = rng.random_range(0..cfg.items);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            seq.push(item_name(cur));
            cur = if rng.random_bool(cfg.follow_prob) {
                successor[cur]
            } else {
                rng.random_range(0..cfg.items)
            };
        }
        if cfg.cold_items > 0 && u % 3 == 0 {
            let cat = (u / 3) % cats;
            let candidates: Vec<usize> = (0..cfg.cold_items).filter(|j| j % cats == cat).collect();
            let pick = if candidates.is_empty() {
                rng.random_range(0..cfg.cold_items)
            } else {
                candidates[rng.random_range(0..candidates.len())]
            };
            *seq.last_mut().expect("len >= 1") = cold_item_name(pick);
        }
        let base = 1_000_000 + (u as i64) * 1000;
        for (t, item) in seq.into_iter().enumerate() {
            out.push(Interaction {
                user: format!("u{u:03}"),
                item,
                timestamp: base + t as i64 * 10,
            });
        }
    }
    (out, metadata)
}

/// Render interactions in the TSV input format.
pub fn format_interactions(rows: &[Interaction]) -> String {
    let mut s = String::from("# user\titem\ttimestamp\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
    }
    s
}

pub fn format_item_metadata(meta: &BTreeMap<String, ItemMeta>) -> String {
    meta.iter()
        .map(|(id, m)| format!("{id}\t{}\t{}\n", m.category, m.title))
        .collect()
}
