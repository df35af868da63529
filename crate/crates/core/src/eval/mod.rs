//! Ranking metrics and end-to-end evaluation.
//!
//! Each test interaction is an independent instance: the model sees the
//! user's full preceding history (truncated to the model's window), the
//! generated set is grounded over the setting's candidate items, and the
//! target's rank feeds Recall@K and NDCG@K.

mod beam;
mod bench;

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::PreparedData;
use crate::error::{contract, Error, Result};
use crate::generator::{ground_scores, rank_of, GroundingOptions, SetRecModel};
use crate::tokenizer::TokenCorpus;
use crate::training::training_instances;

pub use beam::{local_optima_study, BaselineDecoder, BeamStudyRow};
pub use bench::{bench_generation, BenchResult};

/// 1 when the target is within the top `k`.
pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: `1/log2(rank+1)` inside the top `k`.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    All,
    Warm,
    Cold,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::All, Setting::Warm, Setting::Cold];
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::All => "all",
            Setting::Warm => "warm",
            Setting::Cold => "cold",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Setting::All),
            "warm" => Ok(Setting::Warm),
            "cold" => Ok(Setting::Cold),
            _ => Err(Error::Config(format!("unknown setting `{s}` (all|warm|cold)"))),
        }
    }
}

/// Popularity group used for the per-group breakdown.
pub const GROUP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMetrics {
    /// 0 = most popular.
    pub group: usize,
    pub count: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub setting: Setting,
    pub beta: f64,
    pub count: usize,
    pub metrics: Vec<KMetrics>,
    /// Filled for the warm setting only; counts partition `count`.
    pub groups: Vec<GroupMetrics>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "setting,beta,group,k,count,recall,ndcg";

    /// One row per K, then one row per popularity group.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},all,{},{},{:.6},{:.6}",
                    self.setting, self.beta, m.k, self.count, m.recall, m.ndcg
                )
            })
            .collect();
        rows.extend(self.groups.iter().map(|g| {
            format!(
                "{},{},G{},{},{},{:.6},{:.6}",
                self.setting,
                self.beta,
                g.group + 1,
                GROUP_K,
                g.count,
                g.recall,
                g.ndcg
            )
        }));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "setting {} (beta {}): {} instances\n",
            self.setting, self.beta, self.count
        );
        for m in &self.metrics {
            let _ = writeln!(s, "  Recall@{:<3} {:.4}   NDCG@{:<3} {:.4}", m.k, m.recall, m.k, m.ndcg);
        }
        for g in &self.groups {
            let _ = writeln!(
                s,
                "  G{} ({} instances): Recall@{GROUP_K} {:.4}   NDCG@{GROUP_K} {:.4}",
                g.group + 1,
                g.count,
                g.recall,
                g.ndcg
            );
        }
        s
    }
}

/// A test interaction: corpus rows of the history and the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

fn in_setting(prepared: &PreparedData, item: &str, setting: Setting) -> bool {
    match setting {
        Setting::All => true,
        Setting::Warm => prepared.warm.contains(item),
        Setting::Cold => prepared.cold.contains(item),
    }
}

/// Corpus rows eligible as candidates in `setting`.
pub fn candidates(prepared: &PreparedData, corpus: &TokenCorpus, setting: Setting) -> Vec<usize> {
    (0..corpus.len())
        .filter(|&i| {
            let id = corpus.item_id(i);
            prepared.catalog.contains(id) && in_setting(prepared, id, setting)
        })
        .collect()
}

/// Test interactions whose target belongs to `setting`.
pub fn test_instances(
    prepared: &PreparedData,
    corpus: &TokenCorpus,
    setting: Setting,
    max_history: usize,
) -> Result<Vec<EvalInstance>> {
    let mut out = Vec::new();
    for (u, split) in prepared.splits.users.iter().enumerate() {
        let ids = split
            .events()
            .map(|e| {
                corpus
                    .index_of(&e.item)
                    .ok_or_else(|| Error::UnknownItem(e.item.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let first_test = split.train.len() + split.val.len();
        for (t, e) in split.test.iter().enumerate() {
            let pos = first_test + t;
            if !in_setting(prepared, &e.item, setting) {
                continue;
            }
            let start = pos.saturating_sub(max_history);
            out.push(EvalInstance {
                user: u,
                history: ids[start..pos].to_vec(),
                target: ids[pos],
            });
        }
    }
    Ok(out)
}

/// Target rank of every instance under `scorer`, computed on up to
/// `workers` threads. Equal scores are ordered by `names` (the item ids of
/// the scored rows). Output order follows `instances`.
pub fn rank_instances<F>(instances: &[EvalInstance], names: &[String], scorer: F, workers: usize) -> Result<Vec<usize>>
where
    F: Fn(&EvalInstance) -> Result<Vec<(usize, f64)>> + Sync,
{
    let one = |inst: &EvalInstance| -> Result<usize> {
        let scores: Vec<(&str, f64)> = scorer(inst)?.into_iter().map(|(i, s)| (names[i].as_str(), s)).collect();
        rank_of(&scores, &names[inst.target].as_str())
            .ok_or_else(|| Error::Contract(format!("target row {} missing from candidates", inst.target)))
    };
    let workers = workers.max(1);
    if workers == 1 || instances.len() < 2 {
        return instances.iter().map(one).collect();
    }
    let chunk = instances.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(instances.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| Error::Contract("evaluation worker panicked".into()))??,
            );
        }
        Ok(out)
    })
}

/// Aggregate target ranks into a report. `groups[i]` is the popularity
/// group of instance `i`'s target when the breakdown is wanted.
pub fn report_from_ranks(
    setting: Setting,
    beta: f64,
    ks: &[usize],
    ranks: &[usize],
    groups: Option<(&[usize], usize)>,
) -> MetricsReport {
    let n = ranks.len();
    let mean = |f: &dyn Fn(usize) -> f64| {
        if n == 0 {
            0.0
        } else {
            ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64
        }
    };
    let metrics = ks
        .iter()
        .map(|&k| KMetrics {
            k,
            recall: mean(&|r| recall_at_k(r, k)),
            ndcg: mean(&|r| ndcg_at_k(r, k)),
        })
        .collect();
    let groups = match groups {
        Some((of, count)) => (0..count)
            .map(|grp| {
                let rs: Vec<usize> = ranks
                    .iter()
                    .zip(of)
                    .filter(|(_, &g)| g == grp)
                    .map(|(&r, _)| r)
                    .collect();
                let c = rs.len();
                let avg = |f: fn(usize, usize) -> f64| {
                    if c == 0 {
                        0.0
                    } else {
                        rs.iter().map(|&r| f(r, GROUP_K)).sum::<f64>() / c as f64
                    }
                };
                GroupMetrics {
                    group: grp,
                    count: c,
                    recall: avg(recall_at_k),
                    ndcg: avg(ndcg_at_k),
                }
            })
            .collect(),
        None => Vec::new(),
    };
    MetricsReport {
        setting,
        beta,
        count: n,
        metrics,
        groups,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub setting: Setting,
    pub beta: f64,
    pub ks: Vec<usize>,
    pub workers: usize,
}

impl EvalOptions {
    pub fn new(setting: Setting, beta: f64) -> Self {
        Self {
            setting,
            beta,
            ks: vec![5, 10],
            workers: 1,
        }
    }
}

/// Grounding options for `beta`, adjusted for ablated dimensions.
pub fn grounding_for(model: &SetRecModel, beta: f64) -> GroundingOptions {
    GroundingOptions {
        beta: model.config().effective_beta(beta),
        similarity: model.config().similarity,
        average_semantic: model.config().average_semantic,
    }
}

/// Score every test instance of a setting and aggregate the metrics.
pub fn evaluate(
    model: &SetRecModel,
    corpus: &TokenCorpus,
    prepared: &PreparedData,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    contract!(
        (0.0..=1.0).contains(&opts.beta),
        "beta must lie in [0, 1], got {}",
        opts.beta
    );
    contract!(opts.ks.iter().all(|&k| k >= 1), "every K must be >= 1");
    let instances = test_instances(prepared, corpus, opts.setting, model.config().max_history)?;
    let cands = candidates(prepared, corpus, opts.setting);
    let grounding = grounding_for(model, opts.beta);
    let ranks = rank_instances(
        &instances,
        corpus.items(),
        |inst| {
            let gen = model.generate_for(corpus, &inst.history)?;
            ground_scores(&gen, corpus, &grounding, Some(&cands))
        },
        opts.workers,
    )?;
    let group_of: Vec<usize>;
    let groups = if opts.setting == Setting::Warm {
        group_of = instances
            .iter()
            .map(|i| prepared.groups.get(corpus.item_id(i.target)).copied().unwrap_or(0))
            .collect();
        Some((group_of.as_slice(), prepared.group_count))
    } else {
        None
    };
    Ok(report_from_ranks(opts.setting, opts.beta, &opts.ks, &ranks, groups))
}

/// Recall@`k` on the training instances, ranking over warm items.
pub fn training_recall(model: &SetRecModel, prepared: &PreparedData, k: usize) -> Result<f64> {
    let corpus = model.build_corpus(&prepared.warm, &prepared.semantic)?;
    let index: HashMap<&str, usize> = corpus
        .items()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let instances: Vec<EvalInstance> = training_instances(prepared, &index, model.config().max_history)?
        .into_iter()
        .map(|i| EvalInstance {
            user: i.user,
            history: i.history,
            target: i.target,
        })
        .collect();
    let grounding = grounding_for(model, model.config().beta);
    let ranks = rank_instances(
        &instances,
        corpus.items(),
        |inst| {
            let gen = model.generate_for(&corpus, &inst.history)?;
            ground_scores(&gen, &corpus, &grounding, None)
        },
        1,
    )?;
    Ok(ranks.iter().map(|&r| recall_at_k(r, k)).sum::<f64>() / ranks.len() as f64)
}
