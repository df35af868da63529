//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use setident::data::synth::{synth_interactions, SynthConfig};
use setident::data::{Dataset, PreparedData, SemanticSource};
use setident::tensor::{Graph, Tensor, Var};
use setident::tokenizer::{pretrain_cf, BprConfig, CfTable};
use setident::training::TrainConfig;

/// Largest relative error between the analytic gradient of `f` and a
/// central finite difference with step `h`, over every input entry.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// vanishing gradients from dividing by zero.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, h: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Rank of `target` among `(id, score)` pairs: 1 + items scored strictly
/// higher + equal-scored items with a smaller id. Computed by a full sort.
pub fn brute_force_rank(scores: &[(String, f64)], target: &str) -> usize {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    sorted.iter().position(|(id, _)| id == target).expect("target present") + 1
}

pub fn brute_recall(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn brute_ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        // Single relevant item: DCG = 1/log2(rank + 1), ideal DCG = 1.
        std::f64::consts::LN_2 / ((rank + 1) as f64).ln()
    } else {
        0.0
    }
}

/// The seeded 50-user / 30-item synthetic fixture.
pub fn fixture(cold_items: usize, d_sem: usize) -> PreparedData {
    let (rows, meta) = synth_interactions(&SynthConfig {
        cold_items,
        ..Default::default()
    });
    let ds = Dataset::from_interactions(rows, meta);
    PreparedData::build(&ds, SemanticSource::Synth { seed: 3, d_sem }, 4).expect("fixture")
}

pub fn train_pairs(p: &PreparedData) -> Vec<(String, String)> {
    p.splits
        .users
        .iter()
        .flat_map(|u| u.train.iter().map(move |e| (u.user.clone(), e.item.clone())))
        .collect()
}

pub fn cf_table(p: &PreparedData, dim: usize) -> CfTable {
    let cfg = BprConfig {
        dim,
        epochs: 50,
        ..Default::default()
    };
    pretrain_cf(&train_pairs(p), &cfg).expect("bpr").into_table()
}

/// Small model settings that keep fixture runs fast.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        n_sem: 2,
        d: 16,
        heads: 2,
        layers: 1,
        ae_hidden: vec![32],
        epochs: 3,
        batch_size: 32,
        lr: 3e-3,
        ..Default::default()
    }
}
