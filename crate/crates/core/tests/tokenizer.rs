mod common;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setident::data::synth::{synth_interactions, SynthConfig};
use setident::data::synth_semantic;
use setident::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use setident::tokenizer::{ae_loss, pretrain_cf, AeConfig, BprConfig, SemanticAe};

/// Two user groups, each consuming only its own half of the catalog.
fn two_cluster_pairs() -> (Vec<(String, String)>, Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let left: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
    let right: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
    let mut pairs = Vec::new();
    for u in 0..40 {
        let side = if u % 2 == 0 { &left } else { &right };
        for _ in 0..6 {
            pairs.push((format!("u{u}"), side[rng.random_range(0..side.len())].clone()));
        }
    }
    (pairs, left, right)
}

#[test]
fn bpr_separates_two_clusters() {
    let (pairs, left, right) = two_cluster_pairs();
    let model = pretrain_cf(
        &pairs,
        &BprConfig {
            dim: 8,
            epochs: 100,
            ..Default::default()
        },
    )
    .unwrap();
    // AUC over every (user, own-cluster item, other-cluster item) triple.
    let (mut wins, mut total) = (0.0, 0.0);
    for u in 0..40 {
        let user = format!("u{u}");
        let (own, other) = if u % 2 == 0 { (&left, &right) } else { (&right, &left) };
        for p in own {
            for n in other {
                let (sp, sn) = (model.score(&user, p).unwrap(), model.score(&user, n).unwrap());
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
                total += 1.0;
            }
        }
    }
    let auc = wins / total;
    assert!(auc > 0.8, "auc {auc}");
}

#[test]
fn bpr_rejects_empty_input() {
    assert!(pretrain_cf(&[], &BprConfig::default()).is_err());
}

#[test]
fn autoencoder_reconstruction_improves() {
    let (_, meta) = synth_interactions(&SynthConfig {
        items: 64,
        ..Default::default()
    });
    let items: BTreeSet<String> = meta.keys().cloned().collect();
    assert_eq!(items.len(), 64);
    let vectors = synth_semantic(&items, &meta, 24, 5);
    let data: Vec<f64> = items.iter().flat_map(|i| vectors[i].iter().copied()).collect();
    let batch = Tensor::matrix(64, 24, data).unwrap();

    let mut store = ParamStore::new();
    let cfg = AeConfig {
        d_sem: 24,
        n_tokens: 2,
        d: 8,
        hidden: vec![32],
    };
    let ae = SemanticAe::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 3e-3,
        ..Default::default()
    });
    let mut trace = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let s = g.constant(batch.clone());
        let z = ae.encode_var(&mut g, &store, s).unwrap();
        let loss = ae.reconstruction_var(&mut g, &store, s, z).unwrap();
        trace.push(g.value(loss).data()[0]);
        g.backward(loss).unwrap();
        store.accumulate(&g);
        adam.step(&mut store);
    }
    assert!(trace[49] < trace[0], "{} -> {}", trace[0], trace[49]);

    // The batched loss is the mean of the per-item squared error.
    let per_item: f64 = items
        .iter()
        .map(|i| {
            let z: Vec<f64> = ae.sem_encode(&store, &vectors[i]).unwrap().concat();
            ae_loss(&vectors[i], &ae.sem_decode(&store, &z).unwrap()).unwrap()
        })
        .sum::<f64>()
        / 64.0;
    let mut g = Graph::new();
    let s = g.constant(batch);
    let z = ae.encode_var(&mut g, &store, s).unwrap();
    let loss = ae.reconstruction_var(&mut g, &store, s, z).unwrap();
    assert!((g.value(loss).data()[0] - per_item).abs() < 1e-9);
}

#[test]
fn cf_table_covers_training_items() {
    let p = common::fixture(3, 8);
    let table = common::cf_table(&p, 8);
    for item in &p.warm {
        assert_eq!(table.row(item).unwrap().len(), 8);
    }
    for item in &p.cold {
        assert!(table.index_of(item).is_none());
    }
}
