mod common;

use setident::eval::{evaluate, EvalOptions, Setting};
use setident::tokenizer::TokenCorpus;
use setident::training::{read_checkpoint, train, write_checkpoint, TrainConfig};
use setident::Error;

#[test]
fn training_is_deterministic() {
    let p = common::fixture(0, 16);
    let table = common::cf_table(&p, 16);
    let cfg = common::small_config();
    let a = train(&p, Some(&table), &cfg).unwrap();
    let b = train(&p, Some(&table), &cfg).unwrap();
    assert_eq!(a.trace.len(), cfg.epochs);
    for (x, y) in a.trace.iter().zip(&b.trace) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.gen.to_bits(), y.gen.to_bits());
        assert_eq!(x.ae.to_bits(), y.ae.to_bits());
    }
    let other = train(&p, Some(&table), &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.trace[0].total.to_bits(), other.trace[0].total.to_bits());
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let p = common::fixture(4, 16);
    let table = common::cf_table(&p, 16);
    let model = train(&p, Some(&table), &common::small_config()).unwrap().model;

    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let restored = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(restored.config(), model.config());
    for ((_, name, a), (_, _, b)) in model.store().iter().zip(restored.store().iter()) {
        assert_eq!(a, b, "{name}");
    }

    let mut c1 = model.build_corpus(&p.warm, &p.semantic).unwrap();
    let mut c2 = restored.build_corpus(&p.warm, &p.semantic).unwrap();
    for item in &p.cold {
        model.extend_corpus(&mut c1, item, &p.semantic[item]).unwrap();
        restored.extend_corpus(&mut c2, item, &p.semantic[item]).unwrap();
    }
    for setting in Setting::ALL {
        let opts = EvalOptions::new(setting, 0.5);
        let r1 = evaluate(&model, &c1, &p, &opts).unwrap();
        let r2 = evaluate(&restored, &c2, &p, &opts).unwrap();
        assert_eq!(r1, r2);
    }

    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    assert!(read_checkpoint(bad.as_slice()).is_err());
    assert!(read_checkpoint(&buf[..buf.len() / 2]).is_err());
}

#[test]
fn corpus_survives_disk() {
    let p = common::fixture(2, 16);
    let table = common::cf_table(&p, 16);
    let model = train(
        &p,
        Some(&table),
        &TrainConfig {
            epochs: 1,
            ..common::small_config()
        },
    )
    .unwrap()
    .model;
    let corpus = model.build_corpus(&p.catalog, &p.semantic).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    corpus.save(&path).unwrap();
    let back = TokenCorpus::load(&path).unwrap();
    assert_eq!(back, corpus);
    assert!(matches!(
        TokenCorpus::load(dir.path().join("missing.bin")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn both_dimensions_disabled_is_rejected() {
    let p = common::fixture(0, 16);
    let cfg = TrainConfig {
        disable_cf: true,
        disable_semantic: true,
        ..common::small_config()
    };
    assert!(matches!(train(&p, None, &cfg), Err(Error::Config(_))));
}

#[test]
fn parallel_evaluation_matches_serial() {
    let p = common::fixture(3, 16);
    let table = common::cf_table(&p, 16);
    let model = train(
        &p,
        Some(&table),
        &TrainConfig {
            epochs: 2,
            ..common::small_config()
        },
    )
    .unwrap()
    .model;
    let corpus = model.build_corpus(&p.catalog, &p.semantic).unwrap();
    let serial = evaluate(&model, &corpus, &p, &EvalOptions::new(Setting::All, 0.3)).unwrap();
    let parallel = evaluate(
        &model,
        &corpus,
        &p,
        &EvalOptions {
            workers: 4,
            ..EvalOptions::new(Setting::All, 0.3)
        },
    )
    .unwrap();
    assert_eq!(serial, parallel);
}
