use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use setident::data::synth::{format_interactions, format_item_metadata, synth_interactions, SynthConfig};
use setident::data::{
    load_interactions, load_item_metadata, load_semantic_vectors, Dataset, PreparedData, SemanticSource,
};
use setident::eval::{bench_generation, evaluate, local_optima_study, BenchResult, EvalOptions, MetricsReport};
use setident::generator::SetRecModel;
use setident::tokenizer::{pretrain_cf as fit_cf, BprConfig, CfTable, TokenCorpus};
use setident::training::{load_checkpoint, save_checkpoint, train_with, Control, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

const SNAPSHOT: &str = "snapshot.txt";
const CF_TABLE: &str = "cf_table.txt";
const CHECKPOINT: &str = "model.ckpt";
const CORPUS: &str = "corpus.bin";

/// Files written by one command, hashed into `<command>.sha256`.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Record a file some library call already wrote.
    fn record(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.written.push(p.clone());
        p
    }

    fn finish(self, command: &str) -> Result<(), CliError> {
        let mut manifest = String::new();
        for path in &self.written {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            let rel = path.strip_prefix(&self.dir).unwrap_or(path);
            let _ = writeln!(manifest, "{}  {}", hex::encode(Sha256::digest(&bytes)), rel.display());
        }
        let path = self.dir.join(format!("{command}.sha256"));
        fs::write(&path, &manifest).map_err(|e| io_err(&path, e))?;
        print!("{manifest}");
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Fail with exit code 2 unless an earlier command produced `name`.
fn require(dir: &Path, name: &str, producer: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Usage(format!(
            "missing {}: run `setident {producer}` first",
            p.display()
        )))
    }
}

fn require_input(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::Usage(format!("no `{key}` configured")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{key} file not found: {}", p.display())));
    }
    Ok(p)
}

pub fn prepare(cfg: &RunConfig, generate: bool) -> Result<(), CliError> {
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let mut cfg = cfg.clone();
    if generate {
        let (rows, meta) = synth_interactions(&SynthConfig {
            cold_items: 5,
            seed: cfg.synth_seed.unwrap_or(cfg.train.seed),
            ..Default::default()
        });
        cfg.interactions = Some(out.write("interactions.tsv", &format_interactions(&rows))?);
        cfg.items = Some(out.write("items.tsv", &format_item_metadata(&meta))?);
        if cfg.semantic_vectors.is_none() && cfg.synth_seed.is_none() {
            cfg.synth_seed = Some(cfg.train.seed);
        }
    }
    cfg.check_semantic_source()?;
    let rows = load_interactions(require_input(&cfg.interactions, "interactions")?)?;
    let meta = match &cfg.items {
        Some(_) => load_item_metadata(require_input(&cfg.items, "items")?)?,
        None => BTreeMap::new(),
    };
    let source = match (&cfg.semantic_vectors, cfg.synth_seed) {
        (Some(_), _) => SemanticSource::Vectors(load_semantic_vectors(require_input(
            &cfg.semantic_vectors,
            "semantic_vectors",
        )?)?),
        (None, Some(seed)) => SemanticSource::Synth { seed, d_sem: cfg.d_sem },
        (None, None) => unreachable!("checked above"),
    };
    let dataset = Dataset::from_interactions(rows, meta);
    let prepared = PreparedData::build(&dataset, source, cfg.groups)?;
    out.write(SNAPSHOT, &prepared.to_text())?;
    println!(
        "users {}  items {}  warm {}  cold {}  d_sem {}",
        prepared.splits.users.len(),
        prepared.catalog.len(),
        prepared.warm.len(),
        prepared.cold.len(),
        prepared.d_sem()
    );
    out.finish("prepare")
}

fn load_snapshot(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    Ok(PreparedData::load(require(&cfg.output_dir, SNAPSHOT, "prepare")?)?)
}

fn train_pairs(p: &PreparedData) -> Vec<(String, String)> {
    p.splits
        .users
        .iter()
        .flat_map(|u| u.train.iter().map(move |e| (u.user.clone(), e.item.clone())))
        .collect()
}

pub fn pretrain_cf(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = load_snapshot(cfg)?;
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let bpr = BprConfig {
        dim: cfg.cf_dim,
        epochs: cfg.cf_epochs,
        seed: cfg.train.seed,
        ..Default::default()
    };
    let table = fit_cf(&train_pairs(&prepared), &bpr)?.into_table();
    out.write(CF_TABLE, &table.to_text())?;
    println!(
        "cf table: {} items x {} dims (seed {})",
        table.items().len(),
        table.dim(),
        bpr.seed
    );
    out.finish("pretrain-cf")
}

fn load_cf(cfg: &RunConfig, train: &TrainConfig) -> Result<Option<CfTable>, CliError> {
    if !train.use_cf() {
        return Ok(None);
    }
    Ok(Some(CfTable::load(require(&cfg.output_dir, CF_TABLE, "pretrain-cf")?)?))
}

/// Train, then tokenize the whole catalog. Cold items join the corpus
/// through the semantic encoder only.
fn fit(
    prepared: &PreparedData,
    cf: Option<&CfTable>,
    train: &TrainConfig,
) -> Result<(SetRecModel, TokenCorpus, String), CliError> {
    let outcome = train_with(prepared, cf, train, |s, _| {
        info!(
            "epoch {:>3}  gen {:.4}  ae {:.4}  total {:.4}",
            s.epoch, s.gen, s.ae, s.total
        );
        Ok(Control::Continue)
    })?;
    let model = outcome.model;
    let mut corpus = model.build_corpus(&prepared.warm, &prepared.semantic)?;
    for item in &prepared.cold {
        model.extend_corpus(&mut corpus, item, &prepared.semantic[item])?;
    }
    let mut trace = format!("# seed={}\nepoch,gen,ae,total\n", train.seed);
    for s in &outcome.trace {
        let _ = writeln!(trace, "{},{:.10},{:.10},{:.10}", s.epoch, s.gen, s.ae, s.total);
    }
    Ok((model, corpus, trace))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = load_snapshot(cfg)?;
    let cf = load_cf(cfg, &cfg.train)?;
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let (model, corpus, trace) = fit(&prepared, cf.as_ref(), &cfg.train)?;
    save_checkpoint(&model, out.record(CHECKPOINT))?;
    corpus.save(out.record(CORPUS))?;
    out.write("loss_trace.csv", &trace)?;
    out.write("train_config.txt", &cfg.train.to_kv_text())?;
    println!(
        "trained {} epochs, {} parameters; corpus {} items",
        cfg.train.epochs,
        model.store().numel(),
        corpus.len()
    );
    out.finish("train")
}

fn report_csv(reports: &[MetricsReport], seed: u64) -> String {
    let mut s = format!("# seed={seed}\n{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        for row in r.csv_rows() {
            s.push_str(&row);
            s.push('\n');
        }
    }
    s
}

fn evaluate_all(
    cfg: &RunConfig,
    model: &SetRecModel,
    corpus: &TokenCorpus,
    prepared: &PreparedData,
    beta: f64,
    workers: usize,
) -> Result<Vec<MetricsReport>, CliError> {
    cfg.settings
        .iter()
        .map(|&setting| {
            let opts = EvalOptions {
                setting,
                beta,
                ks: cfg.ks.clone(),
                workers,
            };
            evaluate(model, corpus, prepared, &opts).map_err(CliError::from)
        })
        .collect()
}

fn load_trained(cfg: &RunConfig) -> Result<(PreparedData, SetRecModel, TokenCorpus), CliError> {
    let prepared = load_snapshot(cfg)?;
    let model = load_checkpoint(require(&cfg.output_dir, CHECKPOINT, "train")?)?;
    let corpus = TokenCorpus::load(require(&cfg.output_dir, CORPUS, "train")?)?;
    Ok((prepared, model, corpus))
}

pub fn eval(cfg: &RunConfig, workers: usize) -> Result<(), CliError> {
    let (prepared, model, corpus) = load_trained(cfg)?;
    let beta = cfg.eval_beta.unwrap_or(model.config().beta);
    let reports = evaluate_all(cfg, &model, &corpus, &prepared, beta, workers)?;
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let seed = model.config().seed;
    let mut summary = format!("seed {seed}; each test interaction is one instance; ties break by item id\n");
    for r in &reports {
        out.write(
            &format!("metrics_{}.csv", r.setting),
            &report_csv(std::slice::from_ref(r), seed),
        )?;
        summary.push_str(&r.summary());
    }
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    out.finish("eval")
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let mut csv = format!("# seed={}\n{}\n", cfg.train.seed, BenchResult::CSV_HEADER);
    for &m in &cfg.bench_m {
        let r = bench_generation(
            cfg.bench_l,
            m,
            cfg.bench_d,
            cfg.train.heads,
            cfg.train.layers,
            cfg.train.seed,
        )?;
        println!(
            "L={} M={} d={}: {:.3}x fewer MACs, {} vs {} encoder calls",
            r.l, r.m, r.d, r.ratio, r.flattened_calls, r.original_calls
        );
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    out.write("bench.csv", &csv)?;
    out.finish("bench")
}

pub fn demo_beam(cfg: &RunConfig) -> Result<(), CliError> {
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let rows = local_optima_study(
        cfg.beam_decoders,
        cfg.beam_vocab,
        cfg.beam_len,
        &cfg.beam_widths,
        cfg.train.seed,
    )?;
    let mut csv = format!("# seed={}\nk,beam_recall,global_recall,misses\n", cfg.train.seed);
    println!("{:>4} {:>12} {:>14} {:>7}", "K", "beam R@1", "global R@1", "misses");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.4},{:.4},{}", r.k, r.beam_recall, r.global_recall, r.misses);
        println!(
            "{:>4} {:>12.3} {:>14.3} {:>7}",
            r.k, r.beam_recall, r.global_recall, r.misses
        );
    }
    out.write("beam_demo.csv", &csv)?;
    out.finish("demo-beam")
}

pub fn sweep(cfg: &RunConfig, workers: usize) -> Result<(), CliError> {
    if cfg.sweep_beta.is_none() && cfg.sweep_alpha.is_none() && cfg.sweep_n_sem.is_none() {
        return Err(CliError::Usage("sweep needs --beta, --alpha or --n-sem".into()));
    }
    let mut out = Artifacts::new(&cfg.output_dir)?;
    if let Some(grid) = &cfg.sweep_beta {
        // Grounding happens at inference, so one checkpoint serves every beta.
        let (prepared, model, corpus) = load_trained(cfg)?;
        for &beta in grid {
            let reports = evaluate_all(cfg, &model, &corpus, &prepared, beta, workers)?;
            out.write(
                &format!("sweep/beta_{beta:.2}.csv"),
                &report_csv(&reports, model.config().seed),
            )?;
            println!("beta {beta:.2}: {}", headline(&reports));
        }
    }
    let retrain: Vec<(String, TrainConfig)> = cfg
        .sweep_alpha
        .iter()
        .flatten()
        .map(|&a| {
            (
                format!("alpha_{a:.2}"),
                TrainConfig {
                    alpha: a,
                    ..cfg.train.clone()
                },
            )
        })
        .chain(cfg.sweep_n_sem.iter().flatten().map(|&n| {
            (
                format!("n_sem_{n}"),
                TrainConfig {
                    n_sem: n,
                    ..cfg.train.clone()
                },
            )
        }))
        .collect();
    if !retrain.is_empty() {
        let prepared = load_snapshot(cfg)?;
        let cf = load_cf(cfg, &cfg.train)?;
        for (name, train) in retrain {
            train.validate()?;
            let (model, corpus, _) = fit(&prepared, cf.as_ref(), &train)?;
            let reports = evaluate_all(
                cfg,
                &model,
                &corpus,
                &prepared,
                cfg.eval_beta.unwrap_or(train.beta),
                workers,
            )?;
            out.write(&format!("sweep/{name}.csv"), &report_csv(&reports, train.seed))?;
            println!("{name}: {}", headline(&reports));
        }
    }
    out.finish("sweep")
}

fn headline(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .filter_map(|r| {
            r.metrics
                .last()
                .map(|m| format!("{} R@{} {:.4}", r.setting, m.k, m.recall))
        })
        .collect::<Vec<_>>()
        .join("  ")
}
