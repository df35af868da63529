//! Generation loss, joint objective and the optimization loop.

mod checkpoint;
mod config;

use std::collections::{BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PreparedData;
use crate::error::{contract, Error, Result};
use crate::generator::{GeneratedSet, SetRecModel, Similarity};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::tokenizer::{CfTable, DimTag, SetIdentifier, TokenCorpus};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::TrainConfig;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-dimension full-softmax negative log-likelihood of the target's
/// corpus rows, summed over dimensions.
pub fn gen_loss(gen: &GeneratedSet, target: &SetIdentifier, corpus: &TokenCorpus, sim: Similarity) -> Result<f64> {
    let idx = corpus
        .index_of(&target.item_id)
        .ok_or_else(|| Error::Data(format!("target `{}` is not in the corpus", target.item_id)))?;
    let mut total = 0.0;
    for (tag, z_hat) in gen.dims.iter().zip(&gen.tokens) {
        let (Some(table), Some(row)) = (corpus.matrix(*tag), corpus.row_index(*tag, idx)) else {
            return Err(Error::Data(format!(
                "corpus has no {tag} dimension for `{}`",
                target.item_id
            )));
        };
        let logits: Vec<f64> = (0..table.rows()).map(|r| sim.eval(z_hat, table.row(r))).collect();
        total += log_sum_exp(&logits) - logits[row];
    }
    Ok(total)
}

/// `l_gen + α·l_ae`.
pub fn total_loss(l_gen: f64, l_ae: f64, alpha: f64) -> Result<f64> {
    contract!(alpha >= 0.0, "alpha must be non-negative, got {alpha}");
    Ok(l_gen + alpha * l_ae)
}

/// Batch-mean softmax NLL on the graph. `z_hat` is `B×d`, `table` is
/// `R×d`, and `targets[b]` is the row of `table` for instance `b`.
pub fn gen_loss_var(g: &mut Graph, z_hat: Var, table: Var, targets: &[usize], sim: Similarity) -> Result<Var> {
    contract!(
        g.shape(z_hat)[0] == targets.len(),
        "one target per generated row required"
    );
    contract!(!targets.is_empty(), "empty batch");
    let (q, t) = match sim {
        Similarity::Inner => (z_hat, table),
        Similarity::Cosine => (g.l2_normalize_rows(z_hat)?, g.l2_normalize_rows(table)?),
    };
    let logits = g.matmul_bt(q, t)?;
    let logp = g.log_softmax_rows(logits)?;
    let picks = targets
        .iter()
        .enumerate()
        .map(|(b, &r)| g.pick(logp, b, r))
        .collect::<Result<Vec<_>>>()?;
    let sum = g.add_all(&picks)?;
    g.scale(sum, -1.0 / targets.len() as f64)
}

/// One next-item prediction: indices into the training item list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Every training position after the first predicts its item from the
/// preceding items, truncated to the `max_history` most recent.
pub fn training_instances(
    prepared: &PreparedData,
    index: &HashMap<&str, usize>,
    max_history: usize,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (u, split) in prepared.splits.users.iter().enumerate() {
        let ids = split
            .train
            .iter()
            .map(|e| {
                index
                    .get(e.item.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownItem(e.item.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        for t in 1..ids.len() {
            let start = t.saturating_sub(max_history);
            out.push(Instance {
                user: u,
                history: ids[start..t].to_vec(),
                target: ids[t],
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("training split yields no instances".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub gen: f64,
    pub ae: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SetRecModel,
    pub trace: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Largest query-vector gradient norm seen at any step.
    pub max_query_grad: f64,
}

/// Token matrices of the warm items recorded on one batch graph.
struct BatchCorpus {
    tables: Vec<Var>,
    /// `rows[k][i]`: row of `tables[k]` holding item `i`.
    rows: Vec<Vec<usize>>,
    stacked: Var,
    offsets: Vec<usize>,
    ae_loss: Option<Var>,
}

struct Trainer<'a> {
    items: Vec<String>,
    semantic: Option<Tensor>,
    cf_rows: Vec<Option<usize>>,
    config: &'a TrainConfig,
}

impl Trainer<'_> {
    fn corpus(&self, g: &mut Graph, model: &SetRecModel) -> Result<BatchCorpus> {
        let store = model.store();
        let mut tables = Vec::new();
        let mut rows = Vec::new();
        let mut ae_loss = None;
        for tag in model.dims() {
            match tag {
                DimTag::Cf => {
                    let cf = model.cf().expect("CF dimension without tokenizer");
                    let present: Vec<usize> = self.cf_rows.iter().flatten().copied().collect();
                    let z = cf.tokens_var(g, store, &present)?;
                    let default = present.len();
                    let mut next = 0;
                    let map = self
                        .cf_rows
                        .iter()
                        .map(|r| match r {
                            Some(_) => {
                                next += 1;
                                next - 1
                            }
                            None => default,
                        })
                        .collect();
                    tables.push(z);
                    rows.push(map);
                }
                DimTag::Sem(1) => {
                    let ae = model.ae().expect("semantic dimension without autoencoder");
                    let s = g.constant(self.semantic.clone().expect("semantic matrix"));
                    let z = ae.encode_var(g, store, s)?;
                    ae_loss = Some(ae.reconstruction_var(g, store, s, z)?);
                    let d = self.config.d;
                    for k in 0..ae.config().n_tokens {
                        tables.push(g.slice_cols(z, k * d, (k + 1) * d)?);
                        rows.push((0..self.items.len()).collect());
                    }
                }
                DimTag::Sem(_) => {}
            }
        }
        let mut offsets = Vec::with_capacity(tables.len());
        let mut acc = 0;
        for &t in &tables {
            offsets.push(acc);
            acc += g.shape(t)[0];
        }
        let stacked = g.concat_rows(&tables)?;
        Ok(BatchCorpus {
            tables,
            rows,
            stacked,
            offsets,
            ae_loss,
        })
    }

    /// Record the joint loss of one batch; returns `(total, gen, ae)`.
    fn batch_loss(
        &self,
        g: &mut Graph,
        model: &SetRecModel,
        batch: &[&Instance],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Option<Var>)> {
        let bc = self.corpus(g, model)?;
        let m = model.m();
        let mut outs = Vec::with_capacity(batch.len());
        for inst in batch {
            let idx: Vec<usize> = inst
                .history
                .iter()
                .flat_map(|&i| (0..m).map(move |k| (k, i)))
                .map(|(k, i)| bc.offsets[k] + bc.rows[k][i])
                .collect();
            let hist = g.gather_rows(bc.stacked, &idx)?;
            outs.push(model.forward_var(g, hist, inst.history.len())?);
        }
        let mut per_dim = Vec::with_capacity(m);
        for k in 0..m {
            let slots = outs
                .iter()
                .map(|&o| g.slice_rows(o, k, k + 1))
                .collect::<Result<Vec<_>>>()?;
            let z_hat = g.concat_rows(&slots)?;
            let targets: Vec<usize> = batch.iter().map(|inst| bc.rows[k][inst.target]).collect();
            let table = bc.tables[k];
            let n_rows = g.shape(table)[0];
            let neg = self.config.sampled_negatives;
            let loss = if neg > 0 && neg + targets.len() < n_rows {
                let mut keep: BTreeSet<usize> = targets.iter().copied().collect();
                keep.extend(index::sample(rng, n_rows, neg));
                let keep: Vec<usize> = keep.into_iter().collect();
                let pos: HashMap<usize, usize> = keep.iter().enumerate().map(|(p, &r)| (r, p)).collect();
                let sub = g.gather_rows(table, &keep)?;
                let t: Vec<usize> = targets.iter().map(|r| pos[r]).collect();
                gen_loss_var(g, z_hat, sub, &t, self.config.similarity)?
            } else {
                gen_loss_var(g, z_hat, table, &targets, self.config.similarity)?
            };
            per_dim.push(loss);
        }
        let gen = g.add_all(&per_dim)?;
        let total = match bc.ae_loss {
            Some(ae) if self.config.alpha > 0.0 => {
                let w = g.scale(ae, self.config.alpha)?;
                g.add(gen, w)?
            }
            _ => gen,
        };
        Ok((total, gen, bc.ae_loss))
    }
}

/// [`train_with`] without an epoch callback.
pub fn train(prepared: &PreparedData, cf_table: Option<&CfTable>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(prepared, cf_table, config, |_, _| Ok(Control::Continue))
}

/// Optimize tokenizers, queries and encoder jointly with Adam. `on_epoch`
/// sees the stats and model after every epoch and may stop training.
pub fn train_with(
    prepared: &PreparedData,
    cf_table: Option<&CfTable>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &SetRecModel) -> Result<Control>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = SetRecModel::new(config.clone(), prepared.d_sem(), cf_table)?;
    let items: Vec<String> = prepared.warm.iter().cloned().collect();
    if items.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let instances = training_instances(prepared, &index, config.max_history)?;
    let semantic = if config.use_semantic() {
        let rows = items
            .iter()
            .map(|id| {
                prepared
                    .semantic
                    .get(id)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::Data(format!("item `{id}` has no semantic vector")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::from_rows(&rows)?)
    } else {
        None
    };
    let cf_rows = match model.cf() {
        Some(cf) => items.iter().map(|id| cf.table_row(id)).collect(),
        None => vec![None; items.len()],
    };
    let trainer = Trainer {
        items,
        semantic,
        cf_rows,
        config,
    };
    log::info!(
        "training on {} instances over {} warm items, dims {:?}",
        instances.len(),
        trainer.items.len(),
        model.dims()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_e71d);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<&Instance> = instances.iter().collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;
    let mut max_query_grad = 0.0f64;
    let queries = model.queries_id();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut gen_sum, mut ae_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let (total, gen, ae) = trainer.batch_loss(&mut g, &model, batch, &mut rng)?;
            let w = batch.len() as f64;
            gen_sum += g.value(gen).data()[0] * w;
            ae_sum += ae.map_or(0.0, |a| g.value(a).data()[0]) * w;
            total_sum += g.value(total).data()[0] * w;
            g.backward(total)?;
            let store = model.store_mut();
            store.accumulate(&g);
            if let Some(qg) = store.get(queries).grad() {
                max_query_grad = max_query_grad.max(qg.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            store.clip_grad_norm(config.clip_norm);
            adam.step(store);
        }
        let n = instances.len() as f64;
        let stats = EpochStats {
            epoch,
            gen: gen_sum / n,
            ae: ae_sum / n,
            total: total_sum / n,
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        log::debug!(
            "epoch {epoch}: total {:.6} gen {:.6} ae {:.6}",
            stats.total,
            stats.gen,
            stats.ae
        );
        trace.push(stats);
        if on_epoch(&stats, &model)? == Control::Stop {
            stopped_early = epoch < config.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        stopped_early,
        max_query_grad,
    })
}
