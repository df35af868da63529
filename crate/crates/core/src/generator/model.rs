use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{flatten_history_with, FlatInput, GeneratedSet, QuerySet};
use crate::attention::{Encoder, EncoderConfig};
use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{
    build_token_corpus, dimension_tags, AeConfig, CfTable, CfTokenizer, DimTag, SemanticAe, SetIdentifier, TokenCorpus,
};
use crate::training::TrainConfig;

/// Tokenizers, query vectors and encoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct SetRecModel {
    config: TrainConfig,
    d_sem: usize,
    store: ParamStore,
    encoder: Encoder,
    cf: Option<CfTokenizer>,
    ae: Option<SemanticAe>,
    queries: ParamId,
    dims: Vec<DimTag>,
}

impl SetRecModel {
    /// Fresh model seeded from `config.seed`. `cf_table` is required unless
    /// CF tokens are disabled.
    pub fn new(config: TrainConfig, d_sem: usize, cf_table: Option<&CfTable>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cf = if config.use_cf() {
            let table = cf_table.ok_or_else(|| Error::Config("CF tokens need a pretrained CF table".into()))?;
            Some(CfTokenizer::new(&mut store, table, config.d, &mut rng)?)
        } else {
            None
        };
        let ae = if config.use_semantic() {
            if d_sem == 0 {
                return Err(Error::Config("semantic tokens need d_sem >= 1".into()));
            }
            let ae_cfg = AeConfig {
                d_sem,
                n_tokens: config.n_sem,
                d: config.d,
                hidden: config.ae_hidden.clone(),
            };
            Some(SemanticAe::new(&mut store, ae_cfg, &mut rng)?)
        } else {
            None
        };
        let dims = dimension_tags(cf.is_some(), config.active_sem());
        let m = dims.len();
        let enc_cfg = EncoderConfig {
            d: config.d,
            heads: config.heads,
            layers: config.layers,
            ffn_mult: config.ffn_mult,
            max_seq: (config.max_history + 1) * m,
            max_positions: config.max_history + 1,
        };
        let encoder = Encoder::new(&mut store, "enc", enc_cfg, &mut rng)?;
        let queries = store.add(
            "queries",
            Tensor::randn(&[m, config.d], 1.0, &mut rng),
            !config.frozen_random_queries,
        )?;
        Ok(Self {
            config,
            d_sem,
            store,
            encoder,
            cf,
            ae,
            queries,
            dims,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn d_sem(&self) -> usize {
        self.d_sem
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn dims(&self) -> &[DimTag] {
        &self.dims
    }

    /// Tokens per identifier.
    pub fn m(&self) -> usize {
        self.dims.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn cf(&self) -> Option<&CfTokenizer> {
        self.cf.as_ref()
    }

    pub fn ae(&self) -> Option<&SemanticAe> {
        self.ae.as_ref()
    }

    pub fn queries_id(&self) -> ParamId {
        self.queries
    }

    pub fn query_set(&self) -> QuerySet {
        QuerySet {
            dims: self.dims.clone(),
            vectors: self.store.get(self.queries).clone(),
        }
    }

    /// Keep only the most recent `max_history` items.
    pub fn truncate<'a, T>(&self, history: &'a [T]) -> &'a [T] {
        let start = history.len().saturating_sub(self.config.max_history);
        &history[start..]
    }

    pub fn flatten(&self, history: &[SetIdentifier]) -> Result<FlatInput> {
        flatten_history_with(self.truncate(history), &self.query_set(), self.config.mask_kind())
    }

    /// Run one encoder pass over a prepared input and read the query slots.
    pub fn generate_from_flat(&self, input: &FlatInput) -> Result<GeneratedSet> {
        let out = self
            .encoder
            .encode(&self.store, &input.embeddings, &input.positions, &input.mask)?;
        let start = input.layout.history_len();
        let tokens = (0..self.m()).map(|k| out.row(start + k).to_vec()).collect();
        Ok(GeneratedSet {
            dims: self.dims.clone(),
            tokens,
        })
    }

    /// All identifier tokens of the next item in a single encoder call.
    pub fn generate_set(&self, history: &[SetIdentifier]) -> Result<GeneratedSet> {
        self.generate_from_flat(&self.flatten(history)?)
    }

    /// Generate from corpus row indices.
    pub fn generate_for(&self, corpus: &TokenCorpus, history: &[usize]) -> Result<GeneratedSet> {
        let idents: Vec<SetIdentifier> = self.truncate(history).iter().map(|&i| corpus.identifier(i)).collect();
        self.generate_set(&idents)
    }

    /// Graph-level generation: `history` is `(L·M)×d` in item-major order.
    /// Returns the `M×d` query-slot outputs.
    pub fn forward_var(&self, g: &mut Graph, history: Var, items: usize) -> Result<Var> {
        let m = self.m();
        contract!(items >= 1, "history must contain at least one item");
        contract!(
            g.shape(history)[0] == items * m,
            "history rows do not match {items} items"
        );
        let q = g.param(&self.store, self.queries);
        let x = g.concat_rows(&[history, q])?;
        let positions = super::flat_positions(items, m);
        let mask = self.config.mask_kind().build(items, m)?;
        let h = self.encoder.forward(g, &self.store, x, &positions, &mask)?;
        g.slice_rows(h, items * m, (items + 1) * m)
    }

    /// Tokenize every item of `items`. Items outside the CF table share the
    /// default CF row.
    pub fn build_corpus(&self, items: &BTreeSet<String>, semantic: &BTreeMap<String, Vec<f64>>) -> Result<TokenCorpus> {
        build_token_corpus(
            items,
            semantic,
            self.cf.as_ref(),
            self.ae.as_ref(),
            &self.store,
            self.config.d,
        )
    }

    /// Add an item to an existing corpus using only its semantic vector.
    pub fn extend_corpus(&self, corpus: &mut TokenCorpus, item: &str, semantic: &[f64]) -> Result<usize> {
        let tokens = match &self.ae {
            Some(ae) => ae.sem_encode(&self.store, semantic)?,
            None => Vec::new(),
        };
        corpus.extend_cold(item, &tokens)
    }
}
