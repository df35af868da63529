//! Collaborative tokens: a pairwise implicit-feedback factorization provides
//! a frozen item table, and a trainable linear projection maps its rows to
//! the model width.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{format_semantic_vectors, parse_semantic_vectors};
use crate::error::{Error, Result};
use crate::tensor::{dot, Graph, ParamId, ParamStore, Tensor, Var};

/// Frozen item embeddings from the pretrained collaborative model, one row
/// per warm item in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct CfTable {
    items: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor,
}

impl CfTable {
    pub fn new(items: Vec<String>, table: Tensor) -> Result<Self> {
        if table.rows() != items.len() || table.shape().len() != 2 {
            return Err(Error::shape("CfTable", table.shape(), &[items.len()]));
        }
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { items, index, table })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn row(&self, item: &str) -> Result<&[f64]> {
        self.index_of(item)
            .map(|i| self.table.row(i))
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    /// Same text layout as semantic vector files; rows come back in id order.
    pub fn to_text(&self) -> String {
        let rows: BTreeMap<String, Vec<f64>> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), self.table.row(i).to_vec()))
            .collect();
        format_semantic_vectors(&rows)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = parse_semantic_vectors(text)?;
        let dim = rows.values().next().map_or(0, Vec::len);
        let items: Vec<String> = rows.keys().cloned().collect();
        let data = rows.into_values().flatten().collect();
        Self::new(items.clone(), Tensor::matrix(items.len(), dim, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BprConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 100,
            lr: 0.05,
            reg: 1e-4,
            seed: 0,
        }
    }
}

/// User and item factors from pairwise training.
#[derive(Debug, Clone)]
pub struct BprModel {
    pub items: CfTable,
    users: BTreeMap<String, Vec<f64>>,
}

impl BprModel {
    pub fn score(&self, user: &str, item: &str) -> Result<f64> {
        let u = self
            .users
            .get(user)
            .ok_or_else(|| Error::Data(format!("unknown user `{user}`")))?;
        Ok(dot(u, self.items.row(item)?))
    }

    pub fn into_table(self) -> CfTable {
        self.items
    }
}

/// Fit item embeddings so that each observed (user, item) pair outscores a
/// uniformly sampled unobserved item for the same user.
pub fn pretrain_cf(pairs: &[(String, String)], cfg: &BprConfig) -> Result<BprModel> {
    if pairs.is_empty() {
        return Err(Error::Data("no training interactions for CF pretraining".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("CF dimension must be >= 1".into()));
    }
    let items: Vec<String> = pairs
        .iter()
        .map(|(_, i)| i.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let users: Vec<String> = pairs
        .iter()
        .map(|(u, _)| u.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_ix: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let user_ix: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 0.1;
    let mut p = Tensor::randn(&[users.len(), cfg.dim], std, &mut rng).into_data();
    let mut q = Tensor::randn(&[items.len(), cfg.dim], std, &mut rng).into_data();

    let mut observed: Vec<(usize, usize)> = pairs
        .iter()
        .map(|(u, i)| (user_ix[u.as_str()], item_ix[i.as_str()]))
        .collect();
    let mut positives: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); users.len()];
    for &(u, i) in &observed {
        positives[u].insert(i);
    }

    let d = cfg.dim;
    for _ in 0..cfg.epochs {
        observed.shuffle(&mut rng);
        for &(u, i) in &observed {
            if positives[u].len() == items.len() {
                continue;
            }
            let j = loop {
                let j = rng.random_range(0..items.len());
                if !positives[u].contains(&j) {
                    break j;
                }
            };
            let pu = p[u * d..(u + 1) * d].to_vec();
            let qi = q[i * d..(i + 1) * d].to_vec();
            let qj = q[j * d..(j + 1) * d].to_vec();
            let x = dot(&pu, &qi) - dot(&pu, &qj);
            // d/dx of ln sigmoid(x)
            let s = 1.0 / (1.0 + x.exp());
            for f in 0..d {
                p[u * d + f] += cfg.lr * (s * (qi[f] - qj[f]) - cfg.reg * pu[f]);
                q[i * d + f] += cfg.lr * (s * pu[f] - cfg.reg * qi[f]);
                q[j * d + f] += cfg.lr * (-s * pu[f] - cfg.reg * qj[f]);
            }
        }
    }

    let user_map = users
        .into_iter()
        .enumerate()
        .map(|(k, u)| (u, p[k * d..(k + 1) * d].to_vec()))
        .collect();
    let n = items.len();
    Ok(BprModel {
        items: CfTable::new(items, Tensor::matrix(n, d, q)?)?,
        users: user_map,
    })
}

/// Projects frozen CF rows to the model width. Items missing from the
/// table share a trainable default row.
#[derive(Debug, Clone)]
pub struct CfTokenizer {
    items: Vec<String>,
    index: HashMap<String, usize>,
    base: ParamId,
    projection: ParamId,
    bias: ParamId,
    default_row: ParamId,
    d: usize,
}

impl CfTokenizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, table: &CfTable, d: usize, rng: &mut R) -> Result<Self> {
        let d_cf = table.dim();
        let base = store.add("cf.base", table.table().clone(), false)?;
        let projection = store.add(
            "cf.proj",
            Tensor::randn(&[d_cf, d], 1.0 / (d_cf as f64).sqrt(), rng),
            true,
        )?;
        let bias = store.add("cf.bias", Tensor::zeros(&[d]), true)?;
        let default_row = store.add("cf.default", Tensor::randn(&[1, d_cf], 0.1, rng), true)?;
        Ok(Self {
            items: table.items().to_vec(),
            index: table.index.clone(),
            base,
            projection,
            bias,
            default_row,
            d,
        })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn is_warm(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    pub fn table_row(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn projection_id(&self) -> ParamId {
        self.projection
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn base_id(&self) -> ParamId {
        self.base
    }

    pub fn default_id(&self) -> ParamId {
        self.default_row
    }

    /// Projected tokens for the given base-table rows followed by the
    /// projected default row: `(rows.len() + 1) × d`.
    pub fn tokens_var(&self, g: &mut Graph, store: &ParamStore, rows: &[usize]) -> Result<Var> {
        let base = g.param(store, self.base);
        let picked = g.gather_rows(base, rows)?;
        let default = g.param(store, self.default_row);
        let stacked = g.concat_rows(&[picked, default])?;
        let proj = g.param(store, self.projection);
        let bias = g.param(store, self.bias);
        let z = g.matmul(stacked, proj)?;
        g.add_row(z, bias)
    }

    /// CF token of one item; items outside the table use the default row.
    pub fn cf_tokenize(&self, store: &ParamStore, item: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let rows: Vec<usize> = self.table_row(item).into_iter().collect();
        let z = self.tokens_var(&mut g, store, &rows)?;
        Ok(g.value(z).row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(rows: &[(&str, &str)]) -> Vec<(String, String)> {
        rows.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect()
    }

    #[test]
    fn table_shape_and_unknown_item() {
        let m = pretrain_cf(
            &pairs(&[("u1", "a"), ("u1", "b"), ("u2", "c")]),
            &BprConfig {
                dim: 4,
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.items.table().shape(), &[3, 4]);
        assert!(matches!(m.items.row("zzz"), Err(Error::UnknownItem(_))));
        assert_eq!(CfTable::from_text(&m.items.to_text()).unwrap(), m.items);
    }

    #[test]
    fn empty_split_is_data_error() {
        assert!(matches!(pretrain_cf(&[], &BprConfig::default()), Err(Error::Data(_))));
    }

    fn tokenizer(d_cf: usize, d: usize) -> (ParamStore, CfTokenizer) {
        let mut rows = Vec::new();
        for r in 0..3 {
            let mut v = vec![0.0; d_cf];
            v[r % d_cf] = 1.0;
            rows.push(v);
        }
        let table = CfTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::from_rows(&rows).unwrap(),
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = CfTokenizer::new(&mut store, &table, d, &mut rng).unwrap();
        (store, tok)
    }

    #[test]
    fn identity_projection_extends_base_row() {
        let (mut store, tok) = tokenizer(3, 5);
        let mut eye = Tensor::zeros(&[3, 5]);
        for i in 0..3 {
            eye.data_mut()[i * 5 + i] = 1.0;
        }
        store.set("cf.proj", eye).unwrap();
        assert_eq!(tok.cf_tokenize(&store, "a").unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cold_items_share_default_token() {
        let (store, tok) = tokenizer(3, 4);
        let x = tok.cf_tokenize(&store, "new1").unwrap();
        let y = tok.cf_tokenize(&store, "new2").unwrap();
        assert_eq!(x.len(), 4);
        assert_eq!(x, y);
        assert_ne!(x, tok.cf_tokenize(&store, "a").unwrap());
    }
}
