//! Per-dimension token matrices that double as grounding heads.
//!
//! Binary layout (`STCORP1`, all integers little-endian `u32`):
//!
//! ```text
//! "STCORP1"  token_width  dimension_count
//! per dimension: tag (len + UTF-8, "CF" or "S<n>"), rows, dim, rows×dim f64 LE
//! item index: count, then per item len + UTF-8 id
//! CF row map (only when a CF dimension exists): count, then one row per item
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{CfTokenizer, SemanticAe};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor};

const MAGIC: &[u8; 7] = b"STCORP1";

/// One information dimension of a set identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimTag {
    Cf,
    /// Semantic token, numbered from 1.
    Sem(usize),
}

impl fmt::Display for DimTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimTag::Cf => write!(f, "CF"),
            DimTag::Sem(n) => write!(f, "S{n}"),
        }
    }
}

impl FromStr for DimTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "CF" {
            return Ok(DimTag::Cf);
        }
        s.strip_prefix('S')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(DimTag::Sem)
            .ok_or_else(|| Error::Format(format!("bad dimension tag `{s}`")))
    }
}

/// Canonical dimension order `[CF, S1, …, SN]` with optional parts removed.
pub fn dimension_tags(with_cf: bool, n_sem: usize) -> Vec<DimTag> {
    let mut v = Vec::with_capacity(n_sem + 1);
    if with_cf {
        v.push(DimTag::Cf);
    }
    v.extend((1..=n_sem).map(DimTag::Sem));
    v
}

/// An item's unordered token set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetIdentifier {
    pub item_id: String,
    pub z_cf: Option<Vec<f64>>,
    pub z_sem: Vec<Vec<f64>>,
}

impl SetIdentifier {
    pub fn dims(&self) -> Vec<DimTag> {
        dimension_tags(self.z_cf.is_some(), self.z_sem.len())
    }

    /// Tokens in canonical order.
    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.z_cf
            .iter()
            .map(Vec::as_slice)
            .chain(self.z_sem.iter().map(Vec::as_slice))
    }

    pub fn token(&self, tag: DimTag) -> Option<&[f64]> {
        match tag {
            DimTag::Cf => self.z_cf.as_deref(),
            DimTag::Sem(n) => self.z_sem.get(n.wrapping_sub(1)).map(Vec::as_slice),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CfDimension {
    /// Warm rows followed by the default row.
    matrix: Tensor,
    row_of: Vec<usize>,
}

impl CfDimension {
    fn default_row(&self) -> usize {
        self.matrix.rows() - 1
    }
}

/// Token matrices `Z_k` for every dimension plus the item index.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    d: usize,
    items: Vec<String>,
    index: HashMap<String, usize>,
    cf: Option<CfDimension>,
    sem: Vec<Tensor>,
}

impl TokenCorpus {
    fn assemble(d: usize, items: Vec<String>, cf: Option<CfDimension>, sem: Vec<Tensor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, id) in items.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("item `{id}` appears twice in the corpus")));
            }
        }
        for m in &sem {
            if m.rows() != items.len() || m.cols() != d {
                return Err(Error::shape("TokenCorpus semantic", m.shape(), &[items.len(), d]));
            }
        }
        if let Some(cf) = &cf {
            if cf.matrix.cols() != d || cf.row_of.len() != items.len() {
                return Err(Error::shape("TokenCorpus CF", cf.matrix.shape(), &[items.len(), d]));
            }
            if cf.row_of.iter().any(|&r| r >= cf.matrix.rows()) {
                return Err(Error::Format("CF row map out of range".into()));
            }
        }
        if cf.is_none() && sem.is_empty() {
            return Err(Error::Config("a corpus needs at least one dimension".into()));
        }
        Ok(Self {
            d,
            items,
            index,
            cf,
            sem,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn item_id(&self, idx: usize) -> &str {
        &self.items[idx]
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn dims(&self) -> Vec<DimTag> {
        dimension_tags(self.cf.is_some(), self.sem.len())
    }

    pub fn n_sem(&self) -> usize {
        self.sem.len()
    }

    pub fn has_cf(&self) -> bool {
        self.cf.is_some()
    }

    /// The stacked token matrix of a dimension. For CF this holds one row per
    /// warm item plus a trailing default row.
    pub fn matrix(&self, tag: DimTag) -> Option<&Tensor> {
        match tag {
            DimTag::Cf => self.cf.as_ref().map(|c| &c.matrix),
            DimTag::Sem(n) => self.sem.get(n.wrapping_sub(1)),
        }
    }

    /// Row of `matrix(tag)` that holds item `idx`'s token.
    pub fn row_index(&self, tag: DimTag, idx: usize) -> Option<usize> {
        match tag {
            DimTag::Cf => self.cf.as_ref().map(|c| c.row_of[idx]),
            DimTag::Sem(n) if n >= 1 && n <= self.sem.len() => Some(idx),
            DimTag::Sem(_) => None,
        }
    }

    pub fn token(&self, tag: DimTag, idx: usize) -> Option<&[f64]> {
        let row = self.row_index(tag, idx)?;
        self.matrix(tag).map(|m| m.row(row))
    }

    /// Whether item `idx` uses the shared default CF row.
    pub fn uses_default_cf(&self, idx: usize) -> bool {
        self.cf.as_ref().is_some_and(|c| c.row_of[idx] == c.default_row())
    }

    pub fn identifier(&self, idx: usize) -> SetIdentifier {
        SetIdentifier {
            item_id: self.items[idx].clone(),
            z_cf: self.token(DimTag::Cf, idx).map(<[f64]>::to_vec),
            z_sem: self.sem.iter().map(|m| m.row(idx).to_vec()).collect(),
        }
    }

    pub fn identifier_of(&self, item: &str) -> Result<SetIdentifier> {
        self.index_of(item)
            .map(|i| self.identifier(i))
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    /// Append an item that has no collaborative signal. Only the semantic
    /// matrices and the item index grow; it shares the default CF row.
    pub fn extend_cold(&mut self, item: &str, sem_tokens: &[Vec<f64>]) -> Result<usize> {
        if self.index.contains_key(item) {
            return Err(Error::Data(format!("item `{item}` already in the corpus")));
        }
        if sem_tokens.len() != self.sem.len() {
            return Err(Error::shape("extend_cold", &[sem_tokens.len()], &[self.sem.len()]));
        }
        if let Some(t) = sem_tokens.iter().find(|t| t.len() != self.d) {
            return Err(Error::shape("extend_cold", &[t.len()], &[self.d]));
        }
        for (m, tok) in self.sem.iter_mut().zip(sem_tokens) {
            let mut data = std::mem::replace(m, Tensor::scalar(0.0)).into_data();
            data.extend_from_slice(tok);
            *m = Tensor::matrix(data.len() / self.d, self.d, data)?;
        }
        if let Some(cf) = &mut self.cf {
            let def = cf.default_row();
            cf.row_of.push(def);
        }
        let idx = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), idx);
        Ok(idx)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        fn u32le(w: &mut impl Write, v: usize) -> std::io::Result<()> {
            w.write_all(&(v as u32).to_le_bytes())
        }
        fn string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
            u32le(w, s.len())?;
            w.write_all(s.as_bytes())
        }
        w.write_all(MAGIC)?;
        u32le(&mut w, self.d)?;
        let dims = self.dims();
        u32le(&mut w, dims.len())?;
        for tag in &dims {
            let m = self.matrix(*tag).expect("listed dimension");
            string(&mut w, &tag.to_string())?;
            u32le(&mut w, m.rows())?;
            u32le(&mut w, m.cols())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        u32le(&mut w, self.items.len())?;
        for id in &self.items {
            string(&mut w, id)?;
        }
        if let Some(cf) = &self.cf {
            u32le(&mut w, cf.row_of.len())?;
            for &r in &cf.row_of {
                u32le(&mut w, r)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt_err = |e: std::io::Error| Error::Format(format!("corpus file truncated: {e}"));
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(Error::Format("missing STCORP1 magic".into()));
        }
        let u32r = |r: &mut dyn Read| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(fmt_err)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let read_string = |r: &mut dyn Read, len: usize| -> Result<String> {
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(fmt_err)?;
            String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in corpus".into()))
        };
        let d = u32r(&mut r)?;
        let n_dims = u32r(&mut r)?;
        let mut cf_matrix = None;
        let mut sem = BTreeMap::new();
        for _ in 0..n_dims {
            let len = u32r(&mut r)?;
            let tag: DimTag = read_string(&mut r, len)?.parse()?;
            let rows = u32r(&mut r)?;
            let cols = u32r(&mut r)?;
            let mut data = vec![0.0; rows * cols];
            let mut b = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b).map_err(fmt_err)?;
                *v = f64::from_le_bytes(b);
            }
            let m = Tensor::matrix(rows, cols, data)?;
            match tag {
                DimTag::Cf => cf_matrix = Some(m),
                DimTag::Sem(n) => {
                    sem.insert(n, m);
                }
            }
        }
        let n_items = u32r(&mut r)?;
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let len = u32r(&mut r)?;
            items.push(read_string(&mut r, len)?);
        }
        let cf = match cf_matrix {
            Some(matrix) => {
                let n = u32r(&mut r)?;
                let row_of = (0..n).map(|_| u32r(&mut r)).collect::<Result<Vec<_>>>()?;
                Some(CfDimension { matrix, row_of })
            }
            None => None,
        };
        if sem.keys().copied().ne(1..=sem.len()) {
            return Err(Error::Format("semantic dimensions must be S1..SN".into()));
        }
        Self::assemble(d, items, cf, sem.into_values().collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }

    /// Build directly from token matrices, e.g. for fixtures.
    ///
    /// `cf` holds one row per item in `items`; cold items may simply
    /// repeat a row, they are not deduplicated.
    pub fn from_matrices(items: Vec<String>, cf: Option<Tensor>, sem: Vec<Tensor>) -> Result<Self> {
        let d = cf.as_ref().or(sem.first()).map_or(0, Tensor::cols);
        let cf = match cf {
            Some(m) => {
                let n = m.rows();
                let mut data = m.into_data();
                // Trailing zero default row keeps the CF layout uniform.
                data.extend(std::iter::repeat_n(0.0, d));
                Some(CfDimension {
                    matrix: Tensor::matrix(n + 1, d, data)?,
                    row_of: (0..n).collect(),
                })
            }
            None => None,
        };
        Self::assemble(d, items, cf, sem)
    }
}

/// Tokenize every item. Semantic matrices cover all `items`; the CF matrix
/// holds rows for items known to the CF tokenizer plus the default row,
/// which every other item points at.
pub fn build_token_corpus(
    items: &BTreeSet<String>,
    semantic: &BTreeMap<String, Vec<f64>>,
    cf: Option<&CfTokenizer>,
    ae: Option<&SemanticAe>,
    store: &ParamStore,
    d: usize,
) -> Result<TokenCorpus> {
    let ids: Vec<String> = items.iter().cloned().collect();
    let mut g = Graph::new();

    let cf_dim = match cf {
        Some(tok) => {
            let warm: Vec<(usize, usize)> = ids
                .iter()
                .enumerate()
                .filter_map(|(i, id)| tok.table_row(id).map(|r| (i, r)))
                .collect();
            let rows: Vec<usize> = warm.iter().map(|&(_, r)| r).collect();
            let z = tok.tokens_var(&mut g, store, &rows)?;
            let default = warm.len();
            let mut row_of = vec![default; ids.len()];
            for (k, &(i, _)) in warm.iter().enumerate() {
                row_of[i] = k;
            }
            Some(CfDimension {
                matrix: g.value(z).clone(),
                row_of,
            })
        }
        None => None,
    };

    let sem = match ae {
        Some(ae) => {
            let mut rows = Vec::with_capacity(ids.len());
            for id in &ids {
                let v = semantic
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("item `{id}` has no semantic vector")))?;
                rows.push(v.as_slice());
            }
            let s = g.constant(Tensor::from_rows(&rows)?);
            let z = ae.encode_var(&mut g, store, s)?;
            let n = ae.config().n_tokens;
            let mut mats = Vec::with_capacity(n);
            for k in 0..n {
                let part = g.slice_cols(z, k * d, (k + 1) * d)?;
                mats.push(g.value(part).clone());
            }
            mats
        }
        None => Vec::new(),
    };
    TokenCorpus::assemble(d, ids, cf_dim, sem)
}
