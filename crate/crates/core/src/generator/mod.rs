//! Query-guided simultaneous generation and token-set grounding.
//!
//! A history of set identifiers is flattened item-major, the query vectors
//! are appended, and a single masked encoder pass yields one generated
//! token per dimension. Grounding scores every candidate item against the
//! per-dimension token corpora.

mod model;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::attention::{build_history_visible_mask, build_sparse_mask, AttentionMask, MaskLayout};
use crate::error::{contract, Error, Result};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::{DimTag, SetIdentifier, TokenCorpus};

pub use model::SetRecModel;

/// Similarity used both for grounding and in the generation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Inner,
    Cosine,
}

impl Similarity {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Inner => dot(a, b),
            Similarity::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Inner => "inner",
            Similarity::Cosine => "cosine",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(Similarity::Inner),
            "cosine" => Ok(Similarity::Cosine),
            _ => Err(Error::Config(format!("unknown similarity `{s}` (inner|cosine)"))),
        }
    }
}

/// Which visibility pattern the encoder uses over the flattened sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskKind {
    #[default]
    Sparse,
    /// Sibling tokens of a history item see each other.
    HistoryVisible,
}

impl MaskKind {
    pub fn build(self, items: usize, tokens_per_item: usize) -> Result<AttentionMask> {
        match self {
            MaskKind::Sparse => build_sparse_mask(items, tokens_per_item),
            MaskKind::HistoryVisible => build_history_visible_mask(items, tokens_per_item),
        }
    }
}

/// One learnable query vector per identifier dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub dims: Vec<DimTag>,
    /// `dims.len() × d`, row `k` is the query for `dims[k]`.
    pub vectors: Tensor,
}

impl QuerySet {
    pub fn new(dims: Vec<DimTag>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != dims.len() {
            return Err(Error::shape("QuerySet", vectors.shape(), &[dims.len()]));
        }
        let mut seen = dims.clone();
        seen.sort();
        seen.dedup();
        contract!(seen.len() == dims.len(), "query dimensions must be unique");
        contract!(!dims.is_empty(), "at least one query dimension required");
        Ok(Self { dims, vectors })
    }

    pub fn d(&self) -> usize {
        self.vectors.cols()
    }
}

/// Generated token per dimension, read from the query slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub dims: Vec<DimTag>,
    pub tokens: Vec<Vec<f64>>,
}

impl GeneratedSet {
    pub fn token(&self, tag: DimTag) -> Option<&[f64]> {
        self.dims
            .iter()
            .position(|&t| t == tag)
            .map(|i| self.tokens[i].as_slice())
    }
}

/// Encoder input for one history.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatInput {
    pub embeddings: Tensor,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
    pub layout: MaskLayout,
}

/// Position ids: every token of item `ℓ` gets `ℓ`, every query slot gets `L`.
pub fn flat_positions(items: usize, tokens_per_item: usize) -> Vec<usize> {
    (0..=items)
        .flat_map(|l| std::iter::repeat_n(l, tokens_per_item))
        .collect()
}

/// Lay out `history` item-major in the queries' dimension order and append
/// the query vectors.
pub fn flatten_history_with(history: &[SetIdentifier], queries: &QuerySet, mask: MaskKind) -> Result<FlatInput> {
    contract!(!history.is_empty(), "history must contain at least one item");
    let d = queries.d();
    let m = queries.dims.len();
    let n_sem = history[0].z_sem.len();
    let mut data = Vec::with_capacity((history.len() + 1) * m * d);
    for ident in history {
        if ident.z_sem.len() != n_sem {
            return Err(Error::Data(format!(
                "item `{}` has {} semantic tokens, expected {n_sem}",
                ident.item_id,
                ident.z_sem.len()
            )));
        }
        for &tag in &queries.dims {
            let tok = ident
                .token(tag)
                .ok_or_else(|| Error::Data(format!("item `{}` has no {tag} token", ident.item_id)))?;
            if tok.len() != d {
                return Err(Error::shape("flatten_history", &[tok.len()], &[d]));
            }
            data.extend_from_slice(tok);
        }
    }
    data.extend_from_slice(queries.vectors.data());
    let layout = MaskLayout {
        items: history.len(),
        tokens_per_item: m,
    };
    Ok(FlatInput {
        embeddings: Tensor::matrix(layout.seq_len(), d, data)?,
        positions: flat_positions(history.len(), m),
        mask: mask.build(history.len(), m)?,
        layout,
    })
}

/// [`flatten_history_with`] under the sparse mask.
pub fn flatten_history(history: &[SetIdentifier], queries: &QuerySet) -> Result<FlatInput> {
    flatten_history_with(history, queries, MaskKind::Sparse)
}

/// Reorder the flattened tokens of history item `item` by `perm`, keeping
/// positions and mask untouched.
pub fn permute_within_item(input: &FlatInput, item: usize, perm: &[usize]) -> Result<FlatInput> {
    let m = input.layout.tokens_per_item;
    contract!(item < input.layout.items, "item {item} outside the history");
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    contract!(sorted == (0..m).collect::<Vec<_>>(), "not a permutation of {m} tokens");
    let d = input.embeddings.cols();
    let mut data = input.embeddings.data().to_vec();
    let src = input.embeddings.data();
    for (dst, &from) in perm.iter().enumerate() {
        let (a, b) = ((item * m + dst) * d, (item * m + from) * d);
        data[a..a + d].copy_from_slice(&src[b..b + d]);
    }
    Ok(FlatInput {
        embeddings: Tensor::matrix(input.embeddings.rows(), d, data)?,
        ..input.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingOptions {
    pub beta: f64,
    pub similarity: Similarity,
    /// Average instead of sum the semantic scores.
    pub average_semantic: bool,
}

impl GroundingOptions {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            similarity: Similarity::Inner,
            average_semantic: false,
        }
    }
}

/// Mix per-dimension scores: `(1−β)·s_CF + β·Σ_k s_Sk`. Dimensions missing
/// from `gen` contribute zero.
pub fn ground_scores(
    gen: &GeneratedSet,
    corpus: &TokenCorpus,
    opts: &GroundingOptions,
    candidates: Option<&[usize]>,
) -> Result<Vec<(usize, f64)>> {
    let beta = opts.beta;
    contract!((0.0..=1.0).contains(&beta), "beta must lie in [0, 1], got {beta}");
    for (tag, tok) in gen.dims.iter().zip(&gen.tokens) {
        if corpus.matrix(*tag).is_none() {
            return Err(Error::Data(format!("corpus has no {tag} dimension")));
        }
        if tok.len() != corpus.d() {
            return Err(Error::shape("ground_scores", &[tok.len()], &[corpus.d()]));
        }
    }
    let all: Vec<usize>;
    let cands = match candidates {
        Some(c) => c,
        None => {
            all = (0..corpus.len()).collect();
            &all
        }
    };
    let n_sem = gen.dims.iter().filter(|t| matches!(t, DimTag::Sem(_))).count();
    let sem_weight = if opts.average_semantic && n_sem > 0 {
        beta / n_sem as f64
    } else {
        beta
    };
    let mut out = Vec::with_capacity(cands.len());
    for &idx in cands {
        if idx >= corpus.len() {
            return Err(Error::Contract(format!("candidate {idx} outside the corpus")));
        }
        let mut cf = 0.0;
        let mut sem = 0.0;
        for (tag, tok) in gen.dims.iter().zip(&gen.tokens) {
            let row = corpus.token(*tag, idx).expect("checked dimension");
            let s = opts.similarity.eval(tok, row);
            match tag {
                DimTag::Cf => cf += s,
                DimTag::Sem(_) => sem += s,
            }
        }
        out.push((idx, (1.0 - beta) * cf + sem_weight * sem));
    }
    Ok(out)
}

/// Sort by score descending, ties by ascending id, and keep `k`.
pub fn rank_topk<I: Ord + Clone>(scores: &[(I, f64)], k: usize) -> Vec<I> {
    let mut v: Vec<&(I, f64)> = scores.iter().collect();
    v.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    v.into_iter().take(k).map(|(i, _)| i.clone()).collect()
}

/// 1-based rank of `target` under the [`rank_topk`] ordering.
pub fn rank_of<I: Ord>(scores: &[(I, f64)], target: &I) -> Option<usize> {
    let ts = scores.iter().find(|(i, _)| i == target)?.1;
    let ahead = scores
        .iter()
        .filter(|(i, s)| *s > ts || (*s == ts && i < target))
        .count();
    Some(ahead + 1)
}
