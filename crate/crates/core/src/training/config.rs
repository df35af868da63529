use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator::{MaskKind, Similarity};
use crate::tokenizer::DEFAULT_HIDDEN;

/// Model shape, objective weights, optimizer settings and ablation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Semantic tokens per item.
    pub n_sem: usize,
    /// Token and hidden width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub ae_hidden: Vec<usize>,
    /// Histories are truncated to the most recent `max_history` items.
    pub max_history: usize,
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// Grounding mix between the CF and semantic scores.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub similarity: Similarity,
    pub average_semantic: bool,
    /// Negatives per dimension for sampled softmax; 0 uses every corpus row.
    pub sampled_negatives: usize,
    pub disable_semantic: bool,
    pub disable_cf: bool,
    pub frozen_random_queries: bool,
    pub full_attention_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_sem: 2,
            d: 64,
            heads: 2,
            layers: 2,
            ffn_mult: 2,
            ae_hidden: DEFAULT_HIDDEN.to_vec(),
            max_history: 20,
            alpha: 0.5,
            beta: 0.5,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            clip_norm: 1.0,
            similarity: Similarity::Inner,
            average_semantic: false,
            sampled_negatives: 0,
            disable_semantic: false,
            disable_cf: false,
            frozen_random_queries: false,
            full_attention_mask: false,
        }
    }
}

const KEYS: &[&str] = &[
    "n_sem",
    "d",
    "heads",
    "layers",
    "ffn_mult",
    "ae_hidden",
    "max_history",
    "alpha",
    "beta",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "clip_norm",
    "similarity",
    "average_semantic",
    "sampled_negatives",
    "disable_semantic",
    "disable_cf",
    "frozen_random_queries",
    "full_attention_mask",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn use_cf(&self) -> bool {
        !self.disable_cf
    }

    pub fn use_semantic(&self) -> bool {
        !self.disable_semantic
    }

    /// Semantic tokens actually in use.
    pub fn active_sem(&self) -> usize {
        if self.use_semantic() {
            self.n_sem
        } else {
            0
        }
    }

    pub fn mask_kind(&self) -> MaskKind {
        if self.full_attention_mask {
            MaskKind::HistoryVisible
        } else {
            MaskKind::Sparse
        }
    }

    /// β as used for grounding once ablations have removed a dimension.
    pub fn effective_beta(&self, beta: f64) -> f64 {
        match (self.use_cf(), self.use_semantic()) {
            (false, _) => 1.0,
            (_, false) => 0.0,
            _ => beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.disable_cf && self.disable_semantic {
            return bad("disabling both CF and semantic tokens leaves no identifier dimension".into());
        }
        if self.use_semantic() && self.n_sem == 0 {
            return bad("n_sem must be >= 1 unless semantic tokens are disabled".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.max_history == 0 || self.batch_size == 0 {
            return bad("ffn_mult, max_history and batch_size must be >= 1".into());
        }
        if self.ae_hidden.contains(&0) {
            return bad("ae_hidden sizes must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("lr and clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "n_sem" => self.n_sem.to_string(),
            "d" => self.d.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "ae_hidden" => self
                .ae_hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "max_history" => self.max_history.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "beta" => format!("{:?}", self.beta),
            "lr" => format!("{:?}", self.lr),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "similarity" => self.similarity.to_string(),
            "average_semantic" => b(self.average_semantic),
            "sampled_negatives" => self.sampled_negatives.to_string(),
            "disable_semantic" => b(self.disable_semantic),
            "disable_cf" => b(self.disable_cf),
            "frozen_random_queries" => b(self.frozen_random_queries),
            "full_attention_mask" => b(self.full_attention_mask),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_sem" => self.n_sem = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "ae_hidden" => {
                self.ae_hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?
                }
            }
            "max_history" => self.max_history = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "similarity" => self.similarity = value.trim().parse()?,
            "average_semantic" => self.average_semantic = parse(key, value)?,
            "sampled_negatives" => self.sampled_negatives = parse(key, value)?,
            "disable_semantic" => self.disable_semantic = parse(key, value)?,
            "disable_cf" => self.disable_cf = parse(key, value)?,
            "frozen_random_queries" => self.frozen_random_queries = parse(key, value)?,
            "full_attention_mask" => self.full_attention_mask = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key=value` lines in a fixed key order.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}
