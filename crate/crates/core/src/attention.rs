//! Mask-driven transformer encoder.
//!
//! Visibility is carried entirely by an [`AttentionMask`]: the sparse
//! set-identifier mask, a plain causal mask for token-sequence baselines,
//! or the history-visible mask used by the attention ablation. Masked
//! logits are set to `MASKED_LOGIT` before the row softmax, which drives
//! their weights to exactly zero.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const MASKED_LOGIT: f64 = -1e30;

/// Shape of a flattened set-identifier sequence: `items` history items of
/// `tokens_per_item` tokens each, followed by `tokens_per_item` query slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskLayout {
    pub items: usize,
    pub tokens_per_item: usize,
}

impl MaskLayout {
    pub fn history_len(&self) -> usize {
        self.items * self.tokens_per_item
    }

    pub fn seq_len(&self) -> usize {
        self.history_len() + self.tokens_per_item
    }
}

/// Square boolean visibility matrix; `allows(q, k)` means query position
/// `q` may attend to key position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
    layout: Option<MaskLayout>,
}

/// The set-identifier mask. Alias kept for readability at call sites.
pub type SparseAttentionMask = AttentionMask;

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; size * size];
        for q in 0..size {
            for k in 0..size {
                allowed[q * size + k] = f(q, k);
            }
        }
        Self {
            size,
            allowed,
            layout: None,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn layout(&self) -> Option<MaskLayout> {
        self.layout
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    /// Extend with `total - size` padding positions that see nothing and
    /// are seen by nothing.
    pub fn pad_to(&self, total: usize) -> Result<Self> {
        contract!(total >= self.size, "cannot pad a {}-mask down to {total}", self.size);
        let mut out = Self::from_fn(total, |q, k| q < self.size && k < self.size && self.allows(q, k));
        out.layout = self.layout;
        Ok(out)
    }

    /// Additive bias: 0 where visible, `MASKED_LOGIT` elsewhere.
    pub fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_LOGIT })
            .collect();
        Tensor::matrix(self.size, self.size, data).expect("square mask")
    }
}

fn sparse_rule(layout: MaskLayout, q: usize, k: usize) -> bool {
    let m = layout.tokens_per_item;
    let hist = layout.history_len();
    if q == k {
        return true;
    }
    if k >= hist {
        // Query slots are invisible to everyone but themselves.
        return false;
    }
    if q >= hist {
        return true;
    }
    k / m < q / m
}

/// Sparse set-identifier mask for `items` history items of
/// `tokens_per_item` tokens plus the same number of query slots.
pub fn build_sparse_mask(items: usize, tokens_per_item: usize) -> Result<SparseAttentionMask> {
    contract!(items >= 1, "sparse mask needs at least one history item");
    contract!(tokens_per_item >= 1, "sparse mask needs at least one token per item");
    let layout = MaskLayout { items, tokens_per_item };
    let mut mask = AttentionMask::from_fn(layout.seq_len(), |q, k| sparse_rule(layout, q, k));
    mask.layout = Some(layout);
    Ok(mask)
}

/// Like the sparse mask, but sibling tokens of one history item see each
/// other. Queries stay mutually independent.
pub fn build_history_visible_mask(items: usize, tokens_per_item: usize) -> Result<AttentionMask> {
    contract!(
        items >= 1 && tokens_per_item >= 1,
        "mask needs items >= 1 and tokens >= 1"
    );
    let layout = MaskLayout { items, tokens_per_item };
    let hist = layout.history_len();
    let m = tokens_per_item;
    let mut mask = AttentionMask::from_fn(layout.seq_len(), |q, k| {
        if q == k {
            true
        } else if k >= hist {
            false
        } else {
            q >= hist || k / m <= q / m
        }
    });
    mask.layout = Some(layout);
    Ok(mask)
}

/// Lower-triangular (including the diagonal) mask of size `len`.
pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    contract!(len >= 1, "causal mask needs length >= 1");
    Ok(AttentionMask::from_fn(len, |q, k| k <= q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    /// Longest flattened sequence accepted by `encode`.
    pub max_seq: usize,
    /// Number of learned position ids.
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.ffn_mult == 0 || self.max_seq == 0 || self.max_positions == 0 {
            return Err(Error::Config(format!("encoder sizes must be >= 1: {self:?}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Multiply-accumulates of one attention layer over `seq_len` tokens:
/// the Q/K/V/output projections plus the score and weighted-value products.
/// The head count does not change the total.
pub fn count_attention_macs(seq_len: usize, d: usize, heads: usize) -> u64 {
    let _ = heads;
    let (t, d) = (seq_len as u64, d as u64);
    let projections = 4 * t * d * d;
    let scores = t * t * d;
    let weighted_values = t * t * d;
    projections + scores + weighted_values
}

#[derive(Debug, Clone)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm transformer encoder with learned position embeddings.
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    pos: ParamId,
    layers: Vec<LayerParams>,
    final_ln: Option<(ParamId, ParamId)>,
    macs: AtomicU64,
    passes: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            pos: self.pos,
            layers: self.layers.clone(),
            final_ln: self.final_ln,
            macs: AtomicU64::new(self.macs()),
            passes: AtomicU64::new(self.passes()),
        }
    }
}

impl Encoder {
    /// Register a fresh encoder's parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let hidden = d * config.ffn_mult;
        let w_std = 1.0 / (d as f64).sqrt();
        let pos = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(&[config.max_positions, d], 0.1, rng),
            true,
        )?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("{prefix}.l{l}.{s}");
            let ones = Tensor::new(vec![d], vec![1.0; d])?;
            layers.push(LayerParams {
                ln1_g: store.add(p("ln1.g"), ones.clone(), true)?,
                ln1_b: store.add(p("ln1.b"), Tensor::zeros(&[d]), true)?,
                wq: store.add(p("wq"), Tensor::randn(&[d, d], w_std, rng), true)?,
                bq: store.add(p("bq"), Tensor::zeros(&[d]), true)?,
                wk: store.add(p("wk"), Tensor::randn(&[d, d], w_std, rng), true)?,
                bk: store.add(p("bk"), Tensor::zeros(&[d]), true)?,
                wv: store.add(p("wv"), Tensor::randn(&[d, d], w_std, rng), true)?,
                bv: store.add(p("bv"), Tensor::zeros(&[d]), true)?,
                wo: store.add(p("wo"), Tensor::randn(&[d, d], w_std, rng), true)?,
                bo: store.add(p("bo"), Tensor::zeros(&[d]), true)?,
                ln2_g: store.add(p("ln2.g"), ones, true)?,
                ln2_b: store.add(p("ln2.b"), Tensor::zeros(&[d]), true)?,
                w1: store.add(p("w1"), Tensor::randn(&[d, hidden], w_std, rng), true)?,
                b1: store.add(p("b1"), Tensor::zeros(&[hidden]), true)?,
                w2: store.add(
                    p("w2"),
                    Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
                    true,
                )?,
                b2: store.add(p("b2"), Tensor::zeros(&[d]), true)?,
            });
        }
        let final_ln = if config.layers > 0 {
            Some((
                store.add(format!("{prefix}.lnf.g"), Tensor::new(vec![d], vec![1.0; d])?, true)?,
                store.add(format!("{prefix}.lnf.b"), Tensor::zeros(&[d]), true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            config,
            pos,
            layers,
            final_ln,
            macs: AtomicU64::new(0),
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Attention multiply-accumulates performed since construction or the last reset.
    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    /// Encoder forward passes since construction or the last reset.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.macs.store(0, Ordering::Relaxed);
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Record the encoder over `x` (T×d) on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<Var> {
        self.forward_traced(g, store, x, positions, mask, None)
    }

    fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        positions: &[usize],
        mask: &AttentionMask,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let d = self.config.d;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape(
                "encode",
                &shape,
                &[shape.first().copied().unwrap_or(0), d],
            ));
        }
        let t = shape[0];
        contract!(t >= 1, "encode needs at least one position");
        contract!(
            t <= self.config.max_seq,
            "sequence of {t} exceeds max_seq {}",
            self.config.max_seq
        );
        if mask.size() != t {
            return Err(Error::shape("encode mask", &[mask.size(), mask.size()], &[t, t]));
        }
        if positions.len() != t {
            return Err(Error::shape("encode positions", &[positions.len()], &[t]));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Contract(format!(
                "position id {p} exceeds the {} learned positions",
                self.config.max_positions
            )));
        }

        let pos_table = g.param(store, self.pos);
        let pos = g.gather_rows(pos_table, positions)?;
        let mut h = g.add(x, pos)?;
        let bias = g.constant(mask.bias());
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        for lp in &self.layers {
            let p = |g: &mut Graph, id| g.param(store, id);
            let (g1, b1) = (p(g, lp.ln1_g), p(g, lp.ln1_b));
            let xn = g.layer_norm(h, g1, b1)?;
            let proj = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var> {
                let (w, b) = (g.param(store, w), g.param(store, b));
                let y = g.matmul(xn, w)?;
                g.add_row(y, b)
            };
            let q = proj(g, lp.wq, lp.bq)?;
            let k = proj(g, lp.wk, lp.bk)?;
            let v = proj(g, lp.wv, lp.bv)?;
            let mut ctx_heads = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let scores = g.matmul_bt(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let scores = g.add(scores, bias)?;
                let probs = g.softmax_rows(scores)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(g.value(probs).clone());
                }
                ctx_heads.push(g.matmul(probs, vh)?);
            }
            let ctx = if heads == 1 {
                ctx_heads[0]
            } else {
                g.concat_cols(&ctx_heads)?
            };
            let (wo, bo) = (p(g, lp.wo), p(g, lp.bo));
            let attn = g.matmul(ctx, wo)?;
            let attn = g.add_row(attn, bo)?;
            h = g.add(h, attn)?;

            let (g2, b2) = (p(g, lp.ln2_g), p(g, lp.ln2_b));
            let xn = g.layer_norm(h, g2, b2)?;
            let (w1, bb1) = (p(g, lp.w1), p(g, lp.b1));
            let f = g.matmul(xn, w1)?;
            let f = g.add_row(f, bb1)?;
            let f = g.relu(f)?;
            let (w2, bb2) = (p(g, lp.w2), p(g, lp.b2));
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, bb2)?;
            h = g.add(h, f)?;

            self.macs
                .fetch_add(count_attention_macs(t, d, heads), Ordering::Relaxed);
        }
        if let Some((fg, fb)) = self.final_ln {
            let (fg, fb) = (g.param(store, fg), g.param(store, fb));
            h = g.layer_norm(h, fg, fb)?;
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(h)
    }

    /// Value-level encode: `embeddings` is T×d, one position id per row.
    pub fn encode(
        &self,
        store: &ParamStore,
        embeddings: &Tensor,
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let out = self.forward(&mut g, store, x, positions, mask)?;
        Ok(g.value(out).clone())
    }

    /// Attention weight matrices of every layer and head (layer-major).
    pub fn attention_weights(
        &self,
        store: &ParamStore,
        embeddings: &Tensor,
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let mut trace = Vec::new();
        self.forward_traced(&mut g, store, x, positions, mask, Some(&mut trace))?;
        Ok(trace)
    }
}
