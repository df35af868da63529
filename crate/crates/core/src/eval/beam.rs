//! Autoregressive token-sequence baseline: conditional tables decoded by
//! beam search, compared against exhaustive enumeration.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{contract, Error, Result};

/// Largest sequence space `global_search` will enumerate.
pub const MAX_GLOBAL: usize = 1_000_000;

/// `p(token_t | prefix)` for every prefix of length `t < len`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineDecoder {
    vocab: usize,
    len: usize,
    /// `tables[t]` holds `vocab^t` rows of `vocab` probabilities; the row of
    /// a prefix is its base-`vocab` value.
    tables: Vec<Vec<f64>>,
}

fn by_prob(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

impl BaselineDecoder {
    pub fn new(vocab: usize, len: usize, tables: Vec<Vec<f64>>) -> Result<Self> {
        contract!(vocab >= 1 && len >= 1, "decoder needs vocab >= 1 and len >= 1");
        contract!(tables.len() == len, "need one table per step");
        for (t, table) in tables.iter().enumerate() {
            let rows = vocab.pow(t as u32);
            if table.len() != rows * vocab {
                return Err(Error::shape("BaselineDecoder", &[table.len()], &[rows * vocab]));
            }
            for (r, row) in table.chunks(vocab).enumerate() {
                let s: f64 = row.iter().sum();
                contract!(
                    row.iter().all(|&p| p >= 0.0) && (s - 1.0).abs() < 1e-9,
                    "step {t} row {r} is not a distribution (sum {s})"
                );
            }
        }
        Ok(Self { vocab, len, tables })
    }

    /// Every conditional drawn from a symmetric Dirichlet with the given
    /// concentration.
    pub fn random(vocab: usize, len: usize, concentration: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(format!("concentration: {e}")))?;
        let mut tables = Vec::with_capacity(len);
        for t in 0..len {
            let rows = vocab.pow(t as u32);
            let mut table = Vec::with_capacity(rows * vocab);
            for _ in 0..rows {
                let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                table.extend(row);
            }
            tables.push(table);
        }
        Self::new(vocab, len, tables)
    }

    /// Two steps over tokens {0, 1}: the greedy prefix 0 ends at 0.30 while
    /// the best sequence (1, 1) has 0.36.
    pub fn counterexample() -> Self {
        Self::new(2, 2, vec![vec![0.6, 0.4], vec![0.5, 0.5, 0.1, 0.9]]).expect("valid tables")
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Conditional distribution after `prefix`.
    pub fn conditional(&self, prefix: &[usize]) -> &[f64] {
        let row = prefix.iter().fold(0, |acc, &tok| acc * self.vocab + tok);
        let v = self.vocab;
        &self.tables[prefix.len()][row * v..(row + 1) * v]
    }

    pub fn sequence_prob(&self, seq: &[usize]) -> f64 {
        (0..seq.len()).map(|t| self.conditional(&seq[..t])[seq[t]]).product()
    }

    /// Keep the `k` most probable prefixes at every step. Ties go to the
    /// lexicographically smaller sequence.
    pub fn beam_search(&self, k: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        contract!(k >= 1, "beam width must be >= 1");
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for _ in 0..self.len {
            let mut next = Vec::with_capacity(beams.len() * self.vocab);
            for (prefix, p) in &beams {
                for (tok, &q) in self.conditional(prefix).iter().enumerate() {
                    let mut s = prefix.clone();
                    s.push(tok);
                    next.push((s, p * q));
                }
            }
            next.sort_by(by_prob);
            next.truncate(k);
            beams = next;
        }
        Ok(beams)
    }

    /// Every full sequence with its probability, most probable first.
    pub fn global_search(&self) -> Result<Vec<(Vec<usize>, f64)>> {
        let total = (self.vocab as u128).pow(self.len as u32);
        contract!(
            total <= MAX_GLOBAL as u128,
            "{total} sequences exceed the enumeration limit {MAX_GLOBAL}"
        );
        let total = total as usize;
        let mut all = Vec::with_capacity(total);
        for code in 0..total {
            let mut seq = vec![0; self.len];
            let mut c = code;
            for slot in seq.iter_mut().rev() {
                *slot = c % self.vocab;
                c /= self.vocab;
            }
            let p = self.sequence_prob(&seq);
            all.push((seq, p));
        }
        all.sort_by(by_prob);
        Ok(all)
    }
}

/// Recall@1 of beam search at one width over many decoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamStudyRow {
    pub k: usize,
    pub beam_recall: f64,
    pub global_recall: f64,
    /// Decoders where beam search missed the most probable sequence.
    pub misses: usize,
}

/// Run `decoders` seeded random decoders and compare beam search at each
/// width against the exhaustive ranking. Decoder `i` uses seed `seed + i`.
pub fn local_optima_study(
    decoders: usize,
    vocab: usize,
    len: usize,
    widths: &[usize],
    seed: u64,
) -> Result<Vec<BeamStudyRow>> {
    contract!(decoders >= 1, "need at least one decoder");
    let mut hits = vec![0usize; widths.len()];
    let mut global_hits = 0usize;
    for i in 0..decoders {
        let dec = BaselineDecoder::random(vocab, len, 0.5, seed.wrapping_add(i as u64))?;
        let global = dec.global_search()?;
        let best = &global[0].0;
        global_hits += 1;
        for (w, &k) in widths.iter().enumerate() {
            if &dec.beam_search(k)?[0].0 == best {
                hits[w] += 1;
            }
        }
    }
    let n = decoders as f64;
    Ok(widths
        .iter()
        .zip(hits)
        .map(|(&k, h)| BeamStudyRow {
            k,
            beam_recall: h as f64 / n,
            global_recall: global_hits as f64 / n,
            misses: decoders - h,
        })
        .collect())
}
