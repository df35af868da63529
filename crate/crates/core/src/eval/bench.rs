use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_causal_mask, build_sparse_mask, Encoder, EncoderConfig};
use crate::error::{contract, Result};
use crate::generator::flat_positions;
use crate::tensor::{ParamStore, Tensor};

/// Attention cost of generating one `m`-token identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub l: usize,
    pub m: usize,
    pub d: usize,
    pub flattened_macs: u64,
    pub original_macs: u64,
    pub ratio: f64,
    pub flattened_calls: u64,
    pub original_calls: u64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "L,M,d,flattened_macs,original_macs,ratio,flattened_calls,original_calls";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{}",
            self.l,
            self.m,
            self.d,
            self.flattened_macs,
            self.original_macs,
            self.ratio,
            self.flattened_calls,
            self.original_calls
        )
    }
}

/// Run both generation schemes through a real encoder and read its counters.
///
/// Flattened: one pass over `l·m + m` tokens under the sparse mask.
/// Original: `m` passes over `l·m + 1` tokens (history plus one query)
/// under a causal mask.
pub fn bench_generation(l: usize, m: usize, d: usize, heads: usize, layers: usize, seed: u64) -> Result<BenchResult> {
    contract!(l >= 1 && m >= 1 && d >= 1, "bench needs L, M, d >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = EncoderConfig {
        d,
        heads,
        layers,
        ffn_mult: 2,
        max_seq: l * m + m,
        max_positions: l + 1,
    };
    let enc = Encoder::new(&mut store, "bench", config, &mut rng)?;
    let hist = l * m;

    let x = Tensor::randn(&[hist + m, d], 1.0, &mut rng);
    enc.reset_counters();
    enc.encode(&store, &x, &flat_positions(l, m), &build_sparse_mask(l, m)?)?;
    let (flattened_macs, flattened_calls) = (enc.macs(), enc.passes());

    let mut positions = flat_positions(l, m);
    positions.truncate(hist + 1);
    let causal = build_causal_mask(hist + 1)?;
    enc.reset_counters();
    for _ in 0..m {
        let x = Tensor::randn(&[hist + 1, d], 1.0, &mut rng);
        enc.encode(&store, &x, &positions, &causal)?;
    }
    let (original_macs, original_calls) = (enc.macs(), enc.passes());

    Ok(BenchResult {
        l,
        m,
        d,
        flattened_macs,
        original_macs,
        ratio: original_macs as f64 / flattened_macs as f64,
        flattened_calls,
        original_calls,
    })
}
