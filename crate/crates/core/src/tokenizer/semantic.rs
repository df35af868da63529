//! Unified autoencoder that compresses one semantic feature vector into
//! `N` continuous tokens and reconstructs it back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 128];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeConfig {
    pub d_sem: usize,
    pub n_tokens: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
}

impl AeConfig {
    pub fn latent(&self) -> usize {
        self.n_tokens * self.d
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_sem];
        dims.extend(&self.hidden);
        dims.push(self.latent());
        dims
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder_dims();
        dims.reverse();
        dims
    }

    /// Weights plus biases of a stack of dense layers.
    fn dense_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        Self::dense_params(&self.encoder_dims()) + Self::dense_params(&self.decoder_dims())
    }

    /// Parameters needed by `N` separate autoencoders that each emit a
    /// single `d`-wide token with the same hidden stack.
    pub fn independent_param_count(&self) -> usize {
        let single = AeConfig {
            n_tokens: 1,
            ..self.clone()
        };
        self.n_tokens * single.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct SemanticAe {
    config: AeConfig,
    encoder: Vec<(ParamId, ParamId)>,
    decoder: Vec<(ParamId, ParamId)>,
}

fn dense_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    rng: &mut R,
) -> Result<Vec<(ParamId, ParamId)>> {
    dims.windows(2)
        .enumerate()
        .map(|(l, w)| {
            // He initialization suits the ReLU hidden layers.
            let std = (2.0 / w[0] as f64).sqrt();
            let wid = store.add(format!("{prefix}.{l}.w"), Tensor::randn(&[w[0], w[1]], std, rng), true)?;
            let bid = store.add(format!("{prefix}.{l}.b"), Tensor::zeros(&[w[1]]), true)?;
            Ok((wid, bid))
        })
        .collect()
}

fn run_stack(g: &mut Graph, store: &ParamStore, layers: &[(ParamId, ParamId)], mut x: Var) -> Result<Var> {
    for (l, &(w, b)) in layers.iter().enumerate() {
        let (w, b) = (g.param(store, w), g.param(store, b));
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        if l + 1 < layers.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

impl SemanticAe {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: AeConfig, rng: &mut R) -> Result<Self> {
        if config.d_sem == 0 || config.n_tokens == 0 || config.d == 0 || config.hidden.contains(&0) {
            return Err(Error::Config(format!("autoencoder sizes must be >= 1: {config:?}")));
        }
        let encoder = dense_stack(store, "ae.enc", &config.encoder_dims(), rng)?;
        let decoder = dense_stack(store, "ae.dec", &config.decoder_dims(), rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    /// Parameters registered by this autoencoder.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|&(w, b)| store.get(w).len() + store.get(b).len())
            .sum()
    }

    /// `B×d_sem → B×(N·d)`.
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let cols = g.shape(s).get(1).copied().unwrap_or(0);
        if cols != self.config.d_sem {
            return Err(Error::shape("sem_encode", g.shape(s), &[self.config.d_sem]));
        }
        run_stack(g, store, &self.encoder, s)
    }

    /// `B×(N·d) → B×d_sem`.
    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let cols = g.shape(z).get(1).copied().unwrap_or(0);
        if cols != self.config.latent() {
            return Err(Error::shape("sem_decode", g.shape(z), &[self.config.latent()]));
        }
        run_stack(g, store, &self.decoder, z)
    }

    /// Batch reconstruction loss: mean over rows of the squared L2 error.
    pub fn reconstruction_var(&self, g: &mut Graph, store: &ParamStore, s: Var, z: Var) -> Result<Var> {
        let rows = g.shape(s)[0];
        let s_hat = self.decode_var(g, store, z)?;
        let diff = g.sub(s, s_hat)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        g.scale(total, 1.0 / rows as f64)
    }

    /// Semantic tokens `z_S1 .. z_SN` of one feature vector.
    pub fn sem_encode(&self, store: &ParamStore, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        if s.len() != self.config.d_sem {
            return Err(Error::shape("sem_encode", &[s.len()], &[self.config.d_sem]));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, s.len(), s.to_vec())?);
        let z = self.encode_var(&mut g, store, x)?;
        Ok(g.value(z).data().chunks(self.config.d).map(<[f64]>::to_vec).collect())
    }

    /// Reconstruct a feature vector from the concatenated tokens.
    pub fn sem_decode(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent() {
            return Err(Error::shape("sem_decode", &[z.len()], &[self.config.latent()]));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let s = self.decode_var(&mut g, store, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Squared L2 reconstruction error `‖s − ŝ‖²`.
pub fn ae_loss(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::shape("ae_loss", &[s.len()], &[s_hat.len()]));
    }
    Ok(s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn make_ae(d_sem: usize, n: usize, d: usize) -> (ParamStore, SemanticAe) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AeConfig {
            d_sem,
            n_tokens: n,
            d,
            hidden: DEFAULT_HIDDEN.to_vec(),
        };
        let ae = SemanticAe::new(&mut store, cfg, &mut rng).unwrap();
        (store, ae)
    }

    #[test]
    fn loss_values() {
        assert_eq!(ae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ae_loss(&[0.0, 1.0, 0.0], &[0.0; 3]).unwrap(), 1.0);
        assert_eq!(ae_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(ae_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn token_shapes() {
        let (store, ae) = make_ae(12, 3, 4);
        let z = ae.sem_encode(&store, &[0.5; 12]).unwrap();
        assert_eq!(z.len(), 3);
        assert!(z.iter().all(|t| t.len() == 4));
        let (store1, ae1) = make_ae(12, 1, 4);
        assert_eq!(ae1.sem_encode(&store1, &[0.5; 12]).unwrap().len(), 1);
        assert!(ae.sem_encode(&store, &[0.5; 11]).is_err());
        assert_eq!(ae.sem_decode(&store, &[0.0; 12]).unwrap().len(), 12);
        assert!(ae.sem_decode(&store, &[0.0; 12]).unwrap().iter().all(|v| v.is_finite()));
        assert!(ae.sem_decode(&store, &[0.0; 5]).is_err());
    }

    #[test]
    fn unified_is_smaller_than_independent() {
        for n in 2..=6 {
            let cfg = AeConfig {
                d_sem: 768,
                n_tokens: n,
                d: 64,
                hidden: DEFAULT_HIDDEN.to_vec(),
            };
            assert!(cfg.param_count() < cfg.independent_param_count(), "N={n}");
        }
        let (store, ae) = make_ae(16, 2, 8);
        assert_eq!(ae.param_count(&store), ae.config().param_count());
    }

    #[test]
    fn overfits_ten_vectors() {
        let (mut store, ae) = make_ae(16, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Tensor::randn(&[10, 16], 1.0, &mut rng);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let mut g = Graph::new();
            let s = g.constant(data.clone());
            let z = ae.encode_var(&mut g, &store, s).unwrap();
            let loss = ae.reconstruction_var(&mut g, &store, s, z).unwrap();
            g.backward(loss).unwrap();
            store.accumulate(&g);
            opt.step(&mut store);
        }
        for r in 0..10 {
            let s = data.row(r);
            let z: Vec<f64> = ae.sem_encode(&store, s).unwrap().concat();
            let s_hat = ae.sem_decode(&store, &z).unwrap();
            let loss = ae_loss(s, &s_hat).unwrap();
            assert!(loss < 1e-3, "row {r}: {loss}");
            let max_abs = s.iter().zip(&s_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max_abs < 0.05);
        }
    }
}
