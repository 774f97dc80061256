//! Fixed random projections turning a chunk latent into attention tokens.
//!
//! Each spatio-temporal position is a token. Its feature vector is the
//! latent's channel values followed by sinusoidal encodings of the global
//! frame, row and column index; queries, keys and values are seeded linear
//! maps of those features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::armodel::{derive_seed, LatentShape, TAG_PROJECTION};
use crate::error::{invalid_input, Result};
use crate::numerics::Tensor;

const POSITION_FEATURES: usize = 6;

#[derive(Debug, Clone)]
pub struct TokenProjector {
    shape: LatentShape,
    features: usize,
    head_dim: usize,
    key_heads: usize,
    query_heads: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl TokenProjector {
    pub fn new(
        seed: u64,
        shape: LatentShape,
        key_heads: usize,
        query_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if key_heads == 0 || query_heads == 0 || head_dim == 0 {
            return Err(invalid_input("projector heads and head_dim must be positive"));
        }
        let features = shape.channels + POSITION_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_PROJECTION]));
        let std = 1.0 / (features as f64).sqrt();
        let mut draw = |heads: usize| -> Vec<f64> {
            (0..heads * features * head_dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let wq = draw(query_heads);
        let wk = draw(key_heads);
        let wv = draw(key_heads);
        Ok(Self {
            shape,
            features,
            head_dim,
            key_heads,
            query_heads,
            wq,
            wk,
            wv,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn key_heads(&self) -> usize {
        self.key_heads
    }

    pub fn query_heads(&self) -> usize {
        self.query_heads
    }

    /// Keys and values `(tokens, key_heads, head_dim)` for chunk `index`.
    pub fn keys_values(&self, latent: &Tensor, index: usize) -> Result<(Tensor, Tensor)> {
        let f = self.token_features(latent, index)?;
        Ok((self.project(&f, &self.wk, self.key_heads)?, self.project(&f, &self.wv, self.key_heads)?))
    }

    /// Queries `(tokens, query_heads, head_dim)` for chunk `index`.
    pub fn queries(&self, latent: &Tensor, index: usize) -> Result<Tensor> {
        let f = self.token_features(latent, index)?;
        self.project(&f, &self.wq, self.query_heads)
    }

    fn token_features(&self, latent: &Tensor, index: usize) -> Result<Vec<f64>> {
        let s = self.shape;
        if latent.shape() != s.dims().as_slice() {
            return Err(invalid_input(format!(
                "latent shape {:?} does not match scene shape {:?}",
                latent.shape(),
                s.dims()
            )));
        }
        let tokens = s.tokens();
        let mut out = Vec::with_capacity(tokens * self.features);
        for token in 0..tokens {
            for c in 0..s.channels {
                out.push(latent.data()[c * tokens + token]);
            }
            let frame = token / s.frame_tokens();
            let y = (token / s.width) % s.height;
            let x = token % s.width;
            let global_frame = (index.saturating_sub(1) * s.frames + frame) as f64;
            for angle in [0.5 * global_frame, 1.3 * y as f64, 1.3 * x as f64] {
                out.push(angle.sin());
                out.push(angle.cos());
            }
        }
        Ok(out)
    }

    fn project(&self, features: &[f64], weights: &[f64], heads: usize) -> Result<Tensor> {
        let tokens = features.len() / self.features;
        let d = self.head_dim;
        let mut out = vec![0.0; tokens * heads * d];
        for (t, f) in features.chunks(self.features).enumerate() {
            for h in 0..heads {
                let w = &weights[h * self.features * d..(h + 1) * self.features * d];
                let dst = &mut out[(t * heads + h) * d..(t * heads + h + 1) * d];
                for (fi, fv) in f.iter().enumerate() {
                    for (o, wv) in dst.iter_mut().zip(&w[fi * d..(fi + 1) * d]) {
                        *o += fv * wv;
                    }
                }
            }
        }
        Tensor::new(vec![tokens, heads, d], out)
    }
}
