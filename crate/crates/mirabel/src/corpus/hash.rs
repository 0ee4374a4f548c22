//! Offline deterministic embedder: sign-hashed bag of tokens.
//!
//! Each token is hashed (seeded) to a bucket with a +/-1 sign; token counts
//! accumulate and rows are L2-normalized. Prefix, masked, and subset
//! variants of a text stay cosine-similar to the full text, which is what
//! lets retrieval-level attack queries be expressed without any language
//! model.

use crate::corpus::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};

/// Seeded feature-hashing embedder. Pure function of `(text, dim, seed)`.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    /// `dim` must be a power of two, at least 64.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 64 || !dim.is_power_of_two() {
            return Err(Error::BadDim { dim });
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn embed_into(&self, text: &str, row: &mut [f32]) {
        let mask = (self.dim - 1) as u64;
        let mut any = false;
        for token in tokenize(text) {
            let h = token_hash(&token, self.seed);
            let bucket = (h & mask) as usize;
            let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
            row[bucket] += sign;
            any = true;
        }
        if !any {
            return; // zero-token text stays the zero vector
        }
        let norm = crate::corpus::l2_norm(row);
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<EmbeddingMatrix> {
        let mut data = vec![0.0f32; texts.len() * self.dim];
        for (i, text) in texts.iter().enumerate() {
            self.embed_into(text, &mut data[i * self.dim..(i + 1) * self.dim]);
        }
        EmbeddingMatrix::new(self.dim, data)
    }
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Seeded FNV-1a with a splitmix finalizer for well-mixed high bits.
fn token_hash(token: &str, seed: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
