//! Frozen text encoder: a seeded random embedding table plus sinusoidal
//! position codes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `s × d1` token embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TextEmbedding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
    table: Vec<f64>,
}

impl TextEncoder {
    /// Each table row is drawn from its own stream, so growing the vocabulary
    /// never changes existing rows.
    pub fn new(seed: u64, dim: usize, vocab_size: usize) -> Self {
        let normal = StandardNormal;
        let mut table = Vec::with_capacity(vocab_size * dim);
        for id in 0..vocab_size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            table.extend((0..dim).map(|_| -> f64 { normal.sample(&mut rng) }));
        }
        Self { seed, dim, table }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn encode(&self, ids: &[u32]) -> Result<TextEmbedding> {
        if ids.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let size = self.vocab_size();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= size {
                return Err(Error::TokenOutOfRange { id, size });
            }
            let row = &self.table[id as usize * self.dim..(id as usize + 1) * self.dim];
            data.extend(row.iter().enumerate().map(|(i, v)| v + position_code(pos, i, self.dim)));
        }
        Ok(TextEmbedding {
            tokens: ids.len(),
            dim: self.dim,
            data,
        })
    }

    pub fn table_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.table {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

fn position_code(pos: usize, i: usize, dim: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::NULL_ID;

    #[test]
    fn encoding_is_deterministic() {
        let enc = TextEncoder::new(7, 32, 20);
        let ids = [2, 3, 4, 15];
        let a = enc.encode(&ids).unwrap();
        let b = TextEncoder::new(7, 32, 20).encode(&ids).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn changing_one_token_changes_one_row() {
        let enc = TextEncoder::new(7, 16, 20);
        for k in 0..5 {
            let a_ids = [2u32, 3, 4, 5, 6];
            let mut b_ids = a_ids;
            b_ids[k] = 12;
            let a = enc.encode(&a_ids).unwrap();
            let b = enc.encode(&b_ids).unwrap();
            for r in 0..5 {
                if r == k {
                    assert_ne!(a.row(r), b.row(r));
                } else {
                    assert_eq!(a.row(r), b.row(r));
                }
            }
        }
    }

    #[test]
    fn null_prompt_is_one_row() {
        let enc = TextEncoder::new(7, 32, 4);
        let e = enc.encode(&[NULL_ID]).unwrap();
        assert_eq!((e.tokens, e.dim), (1, 32));
        assert!(e.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn growing_vocab_keeps_rows() {
        let small = TextEncoder::new(3, 8, 5);
        let big = TextEncoder::new(3, 8, 50);
        assert_eq!(small.encode(&[4]).unwrap(), big.encode(&[4]).unwrap());
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        let enc = TextEncoder::new(7, 8, 5);
        assert!(matches!(
            enc.encode(&[5]),
            Err(Error::TokenOutOfRange { id: 5, size: 5 })
        ));
        assert!(matches!(enc.encode(&[]), Err(Error::EmptyTokens)));
    }
}
