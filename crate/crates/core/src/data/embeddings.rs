//! Word vectors: an optional whitespace-separated table with deterministic
//! hash-seeded unit vectors for everything else.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};

/// Unit vector keyed by the SHA-256 of `token`.
pub fn hash_embedding(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

#[derive(Clone, Debug, Default)]
pub struct WordEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl WordEmbeddings {
    /// Hash embeddings only.
    pub fn hashed(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    /// Loads `token v1 ... vd` lines; every row must have the same `d`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MrtError::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| MrtError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(MrtError::Validation {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("expected {d} values, got {}", values.len()),
                    })
                }
                Some(_) => {}
            }
            table.insert(token.to_lowercase(), values);
        }
        let dim = dim.ok_or_else(|| MrtError::Format {
            path: path.to_path_buf(),
            msg: "no embeddings".into(),
        })?;
        Ok(Self { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, token: &str) -> bool {
        self.table.contains_key(&token.to_lowercase())
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        let key = token.to_lowercase();
        self.table
            .get(&key)
            .cloned()
            .unwrap_or_else(|| hash_embedding(&key, self.dim))
    }

    /// `m×dim` matrix for `tokens`, truncated to `max_len` words.
    pub fn embed(&self, tokens: &[String], max_len: usize) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(MrtError::Contract("cannot embed an empty query".into()));
        }
        if !self.table.is_empty() && !tokens.iter().any(|t| self.contains(t)) {
            log::warn!("no query token found in the embedding table; using hash embeddings");
        }
        let rows: Vec<Vec<f64>> = tokens.iter().take(max_len).map(|t| self.vector(t)).collect();
        Tensor::from_rows(&rows)
    }
}
