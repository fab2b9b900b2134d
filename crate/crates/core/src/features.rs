//! Node feature providers.
//!
//! Real corpora carry post text; these providers turn it (or already
//! numeric node records) into an `N x d` matrix without a pretrained
//! encoder.

use csda_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureProvider {
    /// Node records are already numeric vectors.
    Identity,
    /// Bag of words with tokens hashed into `dim` buckets.
    HashedTokens { dim: usize },
    /// Mean of per-token standard-normal vectors drawn from a seeded stream.
    RandomLookup { dim: usize, seed: u64 },
}

/// Input to a provider: one entry per node.
pub enum NodeRecords<'a> {
    Numeric(&'a [Vec<f64>]),
    Text(&'a [String]),
}

impl FeatureProvider {
    pub fn from_name(name: &str, dim: usize, seed: u64) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity),
            "hashed" => Ok(Self::HashedTokens { dim }),
            "random_lookup" => Ok(Self::RandomLookup { dim, seed }),
            other => Err(Error::Config(format!("unknown feature provider {other:?}"))),
        }
    }

    pub fn features(&self, nodes: NodeRecords<'_>) -> Result<Tensor> {
        match (self, nodes) {
            (Self::Identity, NodeRecords::Numeric(rows)) => Ok(Tensor::from_rows(rows)?),
            (Self::HashedTokens { dim }, NodeRecords::Text(texts)) => {
                let rows: Vec<Vec<f64>> = texts.iter().map(|t| hashed_row(t, *dim)).collect();
                Ok(matrix(rows, *dim))
            }
            (Self::RandomLookup { dim, seed }, NodeRecords::Text(texts)) => {
                let rows: Vec<Vec<f64>> =
                    texts.iter().map(|t| lookup_row(t, *dim, *seed)).collect();
                Ok(matrix(rows, *dim))
            }
            (Self::Identity, NodeRecords::Text(_)) => Err(Error::Config(
                "identity provider needs numeric node records".into(),
            )),
            (_, NodeRecords::Numeric(_)) => Err(Error::Config(
                "text providers need text node records".into(),
            )),
        }
    }
}

fn matrix(rows: Vec<Vec<f64>>, dim: usize) -> Tensor {
    let n = rows.len();
    Tensor::new(n, dim, rows.concat()).expect("rows have provider dim")
}

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '#' && c != '@')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn hashed_row(text: &str, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    for tok in tokens(text) {
        row[(fnv1a(tok.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    row
}

fn lookup_row(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    let mut count = 0usize;
    for tok in tokens(text) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tok.as_bytes()));
        for v in row.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v += x;
        }
        count += 1;
    }
    if count > 0 {
        row.iter_mut().for_each(|v| *v /= count as f64);
    }
    row
}
