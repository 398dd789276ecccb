//! Global token space shared by every language.
//!
//! Ids `0` and `1` are the start and end symbols. Each language owns one
//! contiguous range after them. The CTC blank is not part of this space: it
//! is index `vocab_size` of the CTC output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const N_SPECIAL: usize = 2;

/// Standard deviation of freshly appended embedding rows.
pub const NEW_ROW_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LanguageId(pub u32);

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{:02}", self.0)
    }
}

/// Half-open token interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRange {
    pub lo: usize,
    pub hi: usize,
}

impl TokenRange {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.lo..self.hi).contains(&token)
    }

    pub fn overlaps(&self, other: &TokenRange) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }
}

/// Hands out disjoint token ranges up to a fixed capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabRegistry {
    capacity: usize,
    next: usize,
    owners: Vec<(LanguageId, TokenRange)>,
}

impl VocabRegistry {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity <= N_SPECIAL {
            return Err(Error::Config(format!("vocabulary capacity {capacity} leaves no room for languages")));
        }
        Ok(Self { capacity, next: N_SPECIAL, owners: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn allocated(&self) -> usize {
        self.next
    }

    pub fn claim(&mut self, language: LanguageId, size: usize) -> Result<TokenRange> {
        if size == 0 {
            return Err(Error::Config("cannot claim an empty token range".into()));
        }
        if self.owners.iter().any(|(l, _)| *l == language) {
            return Err(Error::Config(format!("language {language} already owns a range")));
        }
        if self.next + size > self.capacity {
            return Err(Error::Config(format!(
                "vocabulary exhausted: {} + {size} > capacity {}",
                self.next, self.capacity
            )));
        }
        let range = TokenRange { lo: self.next, hi: self.next + size };
        self.next += size;
        self.owners.push((language, range));
        Ok(range)
    }

    pub fn range_of(&self, language: LanguageId) -> Option<TokenRange> {
        self.owners.iter().find(|(l, _)| *l == language).map(|(_, r)| *r)
    }

    pub fn owner_of(&self, token: usize) -> Option<LanguageId> {
        self.owners.iter().find(|(_, r)| r.contains(token)).map(|(l, _)| *l)
    }

    pub fn owners(&self) -> &[(LanguageId, TokenRange)] {
        &self.owners
    }
}

/// Appends `delta` rows drawn from `N(0, 0.02²)` to an embedding matrix.
///
/// Existing rows are copied bit for bit. Returns the grown matrix and the
/// range the new rows occupy.
pub fn expand_vocab(e: &Tensor, delta: usize, max_vocab: usize, rng: &mut Rng) -> Result<(Tensor, TokenRange)> {
    if delta == 0 {
        return Err(Error::Config("vocabulary expansion by zero rows".into()));
    }
    if e.shape().len() != 2 {
        return Err(Error::Shape(format!("embedding must be a matrix, got {:?}", e.shape())));
    }
    let (v, d) = (e.rows(), e.cols());
    if v + delta > max_vocab {
        return Err(Error::Config(format!("vocabulary overflow: {v} + {delta} > {max_vocab}")));
    }
    let mut data = e.data().to_vec();
    data.extend((0..delta * d).map(|_| rng.normal(0.0, NEW_ROW_STD)));
    Ok((Tensor::from_vec(&[v + delta, d], data)?, TokenRange { lo: v, hi: v + delta }))
}
