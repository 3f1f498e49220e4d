//! Hashed bag-of-tokens features.
//!
//! A token's bucket is `fnv1a64(utf8 bytes) mod dim`, using the 64-bit
//! FNV-1a parameters (offset basis `0xcbf29ce484222325`, prime
//! `0x100000001b3`). The hash has no platform-dependent state, so features
//! are identical everywhere.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn bucket(token: &str, dim: usize) -> usize {
    (fnv1a64(token.as_bytes()) % dim as u64) as usize
}

/// Sparse vector: `(index, value)` pairs sorted by index, no duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseFeatures {
    pub entries: Vec<(usize, f64)>,
}

impl SparseFeatures {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for (i, x) in &self.entries {
            v[*i] = *x;
        }
        v
    }
}

/// Token counts per hash bucket.
pub fn featurize<S: AsRef<str>>(tokens: &[S], dim: usize) -> SparseFeatures {
    assert!(dim > 0, "feature dimension must be positive");
    let mut idx: Vec<usize> = tokens.iter().map(|t| bucket(t.as_ref(), dim)).collect();
    idx.sort_unstable();
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for i in idx {
        match entries.last_mut() {
            Some((j, c)) if *j == i => *c += 1.0,
            _ => entries.push((i, 1.0)),
        }
    }
    SparseFeatures { entries }
}
