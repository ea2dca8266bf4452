//! Named RNG streams derived from one master seed.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// ChaCha8 generator keyed by SHA-256 of the master seed (little-endian) and the label.
pub fn stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(master_seed, label))
}

/// 64-bit seed for APIs that take a plain integer.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let k = derive_key(master_seed, label);
    u64::from_le_bytes(k[..8].try_into().unwrap())
}

fn derive_key(master_seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// One stream per label; labels must be unique.
pub fn seed_streams(master_seed: u64, labels: &[&str]) -> Result<Vec<ChaCha8Rng>> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(*l) {
            return Err(Error::invalid(format!("duplicate stream label `{l}`")));
        }
    }
    Ok(labels.iter().map(|l| stream(master_seed, l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(r: &mut ChaCha8Rng) -> Vec<u64> {
        (0..100).map(|_| r.random()).collect()
    }

    #[test]
    fn same_label_same_stream() {
        assert_eq!(draws(&mut stream(7, "node/0")), draws(&mut stream(7, "node/0")));
        assert_ne!(draws(&mut stream(7, "node/0")), draws(&mut stream(7, "node/1")));
        assert_ne!(draws(&mut stream(7, "node/0")), draws(&mut stream(8, "node/0")));
    }

    #[test]
    fn streams_are_independent_of_siblings() {
        let a = seed_streams(3, &["init", "node/2"]).unwrap();
        let b = seed_streams(3, &["node/2", "extra", "init"]).unwrap();
        assert_eq!(draws(&mut a[1].clone()), draws(&mut b[0].clone()));
        assert!(seed_streams(3, &["x", "x"]).is_err());
    }

    #[test]
    fn derivation_is_pinned() {
        // SHA-256 of eight zero bytes followed by "a", computed outside this crate
        assert_eq!(derive_seed(0, "a"), 7586401852616081111);
    }
}
