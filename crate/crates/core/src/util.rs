//! Hashing helpers for seed derivation and content digests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from an ordered list of labelled parts.
///
/// Parts are length-prefixed before hashing so `["ab", "c"]` and
/// `["a", "bc"]` never collide.
pub fn derive_seed<I, S>(parts: I) -> u64
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output has 32 bytes"))
}

/// Seeded ChaCha8 stream keyed by the given parts.
pub fn keyed_rng<I, S>(parts: I) -> ChaCha8Rng
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replaces characters that are awkward in file names.
pub fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_prefix_free() {
        assert_ne!(derive_seed(["ab", "c"]), derive_seed(["a", "bc"]));
        assert_eq!(derive_seed(["x", "1"]), derive_seed(["x", "1"]));
    }

    #[test]
    fn file_safe_strips_separators() {
        assert_eq!(file_safe("org/model:7b"), "org_model_7b");
    }
}
