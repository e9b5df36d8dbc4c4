//! Stable seed derivation.
//!
//! Every run hangs off one master seed; per-purpose seeds are derived by
//! hashing the master seed with a role string (device ids, layer indices,
//! session names). The hash is FNV-1a, fixed here so derived seeds never
//! change across Rust releases or platforms.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Derives a child seed from a master seed and any number of role strings.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in master.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(FNV_PRIME);
    }
    for part in parts {
        for &byte in part.as_bytes() {
            h = (h ^ byte as u64).wrapping_mul(FNV_PRIME);
        }
        // Separator so ("ab","c") and ("a","bc") derive differently.
        h = (h ^ 0xff).wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a child seed from a master seed and an index.
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = derive_seed(master, &[label]);
    for byte in index.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(FNV_PRIME);
    }
    h
}
