use sha2::{Digest, Sha256};

/// Stable 64-bit seed from a base seed and labelled parts.
pub fn derive(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Uniform draw in [0, 1) from derived bits.
pub fn unit(seed: u64, parts: &[&[u8]]) -> f64 {
    (derive(seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}
