//! Derivation of independent seeds from a root seed.

/// Mixes `parts` into `root` with a splitmix64 finalizer per part, so
/// neighbouring inputs give unrelated outputs.
pub fn derive(root: u64, parts: &[u64]) -> u64 {
    let mut z = root;
    for &p in parts {
        z = finalize(z ^ finalize(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
