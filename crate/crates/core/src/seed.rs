//! Deterministic seed derivation. Every random decision in a run flows from
//! the master seed through named streams, so a run is reproducible from its
//! config alone and any stream can be re-derived mid-run for resumption.

/// Derive a child seed from the master seed, a stream label and integer tags
/// (epoch, index, view, ...). FNV-1a over the label bytes and tag words,
/// finished with a splitmix64 avalanche.
pub fn derive(master: u64, label: &str, tags: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ master;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for &t in tags {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
