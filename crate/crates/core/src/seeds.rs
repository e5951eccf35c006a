//! Deterministic seed derivation from a single root seed.
//!
//! Every random component (synthetic generation, parameter init, dropout
//! masks, grid sampling) derives its own independent stream seed as
//! `splitmix64(root ^ fnv1a(label))`. The label namespaces the stream, the
//! splitmix64 finalizer decorrelates nearby roots, and nothing ever shares a
//! raw root seed directly — so adding a new consumer never perturbs existing
//! streams.
//!
//! Labels in use across the crate:
//! - `"synth"` — synthetic tensor draws
//! - `"grid-sample"` — O-D grid subsampling
//! - `"init"` — encoder/head parameter initialization
//! - `"dropout.e{epoch}.w{window}"` — one mask stream per training step
//! - `"shuffle.e{epoch}"` — window order when shuffling is enabled

/// 64-bit FNV-1a hash of a label string.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; bijective on u64 with good avalanche behaviour.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for one named random stream from the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label))
}
