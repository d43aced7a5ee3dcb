// SPDX-License-Identifier: Apache-2.0

//! Procedural source data, corruptions and batch samplers.

pub mod batches;
pub mod corrupt;
pub mod shapes;

pub use batches::{plan_batches, Batch, BatchPlan, Sampler};
pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use shapes::{generate_dataset, Dataset, ShapesToy, ShapesToyConfig};

/// splitmix64 finalizer; derives independent per-item seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
