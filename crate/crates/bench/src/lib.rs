//! Shared fixtures for the criterion benchmarks.

use percolab_core::sampler::{ModelSpec, PercolationConfig};

/// Supercritical planar config used across the benchmarks.
pub fn planar_config(depth: u32) -> PercolationConfig {
    PercolationConfig {
        base: 2,
        dim: 2,
        depth,
        model: ModelSpec::Homogeneous { p: 0.7 },
        seed: 20240917,
        condition: false,
        node_cap: 1 << 28,
    }
}
