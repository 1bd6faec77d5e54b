//! Fractal percolation on M-adic cube trees: offspring laws and extinction,
//! dimension bound calculators, reproducible tree sampling, porosity
//! measurement, block pruning, and bitmap rendering.
//!
//! Everything downstream (CLI, benchmarks) goes through the re-exports
//! below; the modules stay public for direct access to the internals.

pub mod error;
pub mod gw;
pub mod mcube;
pub mod porosity;
pub mod pruner;
pub mod raster;
pub mod sampler;
pub mod stats;
pub mod stream;
pub mod wire;

pub use error::{Error, Result};
pub use gw::{
    annular_bounds, bound_c, bound_lpor_dim, bound_lpor_lower, bound_upor_dim,
    bound_upor_dim_general, bound_upor_lower, survival_offspring, survival_offspring_pmf,
    BoundReport, OffspringDistribution, SurvivalOffspring, Verdict,
};
pub use mcube::{
    coords_from_flat, cube_gap_sq_units, flat_index, index_width_ok, set_distance, Ball, Cone,
    CubeAddress, Point,
};
pub use porosity::{
    ancestor_counts, annular_porosity_at, box_dimension, conical_central_cube,
    default_scale_grid, hole_meeting_children, level_set, porosity_at, porosity_profile,
    sphere_net, theorem_scale_grid, BoxDim, ConicalWitness, HoleFallback, HoleMeeting,
    LevelSetEstimate, LevelSetMode, Occupancy, OccupiedSet, PointPolicy, PorosityProfile,
    PorosityValue,
};
pub use pruner::{
    apply_prune, block_offspring_stats, pruned_dimension, pruned_from_bytes, pruned_to_bytes,
    BlockStats, PruneRule, PruneStats, PrunedDimension, PrunedTree,
};
pub use raster::{
    raster_heatmap, raster_occupancy, raster_pruned, write_pgm, write_ppm, GrayImage, HeatMode,
};
pub use sampler::{
    condition_on_nonextinction, mark_survivors_exact, replica_config, sample_ensemble,
    sample_marked, sample_mu_points, sample_tree, tree_debug_json, tree_from_bytes,
    tree_to_bytes, ModelSpec, PercolationConfig, PercolationTree, PlacementPolicy,
};
pub use stats::{chi_square_gof, least_squares, mean_se, ChiSquare, LeastSquares};
pub use stream::{attempt_seed, replica_seed, Purpose, Stream};
