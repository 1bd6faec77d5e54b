//! Reproducible sampling of percolation trees.
//!
//! A tree is sampled level by level: each retained cube either keeps each of
//! its `M^d` children independently (homogeneous/inhomogeneous models) or
//! draws a child count from a general offspring law and places that many
//! children with a deterministic-given-the-stream placement policy. Survival
//! marks are attached afterwards: depth-level cubes get independent
//! Bernoulli(1-q) marks — exactly the law of {subtree below this cube reaches
//! infinity} — and marks propagate upward by OR. All randomness comes from
//! address-keyed counter streams, so results are independent of traversal
//! order and worker count.

use crate::error::{Error, Result};
use crate::gw::OffspringDistribution;
use crate::mcube::{self, CubeAddress, Point};
use crate::stream::{attempt_seed, replica_seed, Purpose, Stream};
use crate::wire::{self, WireLevel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Placement policies for the general model: given a drawn child count k,
/// pick which k of the `M^d` child positions are retained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PlacementPolicy {
    /// Per-child independent Bernoulli draws; only meaningful for the
    /// homogeneous/inhomogeneous models, which use it implicitly. Configuring
    /// it together with the general model is rejected.
    BernoulliIndependent,
    /// Uniformly random k-subset of the child positions.
    UniformSubset,
    /// The k positions closest to the parent's lower corner (sorted by L1
    /// offset norm, ties lexicographic). Deterministic given the count.
    CornerPacked,
    /// The k positions with the smallest first-axis offset (ties
    /// lexicographic): children pile up against one face. Deterministic
    /// given the count.
    HyperplaneBiased,
    /// Uniformly random k-subset from a salted stream: distinct salts give
    /// independent placements for the same master seed.
    CustomSeeded { salt: u64 },
}

/// The retention model for one subdivision step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Every child kept independently with probability `p in (0,1)`.
    Homogeneous { p: f64 },
    /// Child at ordinal `j` kept independently with probability `probs[j]`,
    /// the same vector at every level (self-similar).
    Inhomogeneous { probs: Vec<f64> },
    /// Child count drawn from `pmf` (length `M^d + 1`), positions chosen by
    /// the placement policy.
    General {
        pmf: Vec<f64>,
        placement: PlacementPolicy,
    },
}

fn default_node_cap() -> u64 {
    100_000_000
}

/// Full description of a sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PercolationConfig {
    #[serde(rename = "M")]
    pub base: u32,
    #[serde(rename = "d")]
    pub dim: u32,
    pub depth: u32,
    pub model: ModelSpec,
    pub seed: u64,
    #[serde(default)]
    pub condition: bool,
    #[serde(default = "default_node_cap")]
    pub node_cap: u64,
}

impl PercolationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Parameter("depth must be >= 1".into()));
        }
        if !mcube::index_width_ok(self.base, self.dim, self.depth) {
            return Err(Error::Parameter(format!(
                "depth {} with M={} d={} exceeds the 63-bit flattened index width",
                self.depth, self.base, self.dim
            )));
        }
        if self.node_cap == 0 {
            return Err(Error::Parameter("node cap must be >= 1".into()));
        }
        if let ModelSpec::General {
            placement: PlacementPolicy::BernoulliIndependent,
            ..
        } = self.model
        {
            return Err(Error::Parameter(
                "bernoulli-independent placement has no count draw; \
                 use the homogeneous or inhomogeneous model instead"
                    .into(),
            ));
        }
        self.offspring_distribution().map(|_| ())
    }

    /// The offspring law of retained-children counts implied by the model.
    pub fn offspring_distribution(&self) -> Result<OffspringDistribution> {
        match &self.model {
            ModelSpec::Homogeneous { p } => OffspringDistribution::binomial(self.base, self.dim, *p),
            ModelSpec::Inhomogeneous { probs } => {
                OffspringDistribution::poisson_binomial(self.base, self.dim, probs)
            }
            ModelSpec::General { pmf, .. } => {
                OffspringDistribution::from_pmf(self.base, self.dim, pmf.clone())
            }
        }
    }

    pub fn children_per_cube(&self) -> u64 {
        u64::from(self.base).pow(self.dim)
    }
}

/// One sampled level: sorted flattened indices and a mark bitset.
#[derive(Clone, Debug, PartialEq)]
struct Level {
    indices: Vec<u64>,
    marks: Vec<u8>,
}

impl Level {
    fn new(indices: Vec<u64>) -> Level {
        let marks = vec![0u8; wire::bitset_len(indices.len())];
        Level { indices, marks }
    }
}

/// A sampled percolation tree: per-level sorted retained cubes plus optional
/// survival marks.
#[derive(Clone, Debug, PartialEq)]
pub struct PercolationTree {
    config: PercolationConfig,
    levels: Vec<Level>,
    marked: bool,
    rejections: u64,
}

#[derive(Serialize, Deserialize)]
struct TreeHeader {
    config: PercolationConfig,
    marked: bool,
    rejections: u64,
}

impl PercolationTree {
    pub fn config(&self) -> &PercolationConfig {
        &self.config
    }

    pub fn depth(&self) -> u32 {
        self.config.depth
    }

    pub fn marked(&self) -> bool {
        self.marked
    }

    /// Rejection-sampling attempts discarded before this tree (conditioned
    /// trees only; 0 otherwise).
    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    fn level(&self, level: u32) -> Result<&Level> {
        self.levels.get(level as usize).ok_or_else(|| {
            Error::LevelMismatch(format!(
                "level {level} beyond sampled depth {}",
                self.config.depth
            ))
        })
    }

    /// Sorted flattened indices of retained cubes at a level.
    pub fn retained(&self, level: u32) -> Result<&[u64]> {
        Ok(&self.level(level)?.indices)
    }

    pub fn retained_count(&self, level: u32) -> Result<u64> {
        Ok(self.level(level)?.indices.len() as u64)
    }

    pub fn total_retained(&self) -> u64 {
        self.levels.iter().map(|l| l.indices.len() as u64).sum()
    }

    pub fn is_retained(&self, level: u32, idx: u64) -> Result<bool> {
        Ok(self.level(level)?.indices.binary_search(&idx).is_ok())
    }

    /// Survival mark by slot position within a level.
    pub fn survives_slot(&self, level: u32, slot: usize) -> Result<bool> {
        self.require_marked()?;
        let l = self.level(level)?;
        if slot >= l.indices.len() {
            return Err(Error::Parameter(format!(
                "slot {slot} out of range at level {level}"
            )));
        }
        Ok(wire::get_bit(&l.marks, slot))
    }

    /// Survival mark by flattened index (false if the cube is not retained).
    pub fn survives_index(&self, level: u32, idx: u64) -> Result<bool> {
        self.require_marked()?;
        let l = self.level(level)?;
        Ok(match l.indices.binary_search(&idx) {
            Ok(slot) => wire::get_bit(&l.marks, slot),
            Err(_) => false,
        })
    }

    pub fn root_survives(&self) -> bool {
        self.marked && !self.levels[0].indices.is_empty() && wire::get_bit(&self.levels[0].marks, 0)
    }

    /// Number of surviving-marked cubes at a level.
    pub fn surviving_count(&self, level: u32) -> Result<u64> {
        self.require_marked()?;
        let l = self.level(level)?;
        Ok(l.marks.iter().map(|b| b.count_ones() as u64).sum())
    }

    /// Slots of surviving cubes at a level.
    pub fn surviving_slots(&self, level: u32) -> Result<Vec<usize>> {
        self.require_marked()?;
        let l = self.level(level)?;
        Ok((0..l.indices.len())
            .filter(|&s| wire::get_bit(&l.marks, s))
            .collect())
    }

    /// Sorted flattened indices of surviving cubes at a level.
    pub fn surviving(&self, level: u32) -> Result<Vec<u64>> {
        self.require_marked()?;
        let l = self.level(level)?;
        Ok((0..l.indices.len())
            .filter(|&s| wire::get_bit(&l.marks, s))
            .map(|s| l.indices[s])
            .collect())
    }

    fn require_marked(&self) -> Result<()> {
        if !self.marked {
            return Err(Error::Precondition(
                "tree has no survival marks; call mark_survivors_exact first".into(),
            ));
        }
        Ok(())
    }

    /// Slot range at `level + steps` of the retained descendants of the cube
    /// with flattened index `idx` at `level`.
    pub fn descendant_slots(&self, level: u32, idx: u64, steps: u32) -> Result<std::ops::Range<usize>> {
        let target = self.level(level + steps)?;
        let k = self.config.children_per_cube();
        let span = k.pow(steps);
        let lo = idx * span;
        let hi = lo + span;
        let a = target.indices.partition_point(|&x| x < lo);
        let b = target.indices.partition_point(|&x| x < hi);
        Ok(a..b)
    }

    /// Cube address of a slot.
    pub fn addr(&self, level: u32, slot: usize) -> Result<CubeAddress> {
        let l = self.level(level)?;
        let idx = *l.indices.get(slot).ok_or_else(|| {
            Error::Parameter(format!("slot {slot} out of range at level {level}"))
        })?;
        CubeAddress::from_flat(self.config.base, self.config.dim, level, idx)
    }

    /// Build a tree from explicit per-level index lists (and optional marks),
    /// validating sortedness, bounds, parent closure, and mark consistency.
    /// Used by fixtures, tests, and deserialization.
    pub fn from_parts(
        config: PercolationConfig,
        levels: Vec<Vec<u64>>,
        marks: Option<Vec<Vec<bool>>>,
        rejections: u64,
    ) -> Result<PercolationTree> {
        config.validate()?;
        if levels.len() != config.depth as usize + 1 {
            return Err(Error::Format(format!(
                "expected {} levels, got {}",
                config.depth + 1,
                levels.len()
            )));
        }
        if levels[0] != [0] {
            return Err(Error::Format("level 0 must be exactly the root".into()));
        }
        let k = config.children_per_cube();
        for n in 0..levels.len() {
            let width = (k as u128).pow(n as u32);
            let lvl = &levels[n];
            for w in lvl.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Format(format!(
                        "level {n} indices not strictly sorted"
                    )));
                }
            }
            if let Some(&last) = lvl.last() {
                if u128::from(last) >= width {
                    return Err(Error::Format(format!("index out of range at level {n}")));
                }
            }
            if n > 0 {
                for &idx in lvl {
                    if levels[n - 1].binary_search(&(idx / k)).is_err() {
                        return Err(Error::Format(format!(
                            "orphan cube at level {n}: parent of {idx} not retained"
                        )));
                    }
                }
            }
        }
        let mut built: Vec<Level> = levels.into_iter().map(Level::new).collect();
        let marked = marks.is_some();
        if let Some(marks) = marks {
            if marks.len() != built.len() {
                return Err(Error::Format("mark level count mismatch".into()));
            }
            for (n, (lvl, ms)) in built.iter_mut().zip(&marks).enumerate() {
                if ms.len() != lvl.indices.len() {
                    return Err(Error::Format(format!("mark count mismatch at level {n}")));
                }
                for (i, &m) in ms.iter().enumerate() {
                    wire::set_bit(&mut lvl.marks, i, m);
                }
            }
            // OR-consistency below the deepest level.
            for n in 0..built.len() - 1 {
                for slot in 0..built[n].indices.len() {
                    let idx = built[n].indices[slot];
                    let lo = idx * k;
                    let hi = lo + k;
                    let child = &built[n + 1];
                    let a = child.indices.partition_point(|&x| x < lo);
                    let b = child.indices.partition_point(|&x| x < hi);
                    let any = (a..b).any(|s| wire::get_bit(&child.marks, s));
                    if any != wire::get_bit(&built[n].marks, slot) {
                        return Err(Error::Format(format!(
                            "survival marks inconsistent at level {n} slot {slot}"
                        )));
                    }
                }
            }
        }
        Ok(PercolationTree {
            config,
            levels: built,
            marked,
            rejections,
        })
    }

    /// Re-check the structural invariants (used by tests on sampled trees).
    pub fn check_invariants(&self) -> Result<()> {
        let levels = self.levels.iter().map(|l| l.indices.clone()).collect();
        let marks = self.marked.then(|| {
            self.levels
                .iter()
                .map(|l| {
                    (0..l.indices.len())
                        .map(|i| wire::get_bit(&l.marks, i))
                        .collect()
                })
                .collect()
        });
        Self::from_parts(self.config.clone(), levels, marks, self.rejections).map(|_| ())
    }
}

/// Sample the retention structure only (no survival marks).
pub fn sample_tree(config: &PercolationConfig) -> Result<PercolationTree> {
    config.validate()?;
    let k = config.children_per_cube();
    let seed = config.seed;
    let mut levels = vec![Level::new(vec![0])];
    let mut total: u64 = 1;

    // Per-model immutable tables hoisted out of the level loop.
    let cdf: Vec<f64> = match &config.model {
        ModelSpec::General { pmf, .. } => {
            let mut acc = 0.0;
            pmf.iter()
                .map(|&p| {
                    acc += p;
                    acc
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let fixed_order: Vec<u64> = match &config.model {
        ModelSpec::General { placement, .. } => match placement {
            PlacementPolicy::CornerPacked => placement_order(config.base, config.dim, true),
            PlacementPolicy::HyperplaneBiased => placement_order(config.base, config.dim, false),
            _ => Vec::new(),
        },
        _ => Vec::new(),
    };

    for n in 0..config.depth {
        let parents = std::mem::take(&mut levels[n as usize].indices);
        let mut next: Vec<u64> = Vec::new();
        match &config.model {
            ModelSpec::Homogeneous { p } => {
                for &v in &parents {
                    let first = v * k;
                    for j in 0..k {
                        let child = first + j;
                        if Stream::for_cube(seed, Purpose::Retain, n + 1, child).uniform(0) < *p {
                            next.push(child);
                        }
                    }
                }
            }
            ModelSpec::Inhomogeneous { probs } => {
                for &v in &parents {
                    let first = v * k;
                    for j in 0..k {
                        let child = first + j;
                        if Stream::for_cube(seed, Purpose::Retain, n + 1, child).uniform(0)
                            < probs[j as usize]
                        {
                            next.push(child);
                        }
                    }
                }
            }
            ModelSpec::General { placement, .. } => {
                let mut scratch: Vec<u64> = Vec::with_capacity(k as usize);
                for &v in &parents {
                    let count_stream = Stream::for_cube(seed, Purpose::Count, n, v);
                    let count = draw_count(&cdf, count_stream.uniform(0));
                    place_children(
                        *placement,
                        k,
                        count,
                        Stream::for_cube(seed, Purpose::Place, n, v),
                        &fixed_order,
                        &mut scratch,
                    );
                    for &o in scratch.iter() {
                        next.push(v * k + o);
                    }
                }
            }
        }
        total += next.len() as u64;
        if total > config.node_cap {
            return Err(Error::ResourceCap(format!(
                "node cap {} exceeded at level {}",
                config.node_cap,
                n + 1
            )));
        }
        levels[n as usize].indices = parents;
        levels.push(Level::new(next));
    }
    Ok(PercolationTree {
        config: config.clone(),
        levels,
        marked: false,
        rejections: 0,
    })
}

/// Inverse-CDF draw of a child count.
fn draw_count(cdf: &[f64], u: f64) -> u64 {
    cdf.partition_point(|&c| c <= u) as u64
}

/// Deterministic child orderings: by L1 offset norm (corner-packed) or by
/// first-axis offset (hyperplane-biased); ties broken by ordinal, which is
/// lexicographic in the offset tuple.
fn placement_order(base: u32, dim: u32, by_l1: bool) -> Vec<u64> {
    let k = u64::from(base).pow(dim);
    let m = u64::from(base);
    let mut ords: Vec<u64> = (0..k).collect();
    let key = |ord: u64| -> u64 {
        if by_l1 {
            let mut rem = ord;
            let mut sum = 0;
            for _ in 0..dim {
                sum += rem % m;
                rem /= m;
            }
            sum
        } else {
            // First axis is the most significant digit.
            ord / m.pow(dim - 1)
        }
    };
    ords.sort_by_key(|&o| (key(o), o));
    ords
}

/// Select `count` distinct child ordinals into `out` (sorted ascending).
fn place_children(
    policy: PlacementPolicy,
    k: u64,
    count: u64,
    stream: Stream,
    fixed_order: &[u64],
    out: &mut Vec<u64>,
) {
    out.clear();
    if count == 0 {
        return;
    }
    if count >= k {
        out.extend(0..k);
        return;
    }
    match policy {
        PlacementPolicy::CornerPacked | PlacementPolicy::HyperplaneBiased => {
            out.extend_from_slice(&fixed_order[..count as usize]);
            out.sort_unstable();
        }
        PlacementPolicy::UniformSubset | PlacementPolicy::CustomSeeded { .. } => {
            let stream = match policy {
                PlacementPolicy::CustomSeeded { salt } => stream.derive(salt),
                _ => stream,
            };
            // Partial Fisher-Yates. The modulo bias is ~k/2^64, far below
            // anything observable at this scale.
            let mut pool: Vec<u64> = (0..k).collect();
            for i in 0..count {
                let j = i + stream.bits(i) % (k - i);
                pool.swap(i as usize, j as usize);
            }
            out.extend_from_slice(&pool[..count as usize]);
            out.sort_unstable();
        }
        PlacementPolicy::BernoulliIndependent => {
            unreachable!("rejected by PercolationConfig::validate")
        }
    }
}

/// Attach exact survival marks: depth-level cubes are marked independently
/// with probability `1 - q` (the chance the infinite subtree below them is
/// nonempty), and marks propagate upward by OR over retained children. The
/// joint law of marks equals the infinite process restricted to the sampled
/// depth because distinct depth-level subtrees are iid.
pub fn mark_survivors_exact(mut tree: PercolationTree, q: f64) -> Result<PercolationTree> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!(
            "extinction probability must lie in [0,1], got {q}"
        )));
    }
    let depth = tree.config.depth as usize;
    let seed = tree.config.seed;
    let p_survive = 1.0 - q;
    {
        let deepest = &mut tree.levels[depth];
        for slot in 0..deepest.indices.len() {
            let idx = deepest.indices[slot];
            let mark =
                Stream::for_cube(seed, Purpose::Survive, depth as u32, idx).uniform(0) < p_survive;
            wire::set_bit(&mut deepest.marks, slot, mark);
        }
    }
    let k = tree.config.children_per_cube();
    for n in (0..depth).rev() {
        // Children are sorted, so each parent's children form a contiguous
        // run; sweep both levels once.
        let (parents, children) = {
            let (a, b) = tree.levels.split_at_mut(n + 1);
            (&mut a[n], &b[0])
        };
        let mut c = 0usize;
        for slot in 0..parents.indices.len() {
            let idx = parents.indices[slot];
            let hi = (idx + 1) * k;
            let mut any = false;
            while c < children.indices.len() && children.indices[c] < hi {
                any |= wire::get_bit(&children.marks, c);
                c += 1;
            }
            wire::set_bit(&mut parents.marks, slot, any);
        }
    }
    tree.marked = true;
    Ok(tree)
}

/// Rejection cap for conditioning on non-extinction.
pub const REJECTION_CAP: u64 = 1_000_000;

/// Sample a marked tree conditioned on the root surviving, by rejection.
pub fn condition_on_nonextinction(config: &PercolationConfig) -> Result<PercolationTree> {
    config.validate()?;
    let dist = config.offspring_distribution()?;
    if !dist.is_supercritical() {
        return Err(Error::Subcritical(
            "cannot condition on non-extinction: mean offspring <= 1".into(),
        ));
    }
    let q = dist.extinction_prob();
    for attempt in 0..REJECTION_CAP {
        let sub = PercolationConfig {
            seed: attempt_seed(config.seed, attempt),
            condition: false,
            ..config.clone()
        };
        let tree = sample_tree(&sub)?;
        let mut tree = mark_survivors_exact(tree, q)?;
        if tree.root_survives() {
            tree.config = config.clone();
            tree.rejections = attempt;
            return Ok(tree);
        }
    }
    Err(Error::ResourceCap(format!(
        "no surviving tree in {REJECTION_CAP} attempts; the model is too close to critical"
    )))
}

/// Sample a marked tree per the config (conditioned iff `config.condition`).
pub fn sample_marked(config: &PercolationConfig) -> Result<PercolationTree> {
    if config.condition {
        condition_on_nonextinction(config)
    } else {
        config.validate()?;
        let q = config.offspring_distribution()?.extinction_prob();
        mark_survivors_exact(sample_tree(config)?, q)
    }
}

/// Centers of uniformly chosen surviving level-`level` cubes: an
/// approximation of typical points of the natural limit measure at that
/// resolution.
pub fn sample_mu_points(tree: &PercolationTree, level: u32, count: u64) -> Result<Vec<Point>> {
    let slots = tree.surviving_slots(level)?;
    if slots.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no surviving cubes at level {level}"
        )));
    }
    let stream = Stream::for_cube(tree.config.seed, Purpose::MuPoint, level, 0);
    let mut points = Vec::with_capacity(count as usize);
    for i in 0..count {
        // Modulo bias is ~len/2^64: negligible.
        let pick = slots[(stream.bits(i) % slots.len() as u64) as usize];
        points.push(tree.addr(level, pick)?.center());
    }
    Ok(points)
}

/// Config for replica `r`: same model, replica-derived master seed.
pub fn replica_config(config: &PercolationConfig, r: u64) -> PercolationConfig {
    PercolationConfig {
        seed: replica_seed(config.seed, r),
        ..config.clone()
    }
}

/// Run `f` over an ensemble of `replicas` marked trees, in parallel,
/// preserving replica order in the output. `workers` sizes a dedicated
/// thread pool (None uses the global default). Determinism does not depend
/// on the worker count.
pub fn sample_ensemble<T, F>(
    config: &PercolationConfig,
    replicas: u64,
    workers: Option<usize>,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &PercolationTree) -> Result<T> + Sync,
{
    let run = |r: u64| -> Result<T> {
        let cfg = replica_config(config, r);
        let tree = sample_marked(&cfg)?;
        f(r, &tree)
    };
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
            pool.install(|| (0..replicas).into_par_iter().map(run).collect())
        }
        None => (0..replicas).into_par_iter().map(run).collect(),
    }
}

/// Serialize a tree to the versioned PERC1 container.
pub fn tree_to_bytes(tree: &PercolationTree) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&TreeHeader {
        config: tree.config.clone(),
        marked: tree.marked,
        rejections: tree.rejections,
    })?;
    let levels: Vec<WireLevel> = tree
        .levels
        .iter()
        .map(|l| WireLevel {
            indices: l.indices.clone(),
            marks: Some(l.marks.clone()),
        })
        .collect();
    wire::encode(wire::KIND_TREE, &header, &levels)
}

/// Deserialize and fully validate a PERC1 tree.
pub fn tree_from_bytes(bytes: &[u8]) -> Result<PercolationTree> {
    let dec = wire::decode(bytes, wire::KIND_TREE)?;
    let header: TreeHeader = serde_json::from_slice(&dec.header)?;
    let levels: Vec<Vec<u64>> = dec.levels.iter().map(|l| l.indices.clone()).collect();
    let marks: Option<Vec<Vec<bool>>> = header.marked.then(|| {
        dec.levels
            .iter()
            .map(|l| {
                let bits = l.marks.as_deref().unwrap_or(&[]);
                (0..l.indices.len()).map(|i| wire::get_bit(bits, i)).collect()
            })
            .collect()
    });
    let mut tree = PercolationTree::from_parts(header.config, levels, marks, header.rejections)?;
    tree.rejections = header.rejections;
    Ok(tree)
}

/// Human-inspectable JSON form (addresses in `"n:c1,...,cd"` text).
pub fn tree_debug_json(tree: &PercolationTree) -> Result<serde_json::Value> {
    let mut levels = Vec::new();
    for n in 0..=tree.depth() {
        let l = tree.level(n)?;
        let cubes: Vec<serde_json::Value> = (0..l.indices.len())
            .map(|slot| {
                let addr = tree.addr(n, slot).expect("slot in range");
                serde_json::json!({
                    "addr": addr.to_string(),
                    "survives": tree.marked && wire::get_bit(&l.marks, slot),
                })
            })
            .collect();
        levels.push(serde_json::json!({ "level": n, "cubes": cubes }));
    }
    Ok(serde_json::json!({
        "config": tree.config,
        "marked": tree.marked,
        "rejections": tree.rejections,
        "levels": levels,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn hom_config(base: u32, dim: u32, p: f64, depth: u32, seed: u64) -> PercolationConfig {
        PercolationConfig {
            base,
            dim,
            depth,
            model: ModelSpec::Homogeneous { p },
            seed,
            condition: false,
            node_cap: default_node_cap(),
        }
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let cfg = hom_config(2, 2, 0.7, 6, 42);
        let a = sample_tree(&cfg).unwrap();
        let b = sample_tree(&cfg).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        let other = sample_tree(&hom_config(2, 2, 0.7, 6, 43)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn marks_are_or_consistent_and_deterministic() {
        let cfg = hom_config(2, 1, 0.8, 8, 7);
        let t = sample_tree(&cfg).unwrap();
        let q = cfg.offspring_distribution().unwrap().extinction_prob();
        let m1 = mark_survivors_exact(t.clone(), q).unwrap();
        let m2 = mark_survivors_exact(t, q).unwrap();
        assert_eq!(m1, m2);
        m1.check_invariants().unwrap();
        // q = 0 marks every deepest cube, so above it exactly the cubes with
        // a retained line down to the deepest level survive.
        let all = mark_survivors_exact(sample_tree(&cfg).unwrap(), 0.0).unwrap();
        assert_eq!(
            all.surviving_count(cfg.depth).unwrap(),
            all.retained_count(cfg.depth).unwrap()
        );
        for n in 0..cfg.depth {
            let mut with_line = 0u64;
            for (slot, _) in all.retained(n).unwrap().iter().enumerate() {
                let idx = all.retained(n).unwrap()[slot];
                if !all.descendant_slots(n, idx, cfg.depth - n).unwrap().is_empty() {
                    with_line += 1;
                }
            }
            assert_eq!(all.surviving_count(n).unwrap(), with_line);
        }
    }

    #[test]
    fn unmarked_queries_fail() {
        let t = sample_tree(&hom_config(2, 1, 0.8, 3, 1)).unwrap();
        assert!(matches!(
            t.surviving_count(1),
            Err(Error::Precondition(_))
        ));
        assert!(t.retained(4).is_err());
    }

    #[test]
    fn conditioning_always_survives_and_counts_rejections() {
        let mut cfg = hom_config(2, 1, 0.7, 5, 11);
        cfg.condition = true;
        let mut saw_rejection = false;
        for r in 0..40 {
            let t = sample_marked(&replica_config(&cfg, r)).unwrap();
            assert!(t.root_survives());
            saw_rejection |= t.rejections() > 0;
            assert_eq!(t.config().seed, replica_config(&cfg, r).seed);
        }
        // q ~ 0.18, so 40 replicas virtually surely reject at least once.
        assert!(saw_rejection);
        let sub = hom_config(2, 1, 0.4, 4, 5);
        let mut sub_cond = sub.clone();
        sub_cond.condition = true;
        assert!(matches!(
            condition_on_nonextinction(&sub_cond),
            Err(Error::Subcritical(_))
        ));
    }

    #[test]
    fn node_cap_trips() {
        let mut cfg = hom_config(2, 2, 0.9, 8, 3);
        cfg.node_cap = 50;
        assert!(matches!(sample_tree(&cfg), Err(Error::ResourceCap(_))));
    }

    #[test]
    fn forced_children_structure() {
        // All child probabilities 1 except ordinal 0 at 0.5: every retained
        // cube keeps at least M^d - 1 children.
        let cfg = PercolationConfig {
            base: 2,
            dim: 1,
            depth: 4,
            model: ModelSpec::Inhomogeneous {
                probs: vec![0.5, 1.0],
            },
            seed: 9,
            condition: false,
            node_cap: default_node_cap(),
        };
        let t = sample_tree(&cfg).unwrap();
        for n in 0..cfg.depth {
            for &v in t.retained(n).unwrap() {
                let r = t.descendant_slots(n, v, 1).unwrap();
                assert!(r.len() >= 1, "lost the always-retained child");
                // Ordinal 1 is always retained.
                assert!(t.is_retained(n + 1, v * 2 + 1).unwrap());
            }
        }
    }

    #[test]
    fn placement_policies_select_exact_counts() {
        let k = 9u64; // M=3, d=2
        let fixed_corner = placement_order(3, 2, true);
        let fixed_hyper = placement_order(3, 2, false);
        // Corner-packed prefix of 3: ordinals (0,0)=0, then L1=1 ties
        // (0,1)=1 < (1,0)=3.
        assert_eq!(&fixed_corner[..3], &[0, 1, 3]);
        // Hyperplane-biased prefix of 3: first-axis offset 0 first: 0,1,2.
        assert_eq!(&fixed_hyper[..3], &[0, 1, 2]);
        let mut out = Vec::new();
        for policy in [
            PlacementPolicy::UniformSubset,
            PlacementPolicy::CornerPacked,
            PlacementPolicy::HyperplaneBiased,
            PlacementPolicy::CustomSeeded { salt: 5 },
        ] {
            for count in [0u64, 1, 4, 9] {
                place_children(
                    policy,
                    k,
                    count,
                    Stream::for_cube(1, Purpose::Place, 0, 0),
                    if matches!(policy, PlacementPolicy::CornerPacked) {
                        &fixed_corner
                    } else {
                        &fixed_hyper
                    },
                    &mut out,
                );
                assert_eq!(out.len(), count as usize);
                assert!(out.windows(2).all(|w| w[0] < w[1]), "sorted distinct");
                assert!(out.iter().all(|&o| o < k));
            }
        }
    }

    #[test]
    fn uniform_subset_is_uniform() {
        // Draw a 1-subset of 2 children many times; ordinal 0 frequency ~ 1/2.
        let mut zero = 0u64;
        let n = 20_000u64;
        let mut out = Vec::new();
        for i in 0..n {
            place_children(
                PlacementPolicy::UniformSubset,
                2,
                1,
                Stream::for_cube(3, Purpose::Place, 0, i),
                &[],
                &mut out,
            );
            if out[0] == 0 {
                zero += 1;
            }
        }
        let freq = zero as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.018, "freq {freq}"); // 5 sigma
    }

    #[test]
    fn custom_seed_changes_placement() {
        let cfg_a = PercolationConfig {
            base: 2,
            dim: 2,
            depth: 5,
            model: ModelSpec::General {
                pmf: vec![0.0, 0.0, 1.0, 0.0, 0.0],
                placement: PlacementPolicy::CustomSeeded { salt: 1 },
            },
            seed: 77,
            condition: false,
            node_cap: default_node_cap(),
        };
        let mut cfg_b = cfg_a.clone();
        cfg_b.model = ModelSpec::General {
            pmf: vec![0.0, 0.0, 1.0, 0.0, 0.0],
            placement: PlacementPolicy::CustomSeeded { salt: 2 },
        };
        let a = sample_tree(&cfg_a).unwrap();
        let b = sample_tree(&cfg_b).unwrap();
        // Same counts (always 2 children), different positions.
        assert_eq!(a.retained_count(1).unwrap(), 2);
        assert_eq!(b.retained_count(1).unwrap(), 2);
        assert_ne!(a, b);
    }

    #[test]
    fn general_model_respects_count_law() {
        // Deterministic count 2 of K=4: every retained cube has exactly 2
        // children at every level.
        let cfg = PercolationConfig {
            base: 2,
            dim: 2,
            depth: 5,
            model: ModelSpec::General {
                pmf: vec![0.0, 0.0, 1.0, 0.0, 0.0],
                placement: PlacementPolicy::UniformSubset,
            },
            seed: 5,
            condition: false,
            node_cap: default_node_cap(),
        };
        let t = sample_tree(&cfg).unwrap();
        for n in 0..cfg.depth {
            assert_eq!(t.retained_count(n + 1).unwrap(), 2 * t.retained_count(n).unwrap());
        }
    }

    #[test]
    fn bernoulli_placement_rejected_for_general() {
        let cfg = PercolationConfig {
            base: 2,
            dim: 1,
            depth: 2,
            model: ModelSpec::General {
                pmf: vec![0.2, 0.3, 0.5],
                placement: PlacementPolicy::BernoulliIndependent,
            },
            seed: 1,
            condition: false,
            node_cap: default_node_cap(),
        };
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn mu_points_live_in_surviving_cubes() {
        let mut cfg = hom_config(2, 2, 0.7, 6, 13);
        cfg.condition = true;
        let t = sample_marked(&cfg).unwrap();
        let pts = sample_mu_points(&t, 4, 50).unwrap();
        assert_eq!(pts.len(), 50);
        let side = 2.0f64.powi(-4);
        for p in &pts {
            let coords: Vec<u64> = p.coords.iter().map(|&x| (x / side) as u64).collect();
            let idx = mcube::flat_index(2, 2, 4, &coords);
            assert!(t.survives_index(4, idx).unwrap());
        }
        assert!(sample_mu_points(&t, 4, 0).unwrap().is_empty());
    }

    #[test]
    fn serialization_roundtrip_and_corruption() {
        let mut cfg = hom_config(2, 2, 0.7, 5, 21);
        cfg.condition = true;
        let t = sample_marked(&cfg).unwrap();
        let bytes = tree_to_bytes(&t).unwrap();
        let back = tree_from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
        // Determinism of the byte form itself.
        assert_eq!(bytes, tree_to_bytes(&sample_marked(&cfg).unwrap()).unwrap());
        assert!(tree_from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 1;
        assert!(tree_from_bytes(&bad).is_err());
    }

    #[test]
    fn debug_json_uses_text_addresses() {
        let t = sample_marked(&hom_config(2, 2, 0.7, 2, 3)).unwrap();
        let v = tree_debug_json(&t).unwrap();
        assert_eq!(v["levels"][0]["cubes"][0]["addr"], "0:0,0");
        assert_eq!(v["config"]["M"], 2);
    }

    #[test]
    fn config_json_schema_roundtrip() {
        let json = r#"{
            "M": 2, "d": 2, "depth": 6,
            "model": {"type": "homogeneous", "p": 0.7},
            "seed": 42, "condition": true
        }"#;
        let cfg: PercolationConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.base, 2);
        assert!(cfg.condition);
        assert_eq!(cfg.node_cap, default_node_cap());
        cfg.validate().unwrap();
        let gen = r#"{
            "M": 2, "d": 1, "depth": 3,
            "model": {"type": "general", "pmf": [0.1, 0.3, 0.6],
                      "placement": {"policy": "custom-seeded", "salt": 9}},
            "seed": 1
        }"#;
        let cfg2: PercolationConfig = serde_json::from_str(gen).unwrap();
        cfg2.validate().unwrap();
        let back = serde_json::to_string(&cfg2).unwrap();
        let again: PercolationConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(cfg2, again);
        assert!(serde_json::from_str::<PercolationConfig>(r#"{"M":2}"#).is_err());
    }

    #[test]
    fn ensemble_results_are_worker_independent() {
        let mut cfg = hom_config(2, 2, 0.7, 6, 99);
        cfg.condition = true;
        let count = |_r: u64, t: &PercolationTree| t.surviving_count(6);
        let one = sample_ensemble(&cfg, 32, Some(1), count).unwrap();
        let four = sample_ensemble(&cfg, 32, Some(4), count).unwrap();
        let eight = sample_ensemble(&cfg, 32, Some(8), count).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, eight);
    }
}
