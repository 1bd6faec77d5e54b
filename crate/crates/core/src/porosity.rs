//! Porosity measurement on occupied cube sets.
//!
//! The occupied set is a finite union of closed M-adic cubes at one level,
//! stored with its ancestor hierarchy so distance queries prune whole
//! subtrees. Porosity at a point x and scale r is the largest relative
//! radius of a ball that fits inside `B(x,r)` without touching the set;
//! it is maximised by branch-and-bound over a fine M-adic lattice, which
//! is exact up to the stated grid error because the objective is
//! 1-Lipschitz. Everything outside the unit cube counts as empty space.

use crate::error::{Error, Result};
use crate::mcube::{self, Cone, CubeAddress, Point};
use crate::sampler::PercolationTree;
use crate::stats::{self, LeastSquares};
use crate::stream::{Purpose, Stream};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Which cubes of a tree level constitute the occupied set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Occupancy {
    Retained,
    Surviving,
}

/// A finite union of same-level closed cubes plus its ancestor hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupiedSet {
    base: u32,
    dim: u32,
    level: u32,
    /// `levels[l]` = sorted flat indices at level `l` having an occupied
    /// descendant at `self.level`; `levels[self.level]` is the set itself.
    levels: Vec<Vec<u64>>,
}

/// Ancestor counts of a sorted index list: returns the number of distinct
/// level-`l` ancestors for `l = 1..=level` (the last entry is the list
/// length itself). `k` is the child count per cube.
pub fn ancestor_counts(k: u64, level: u32, indices: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64; level as usize];
    let mut cur: Vec<u64> = indices.to_vec();
    for l in (1..=level).rev() {
        out[l as usize - 1] = cur.len() as u64;
        if l > 1 {
            cur = cur.iter().map(|&v| v / k).collect();
            cur.dedup();
        }
    }
    out
}

impl OccupiedSet {
    pub fn from_indices(base: u32, dim: u32, level: u32, indices: Vec<u64>) -> Result<OccupiedSet> {
        if base < 2 || dim == 0 {
            return Err(Error::Parameter("need base >= 2 and dim >= 1".into()));
        }
        if !mcube::index_width_ok(base, dim, level) {
            return Err(Error::Parameter(
                "level exceeds the 63-bit flattened index width".into(),
            ));
        }
        let k = u64::from(base).pow(dim);
        let width = (k as u128).pow(level);
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Format("indices must be strictly sorted".into()));
            }
        }
        if let Some(&last) = indices.last() {
            if u128::from(last) >= width {
                return Err(Error::Format("index out of range for level".into()));
            }
        }
        let mut levels = vec![Vec::new(); level as usize + 1];
        levels[level as usize] = indices;
        for l in (0..level as usize).rev() {
            let mut up: Vec<u64> = levels[l + 1].iter().map(|&v| v / k).collect();
            up.dedup();
            levels[l] = up;
        }
        Ok(OccupiedSet {
            base,
            dim,
            level,
            levels,
        })
    }

    /// Occupied set from one tree level (retained cubes, or surviving ones
    /// when the tree carries marks).
    pub fn from_tree(tree: &PercolationTree, occ: Occupancy, level: u32) -> Result<OccupiedSet> {
        let indices = match occ {
            Occupancy::Retained => tree.retained(level)?.to_vec(),
            Occupancy::Surviving => tree.surviving(level)?,
        };
        OccupiedSet::from_indices(tree.config().base, tree.config().dim, level, indices)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn leaf_indices(&self) -> &[u64] {
        &self.levels[self.level as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_indices().is_empty()
    }

    /// Number of distinct occupied-set ancestors at a level.
    pub fn count_at(&self, level: u32) -> Result<u64> {
        self.levels
            .get(level as usize)
            .map(|v| v.len() as u64)
            .ok_or_else(|| Error::LevelMismatch(format!("level {level} beyond {}", self.level)))
    }

    fn children_per_cube(&self) -> u64 {
        u64::from(self.base).pow(self.dim)
    }

    /// Lower corner and side of the box of cube `idx` at `level`.
    fn box_of(&self, level: u32, idx: u64, lo: &mut Vec<f64>) -> f64 {
        let side = f64::from(self.base).powi(-(level as i32));
        let mut coords = vec![0u64; self.dim as usize];
        mcube::coords_from_flat_into(self.base, self.dim, level, idx, &mut coords);
        lo.clear();
        lo.extend(coords.iter().map(|&c| c as f64 * side));
        side
    }

    fn near_far(&self, level: u32, idx: u64, y: &Point, scratch: &mut Vec<f64>) -> (f64, f64) {
        let side = self.box_of(level, idx, scratch);
        let mut near2 = 0.0;
        let mut far2 = 0.0;
        for (l, &lo) in scratch.iter().enumerate() {
            let hi = lo + side;
            let c = y.coords[l];
            let g = (lo - c).max(c - hi).max(0.0);
            near2 += g * g;
            let f = (c - lo).max(hi - c);
            far2 += f * f;
        }
        (near2.sqrt(), far2.sqrt())
    }

    /// `min(cap, distance from y to the set)`. The empty set is infinitely
    /// far, so it returns `cap`.
    pub fn nearest_dist(&self, y: &Point, cap: f64) -> f64 {
        if cap <= 0.0 || self.is_empty() {
            return cap;
        }
        let mut scratch = Vec::with_capacity(self.dim as usize);
        let k = self.children_per_cube();
        let mut heap: BinaryHeap<std::cmp::Reverse<DistEntry>> = BinaryHeap::new();
        let (near, _) = self.near_far(0, 0, y, &mut scratch);
        if near >= cap {
            return cap;
        }
        heap.push(std::cmp::Reverse(DistEntry {
            dist: near,
            level: 0,
            idx: 0,
        }));
        while let Some(std::cmp::Reverse(e)) = heap.pop() {
            if e.dist >= cap {
                return cap;
            }
            if e.level == self.level {
                return e.dist;
            }
            let child = &self.levels[e.level as usize + 1];
            let lo = e.idx * k;
            let a = child.partition_point(|&x| x < lo);
            let b = child.partition_point(|&x| x < lo + k);
            for &c in &child[a..b] {
                let (near, _) = self.near_far(e.level + 1, c, y, &mut scratch);
                if near < cap {
                    heap.push(std::cmp::Reverse(DistEntry {
                        dist: near,
                        level: e.level + 1,
                        idx: c,
                    }));
                }
            }
        }
        cap
    }

    /// Closed-cube membership (points on shared faces belong to both cubes).
    pub fn contains_point(&self, p: &Point) -> bool {
        if p.coords.len() != self.dim as usize {
            return false;
        }
        let m = f64::from(self.base);
        let width = m.powi(self.level as i32);
        // Candidate coordinates per axis: the containing cell, plus the cell
        // below when p lies exactly on a lattice hyperplane.
        let mut cands: Vec<Vec<u64>> = Vec::with_capacity(self.dim as usize);
        for &c in &p.coords {
            let scaled = c * width;
            if !(0.0..=width).contains(&scaled) {
                return false;
            }
            let f = scaled.floor();
            let mut v = Vec::with_capacity(2);
            if f < width {
                v.push(f as u64);
            }
            if scaled == f && f > 0.0 {
                v.push(f as u64 - 1);
            }
            if scaled == width {
                v.push(width as u64 - 1);
            }
            v.sort_unstable();
            v.dedup();
            cands.push(v);
        }
        let mut pick = vec![0usize; self.dim as usize];
        let mut coords = vec![0u64; self.dim as usize];
        loop {
            for l in 0..self.dim as usize {
                coords[l] = cands[l][pick[l]];
            }
            let idx = mcube::flat_index(self.base, self.dim, self.level, &coords);
            if self.leaf_indices().binary_search(&idx).is_ok() {
                return true;
            }
            // Odometer over the candidate combinations.
            let mut l = 0;
            loop {
                if l == self.dim as usize {
                    return false;
                }
                pick[l] += 1;
                if pick[l] < cands[l].len() {
                    break;
                }
                pick[l] = 0;
                l += 1;
            }
        }
    }

    /// True when the lattice cell `coords` at `level >= self.level` lies
    /// inside an occupied cube (then no point of the cell is empty space).
    fn covers_cell(&self, level: u32, coords: &[i64]) -> bool {
        if level < self.level {
            return false;
        }
        let m = i64::from(self.base);
        let width = match m.checked_pow(level) {
            Some(w) => w,
            None => return false,
        };
        let shift = u64::from(self.base).pow(level - self.level);
        let mut anc = vec![0u64; self.dim as usize];
        for (l, &c) in coords.iter().enumerate() {
            if c < 0 || c >= width {
                return false;
            }
            anc[l] = c as u64 / shift;
        }
        let idx = mcube::flat_index(self.base, self.dim, self.level, &anc);
        self.leaf_indices().binary_search(&idx).is_ok()
    }
}

#[derive(PartialEq)]
struct DistEntry {
    dist: f64,
    level: u32,
    idx: u64,
}

impl Eq for DistEntry {}

impl Ord for DistEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.level.cmp(&other.level))
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for DistEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One porosity measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PorosityValue {
    /// Relative hole radius in `[0, 1/2]`.
    pub value: f64,
    /// Grid resolution bound: the true value is within this of `value`.
    pub error: f64,
    /// Lattice level the maximisation ran on.
    pub grid_level: u32,
}

struct Cell {
    ub: f64,
    v: f64,
    level: u32,
    coords: Vec<i64>,
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cell {}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ub
            .total_cmp(&other.ub)
            .then(self.level.cmp(&other.level))
            .then_with(|| self.coords.cmp(&other.coords))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate_point(x: &Point, dim: u32) -> Result<()> {
    if x.coords.len() != dim as usize {
        return Err(Error::Parameter(format!(
            "point has {} coordinates, set has dimension {dim}",
            x.coords.len()
        )));
    }
    if x.coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::Parameter("point coordinates must be finite".into()));
    }
    Ok(())
}

fn validate_radius(r: f64) -> Result<()> {
    if !r.is_finite() || r <= 0.0 || r > 4.0 {
        return Err(Error::Parameter(format!(
            "scale must lie in (0, 4], got {r}"
        )));
    }
    Ok(())
}

/// Porosity of the occupied set at point `x` and scale `r`: the largest
/// `rho` such that some ball of radius `rho * r` fits inside `B(x, r)`
/// without meeting the set, maximised over ball centers on the M-adic
/// lattice `g` levels below the scale level of `r` and clamped to the
/// geometric range `[0, 1/2]`. The reported error bounds the lattice
/// discretisation (the objective is 1-Lipschitz in the center).
pub fn porosity_at(set: &OccupiedSet, x: &Point, r: f64, g: u32) -> Result<PorosityValue> {
    validate_point(x, set.dim)?;
    validate_radius(r)?;
    let m = f64::from(set.base);
    // Smallest k >= 0 with M^-k <= r.
    let mut k = 0u32;
    let mut side = 1.0f64;
    while side > r {
        side /= m;
        k += 1;
    }
    let grid = k + g;
    if mcube::checked_pow(u64::from(set.base), grid).map_or(true, |w| w > 1 << 62) {
        return Err(Error::Parameter(format!(
            "lattice level {grid} too fine for exact coordinates"
        )));
    }
    let sqd = (set.dim as f64).sqrt();
    let dim = set.dim as usize;

    // v(y) = min(dist to set, r - |y - x|): the largest admissible hole
    // radius centered at y. 1-Lipschitz, so max over a cell of diameter t
    // is at most v(corner) + t.
    let value_at = |coords: &[i64], level: u32| -> f64 {
        let cs = m.powi(-(level as i32));
        let y = Point::new(coords.iter().map(|&c| c as f64 * cs).collect());
        let room = r - y.dist(x);
        set.nearest_dist(&y, room.max(0.0)).min(room)
    };

    let mut best = 0.0f64;
    let mut heap: BinaryHeap<Cell> = BinaryHeap::new();
    // Root cells at level k cover B(x, r) with a few cells per axis.
    let scale = m.powi(k as i32);
    let mut ranges: Vec<(i64, i64)> = Vec::with_capacity(dim);
    for &c in &x.coords {
        let lo = ((c - r) * scale).floor() as i64;
        let hi = ((c + r) * scale).floor() as i64;
        ranges.push((lo, hi));
    }
    let mut cur: Vec<i64> = ranges.iter().map(|&(lo, _)| lo).collect();
    'outer: loop {
        let v = value_at(&cur, k);
        let ub = v + sqd * m.powi(-(k as i32));
        if ub > best {
            heap.push(Cell {
                ub,
                v,
                level: k,
                coords: cur.clone(),
            });
        }
        let mut l = 0;
        loop {
            if l == dim {
                break 'outer;
            }
            cur[l] += 1;
            if cur[l] <= ranges[l].1 {
                break;
            }
            cur[l] = ranges[l].0;
            l += 1;
        }
    }

    let mb = i64::from(set.base);
    while let Some(cell) = heap.pop() {
        if cell.ub <= best {
            break;
        }
        if cell.level == grid {
            best = best.max(cell.v);
            continue;
        }
        if set.covers_cell(cell.level, &cell.coords) {
            // Every point of the cell lies in the set: v <= 0 throughout.
            continue;
        }
        let child_level = cell.level + 1;
        let diam = sqd * m.powi(-(child_level as i32));
        let mut child = vec![0i64; dim];
        let kids = u64::from(set.base).pow(set.dim);
        for ord in 0..kids {
            let mut rem = ord;
            for l in (0..dim).rev() {
                child[l] = cell.coords[l] * mb + (rem % u64::from(set.base)) as i64;
                rem /= u64::from(set.base);
            }
            let v = value_at(&child, child_level);
            let ub = v + diam;
            if ub > best {
                heap.push(Cell {
                    ub,
                    v,
                    level: child_level,
                    coords: child.clone(),
                });
            }
        }
    }

    Ok(PorosityValue {
        value: (best / r).clamp(0.0, 0.5),
        error: sqd * m.powi(-(grid as i32)) / r,
        grid_level: grid,
    })
}

struct FarEntry {
    bound: f64,
    level: u32,
    idx: u64,
}

impl PartialEq for FarEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FarEntry {}

impl Ord for FarEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then(self.level.cmp(&other.level))
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for FarEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Annular porosity at `x` and scale `r`: `1 - t/r` where `t` is the
/// largest distance from `x` to a set point within the closed ball
/// `B(x, r)`. The annulus between radii `t` and `r` is empty. Exact up to
/// floating point: for a closed cube meeting the ball, the farthest point
/// of the intersection is at `min(r, far corner)` by connectedness. An
/// empty set gives 1.
pub fn annular_porosity_at(set: &OccupiedSet, x: &Point, r: f64) -> Result<f64> {
    validate_point(x, set.dim)?;
    validate_radius(r)?;
    if set.is_empty() {
        return Ok(1.0);
    }
    let k = set.children_per_cube();
    let mut scratch = Vec::with_capacity(set.dim as usize);
    let mut heap: BinaryHeap<FarEntry> = BinaryHeap::new();
    let (near, far) = set.near_far(0, 0, x, &mut scratch);
    if near <= r {
        heap.push(FarEntry {
            bound: far.min(r),
            level: 0,
            idx: 0,
        });
    }
    while let Some(e) = heap.pop() {
        if e.level == set.level {
            return Ok((1.0 - e.bound / r).clamp(0.0, 1.0));
        }
        let child = &set.levels[e.level as usize + 1];
        let lo = e.idx * k;
        let a = child.partition_point(|&v| v < lo);
        let b = child.partition_point(|&v| v < lo + k);
        for &c in &child[a..b] {
            let (near, far) = set.near_far(e.level + 1, c, x, &mut scratch);
            if near <= r {
                heap.push(FarEntry {
                    bound: far.min(r),
                    level: e.level + 1,
                    idx: c,
                });
            }
        }
    }
    Ok(1.0)
}

/// Porosity sampled over a grid of scales, with the extremes over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PorosityProfile {
    pub point: Point,
    pub scales: Vec<f64>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub grid_levels: Vec<u32>,
    /// Max of `values`: finite-scale stand-in for the upper porosity.
    pub upor: f64,
    /// Min of `values`: finite-scale stand-in for the lower porosity.
    pub lpor: f64,
}

pub fn porosity_profile(
    set: &OccupiedSet,
    x: &Point,
    scales: &[f64],
    g: u32,
) -> Result<PorosityProfile> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("need at least one scale".into()));
    }
    let mut values = Vec::with_capacity(scales.len());
    let mut errors = Vec::with_capacity(scales.len());
    let mut grid_levels = Vec::with_capacity(scales.len());
    for &r in scales {
        let pv = porosity_at(set, x, r, g)?;
        values.push(pv.value);
        errors.push(pv.error);
        grid_levels.push(pv.grid_level);
    }
    let upor = values.iter().cloned().fold(f64::MIN, f64::max);
    let lpor = values.iter().cloned().fold(f64::MAX, f64::min);
    Ok(PorosityProfile {
        point: x.clone(),
        scales: scales.to_vec(),
        values,
        errors,
        grid_levels,
        upor,
        lpor,
    })
}

/// Scale grid `sqrt(d) * M^(-k*N)` for `k = k_min..=k_max`: the radii at
/// which block constructions with block size `N` exhibit their holes.
pub fn theorem_scale_grid(base: u32, dim: u32, block: u32, ks: std::ops::RangeInclusive<u32>) -> Vec<f64> {
    let m = f64::from(base);
    let sqd = (dim as f64).sqrt();
    ks.map(|k| sqd * m.powi(-((k * block) as i32))).collect()
}

/// Plain geometric scale grid `M^-k` for `k = k_min..=k_max`.
pub fn default_scale_grid(base: u32, ks: std::ops::RangeInclusive<u32>) -> Vec<f64> {
    let m = f64::from(base);
    ks.map(|k| m.powi(-(k as i32))).collect()
}

/// Box-counting dimension fit from per-level counts.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct BoxDim {
    pub dimension: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Set when the counts do not grow at all (constant data): the fit
    /// degenerates to slope 0.
    pub degenerate: bool,
}

/// Least-squares fit of `ln(count)` against `level * ln(M)`.
pub fn box_dimension(base: u32, levels: &[u32], counts: &[u64]) -> Result<BoxDim> {
    if levels.len() != counts.len() {
        return Err(Error::Parameter("levels/counts length mismatch".into()));
    }
    if levels.len() < 2 {
        return Err(Error::EmptyInput("need at least two levels".into()));
    }
    for w in levels.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Parameter("levels must be strictly increasing".into()));
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::EmptyInput("zero count has no log".into()));
    }
    let lnm = f64::from(base).ln();
    let xs: Vec<f64> = levels.iter().map(|&l| f64::from(l) * lnm).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let ls: LeastSquares = stats::least_squares(&xs, &ys)?;
    Ok(BoxDim {
        dimension: ls.slope,
        intercept: ls.intercept,
        r2: ls.r2,
        degenerate: ls.degenerate,
    })
}

/// How a hole witness had to be picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoleFallback {
    /// No cube met the witness ball; fell back to the first survivor
    /// touching a missing child.
    AdjacentToMissing,
    /// Not even an adjacent survivor; fell back to the first survivor.
    LexFirstSurvivor,
}

/// Survivors of a partially subdivided cube that meet the ball inscribed in
/// its first missing child.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMeeting {
    /// Lexicographically sorted witnesses; with a fallback, exactly the one
    /// chosen cube.
    pub cubes: Vec<CubeAddress>,
    pub fallback: Option<HoleFallback>,
}

/// For a retained cube `q` whose children are partially retained, find the
/// surviving cubes `block` levels below `q` that meet (closed-ball test,
/// exact integer arithmetic) the ball inscribed in the lexicographically
/// first non-retained child. Touching at a single boundary point counts.
pub fn hole_meeting_children(
    tree: &PercolationTree,
    q: &CubeAddress,
    block: u32,
) -> Result<HoleMeeting> {
    let cfg = tree.config();
    if q.base() != cfg.base || q.dim() != cfg.dim {
        return Err(Error::Parameter("cube does not match the tree geometry".into()));
    }
    if block == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    if q.level() + block > cfg.depth {
        return Err(Error::LevelMismatch(format!(
            "need level {} in a depth-{} tree",
            q.level() + block,
            cfg.depth
        )));
    }
    let q_idx = q.flat();
    if !tree.is_retained(q.level(), q_idx)? {
        return Err(Error::Precondition("cube is not retained".into()));
    }
    let k = cfg.children_per_cube();
    let child_range = tree.descendant_slots(q.level(), q_idx, 1)?;
    let child_count = child_range.len() as u64;
    if child_count == 0 || child_count == k {
        return Err(Error::Precondition(
            "hole witnesses need a partially subdivided cube".into(),
        ));
    }
    let child_level = tree.retained(q.level() + 1)?;
    let first = q_idx * k;
    let mut missing: Vec<u64> = Vec::new();
    {
        let present = &child_level[child_range.clone()];
        let mut pi = 0;
        for ord in 0..k {
            if pi < present.len() && present[pi] == first + ord {
                pi += 1;
            } else {
                missing.push(ord);
            }
        }
    }
    // Witness ball: inscribed in the first missing child. In units of
    // 1/(2 M^L) with L the candidate level, its center has coordinates
    // (2c+1) M^(block-1) and its radius is M^(block-1); a candidate cube
    // [a, a+1] spans [2a, 2a+2]. All exact integers.
    let hole = q.child(missing[0])?;
    let cand_level = q.level() + block;
    let scale = u128::from(cfg.base).pow(block - 1);
    let z: Vec<u128> = hole
        .coords()
        .iter()
        .map(|&c| (2 * u128::from(c) + 1) * scale)
        .collect();
    let r2 = scale * scale;
    let slots = tree.descendant_slots(q.level(), q_idx, block)?;
    let level_indices = tree.retained(cand_level)?;
    let mut survivors: Vec<u64> = Vec::new();
    let mut meets: Vec<u64> = Vec::new();
    let mut coords = vec![0u64; cfg.dim as usize];
    for slot in slots {
        if !tree.survives_slot(cand_level, slot)? {
            continue;
        }
        let idx = level_indices[slot];
        survivors.push(idx);
        mcube::coords_from_flat_into(cfg.base, cfg.dim, cand_level, idx, &mut coords);
        let mut gap2: u128 = 0;
        for (l, &a) in coords.iter().enumerate() {
            let lo = 2 * u128::from(a);
            let hi = lo + 2;
            let g = if hi < z[l] {
                z[l] - hi
            } else if z[l] < lo {
                lo - z[l]
            } else {
                0
            };
            gap2 += g * g;
        }
        if gap2 <= r2 {
            meets.push(idx);
        }
    }
    if survivors.is_empty() {
        return Err(Error::Precondition(
            "no surviving descendants at the witness level".into(),
        ));
    }
    let to_addr = |idx: u64| CubeAddress::from_flat(cfg.base, cfg.dim, cand_level, idx);
    if !meets.is_empty() {
        return Ok(HoleMeeting {
            cubes: meets.into_iter().map(to_addr).collect::<Result<_>>()?,
            fallback: None,
        });
    }
    // Fallback 1: first survivor touching any missing child.
    let holes: Vec<CubeAddress> = missing
        .iter()
        .map(|&o| q.child(o))
        .collect::<Result<_>>()?;
    for &idx in &survivors {
        let addr = to_addr(idx)?;
        let touches = holes
            .iter()
            .map(|h| mcube::cube_gap_sq_units(&addr, h).map(|(g2, _)| g2 == 0))
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .any(|t| t);
        if touches {
            return Ok(HoleMeeting {
                cubes: vec![addr],
                fallback: Some(HoleFallback::AdjacentToMissing),
            });
        }
    }
    // Fallback 2: first survivor, unconditionally.
    Ok(HoleMeeting {
        cubes: vec![to_addr(survivors[0])?],
        fallback: Some(HoleFallback::LexFirstSurvivor),
    })
}

/// Which side of the porosity threshold a level set collects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelSetMode {
    /// Points whose max porosity over the scale grid is <= alpha.
    UporAtMost,
    /// Points whose min porosity over the scale grid is >= alpha.
    LporAtLeast,
}

/// Representative point per member cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointPolicy {
    /// Cube center.
    Center,
    /// Center of a uniformly drawn surviving deepest-level descendant:
    /// approximates a natural-measure sample within the cube.
    MuSample,
}

/// A porosity level set estimated on one tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetEstimate {
    pub level: u32,
    /// Sorted flat indices of member cubes at `level`.
    pub members: Vec<u64>,
    pub member_count: u64,
    /// Box-dimension fit over the members' ancestor counts; None when the
    /// set is empty or too shallow to fit.
    pub dimension: Option<BoxDim>,
}

/// Collect the surviving level-`level` cubes whose porosity profile (against
/// the surviving set at full depth) passes the threshold test, and fit their
/// box dimension.
pub fn level_set(
    tree: &PercolationTree,
    level: u32,
    alpha: f64,
    mode: LevelSetMode,
    scales: &[f64],
    g: u32,
    policy: PointPolicy,
) -> Result<LevelSetEstimate> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "porosity threshold must lie in [0, 1/2], got {alpha}"
        )));
    }
    let cfg = tree.config();
    if level > cfg.depth {
        return Err(Error::LevelMismatch(format!(
            "level {level} beyond depth {}",
            cfg.depth
        )));
    }
    let set = OccupiedSet::from_tree(tree, Occupancy::Surviving, cfg.depth)?;
    let slots = tree.surviving_slots(level)?;
    let level_indices = tree.retained(level)?;
    let mut members = Vec::new();
    for slot in slots {
        let idx = level_indices[slot];
        let x = match policy {
            PointPolicy::Center => tree.addr(level, slot)?.center(),
            PointPolicy::MuSample => {
                let range = tree.descendant_slots(level, idx, cfg.depth - level)?;
                let alive: Vec<usize> = range
                    .filter(|&s| tree.survives_slot(cfg.depth, s).unwrap_or(false))
                    .collect();
                // A surviving cube has a surviving deepest-level descendant.
                let pick = Stream::for_cube(cfg.seed, Purpose::MuPoint, level, idx).bits(0)
                    % alive.len() as u64;
                tree.addr(cfg.depth, alive[pick as usize])?.center()
            }
        };
        let profile = porosity_profile(&set, &x, scales, g)?;
        let pass = match mode {
            LevelSetMode::UporAtMost => profile.upor <= alpha,
            LevelSetMode::LporAtLeast => profile.lpor >= alpha,
        };
        if pass {
            members.push(idx);
        }
    }
    let dimension = if members.is_empty() || level < 2 {
        None
    } else {
        let counts = ancestor_counts(cfg.children_per_cube(), level, &members);
        let levels: Vec<u32> = (1..=level).collect();
        Some(box_dimension(cfg.base, &levels, &counts)?)
    };
    Ok(LevelSetEstimate {
        level,
        member_count: members.len() as u64,
        members,
        dimension,
    })
}

/// A cube seen from every one of its sample points with neighbours in every
/// direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConicalWitness {
    /// Position in the input slice.
    pub index: usize,
    pub cube: CubeAddress,
}

/// Cone aperture used by the central-cube search: cos of the half-angle.
pub const CONE_APERTURE: f64 = 0.8;

/// Direction net on the unit sphere: both signs for d=1, a uniform circle
/// net for d=2, a Fibonacci sphere for d=3.
pub fn sphere_net(dim: u32, net: u32) -> Result<Vec<Vec<f64>>> {
    match dim {
        1 => Ok(vec![vec![1.0], vec![-1.0]]),
        2 => {
            if net < 8 {
                return Err(Error::Parameter("need a net of at least 8 directions".into()));
            }
            Ok((0..net)
                .map(|i| {
                    let t = 2.0 * std::f64::consts::PI * f64::from(i) / f64::from(net);
                    vec![t.cos(), t.sin()]
                })
                .collect())
        }
        3 => {
            if net < 8 {
                return Err(Error::Parameter("need a net of at least 8 directions".into()));
            }
            // Fibonacci sphere: near-uniform without clustering at poles.
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            Ok((0..net)
                .map(|i| {
                    let z = 1.0 - 2.0 * (f64::from(i) + 0.5) / f64::from(net);
                    let rho = (1.0 - z * z).sqrt();
                    let phi = golden * f64::from(i);
                    vec![rho * phi.cos(), rho * phi.sin(), z]
                })
                .collect())
        }
        _ => Err(Error::Unsupported(
            "direction nets are available for dimensions 1 to 3".into(),
        )),
    }
}

/// Find the first cube in `cubes` that is central for the family: from each
/// of its sample points (center and corners), every net direction has some
/// other family cube lying fully inside the cone of aperture 4/5 at
/// distance more than one cube side (exact integer test). Returns None when
/// no cube qualifies.
pub fn conical_central_cube(cubes: &[CubeAddress], net: u32) -> Result<Option<ConicalWitness>> {
    if cubes.is_empty() {
        return Ok(None);
    }
    let base = cubes[0].base();
    let dim = cubes[0].dim();
    let level = cubes[0].level();
    if dim > 3 {
        return Err(Error::Unsupported(
            "the conical search is implemented for dimensions 1 to 3".into(),
        ));
    }
    for c in cubes {
        if c.base() != base || c.dim() != dim || c.level() != level {
            return Err(Error::Parameter(
                "family cubes must share base, dimension, and level".into(),
            ));
        }
    }
    let directions = sphere_net(dim, net)?;
    // Corner points of each cube, reused across candidates.
    let corners: Vec<Vec<Point>> = cubes.iter().map(cube_corners).collect();
    // far[i][j]: cubes i and j are farther apart than one cube side.
    let n = cubes.len();
    let mut far = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut gap2: u128 = 0;
            for l in 0..dim as usize {
                let a = cubes[i].coords()[l];
                let b = cubes[j].coords()[l];
                let g = u128::from(a.saturating_sub(b + 1) + b.saturating_sub(a + 1));
                gap2 += g * g;
            }
            far[i][j] = gap2 > 1;
            far[j][i] = far[i][j];
        }
    }
    'candidate: for (i, cand) in cubes.iter().enumerate() {
        let mut samples = vec![cand.center()];
        samples.extend(corners[i].iter().cloned());
        for x in &samples {
            for dir in &directions {
                let cone = Cone::new(x.clone(), dir.clone(), CONE_APERTURE)?;
                let hit = (0..n).any(|j| {
                    j != i && far[i][j] && corners[j].iter().all(|p| cone.contains(p))
                });
                if !hit {
                    continue 'candidate;
                }
            }
        }
        return Ok(Some(ConicalWitness {
            index: i,
            cube: cand.clone(),
        }));
    }
    Ok(None)
}

fn cube_corners(c: &CubeAddress) -> Vec<Point> {
    let lo = c.lower_corner();
    let side = c.side();
    let d = lo.len();
    (0..1u32 << d)
        .map(|mask| {
            Point::new(
                (0..d)
                    .map(|l| lo[l] + if mask >> l & 1 == 1 { side } else { 0.0 })
                    .collect(),
            )
        })
        .collect()
}
