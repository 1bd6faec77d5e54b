//! M-adic cube addressing and exact cube geometry.
//!
//! A level-`n` cube in `[0,1]^d` with subdivision base `M` is identified by
//! integer coordinates `c_l in [0, M^n)` per axis; the cube is the closed box
//! `prod_l [c_l M^-n, (c_l+1) M^-n]`. Distance and containment tests that feed
//! pruning decisions are carried out in integer units of the cube side, so no
//! floating-point rounding can flip a selection.
//!
//! Cubes also carry a flattened per-level index: the root has index 0 and the
//! children of index `v` are exactly `v*M^d .. v*M^d + M^d` in lexicographic
//! order of their per-axis offsets (first axis most significant). Level sets
//! stored as sorted index arrays therefore keep whole subtrees contiguous.

use crate::error::{Error, Result};

/// `base^exp` without overflow surprises.
pub fn checked_pow(base: u64, exp: u32) -> Option<u128> {
    (base as u128).checked_pow(exp)
}

/// True when flattened indices for all levels `0..=depth` fit in 63 bits.
pub fn index_width_ok(base: u32, dim: u32, depth: u32) -> bool {
    match checked_pow(u64::from(base), dim.saturating_mul(depth)) {
        Some(v) => v <= (1u128 << 63),
        None => false,
    }
}

/// A point in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Point {
        Point { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        euclid(&self.coords, &other.coords)
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A closed Euclidean ball.
#[derive(Clone, Debug)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point, radius: f64) -> Ball {
        Ball { center, radius }
    }

    /// Membership in the closed ball.
    pub fn contains(&self, p: &Point) -> bool {
        self.center.dist(p) <= self.radius
    }
}

/// The open cone `H(apex, direction, aperture)`: points `y` with
/// `(y - apex) . direction > aperture * |y - apex|`. The apex itself is not a
/// member. `aperture` is the cosine of the half-angle, in (0, 1).
#[derive(Clone, Debug)]
pub struct Cone {
    pub apex: Point,
    pub direction: Vec<f64>,
    pub aperture: f64,
}

impl Cone {
    pub fn new(apex: Point, direction: Vec<f64>, aperture: f64) -> Result<Cone> {
        if direction.len() != apex.dim() {
            return Err(Error::Parameter(
                "cone direction dimension differs from apex dimension".into(),
            ));
        }
        let norm = euclid(&direction, &vec![0.0; direction.len()]);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "cone direction must be a unit vector (norm {norm})"
            )));
        }
        if !(0.0 < aperture && aperture < 1.0) {
            return Err(Error::Parameter(format!(
                "cone aperture must lie in (0,1), got {aperture}"
            )));
        }
        Ok(Cone {
            apex,
            direction,
            aperture,
        })
    }

    /// Strict membership test.
    pub fn contains(&self, p: &Point) -> bool {
        let mut dot = 0.0;
        let mut norm2 = 0.0;
        for l in 0..self.direction.len() {
            let v = p.coords[l] - self.apex.coords[l];
            dot += v * self.direction[l];
            norm2 += v * v;
        }
        dot > self.aperture * norm2.sqrt()
    }
}

/// Address of one M-adic cube.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CubeAddress {
    base: u32,
    dim: u32,
    level: u32,
    coords: Vec<u64>,
}

impl CubeAddress {
    pub fn new(base: u32, dim: u32, level: u32, coords: Vec<u64>) -> Result<CubeAddress> {
        if base < 2 {
            return Err(Error::Parameter(format!("base must be >= 2, got {base}")));
        }
        if dim == 0 {
            return Err(Error::Parameter("dimension must be >= 1".into()));
        }
        if coords.len() != dim as usize {
            return Err(Error::Parameter(format!(
                "expected {dim} coordinates, got {}",
                coords.len()
            )));
        }
        let side = checked_pow(u64::from(base), level)
            .filter(|v| *v <= u128::from(u64::MAX))
            .ok_or_else(|| Error::Parameter(format!("base^level overflows at level {level}")))?;
        for (l, &c) in coords.iter().enumerate() {
            if u128::from(c) >= side {
                return Err(Error::Parameter(format!(
                    "coordinate {c} on axis {l} out of range at level {level}"
                )));
            }
        }
        Ok(CubeAddress {
            base,
            dim,
            level,
            coords,
        })
    }

    pub fn root(base: u32, dim: u32) -> Result<CubeAddress> {
        CubeAddress::new(base, dim, 0, vec![0; dim as usize])
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

    pub fn coords(&self) -> &[u64] {
        &self.coords
    }

    /// Side length `M^-level`.
    pub fn side(&self) -> f64 {
        f64::from(self.base).powi(-(self.level as i32))
    }

    /// Lower corner of the closed box.
    pub fn lower_corner(&self) -> Vec<f64> {
        let h = self.side();
        self.coords.iter().map(|&c| c as f64 * h).collect()
    }

    pub fn center(&self) -> Point {
        let h = self.side();
        Point::new(self.coords.iter().map(|&c| (c as f64 + 0.5) * h).collect())
    }

    /// Number of children per cube, `M^d`.
    pub fn children_per_cube(&self) -> u64 {
        u64::from(self.base).pow(self.dim)
    }

    /// Child with the given lexicographic ordinal (first axis most
    /// significant).
    pub fn child(&self, ordinal: u64) -> Result<CubeAddress> {
        let k = self.children_per_cube();
        if ordinal >= k {
            return Err(Error::Parameter(format!(
                "child ordinal {ordinal} out of range (M^d = {k})"
            )));
        }
        let m = u64::from(self.base);
        let mut coords = vec![0u64; self.dim as usize];
        let mut rem = ordinal;
        for l in (0..self.dim as usize).rev() {
            coords[l] = self.coords[l] * m + rem % m;
            rem /= m;
        }
        CubeAddress::new(self.base, self.dim, self.level + 1, coords)
    }

    /// All `M^d` children in ordinal order.
    pub fn children(&self) -> Result<Vec<CubeAddress>> {
        (0..self.children_per_cube())
            .map(|o| self.child(o))
            .collect()
    }

    pub fn parent(&self) -> Option<CubeAddress> {
        if self.level == 0 {
            return None;
        }
        let m = u64::from(self.base);
        let coords = self.coords.iter().map(|&c| c / m).collect();
        Some(CubeAddress {
            base: self.base,
            dim: self.dim,
            level: self.level - 1,
            coords,
        })
    }

    /// Ancestor `steps` levels up.
    pub fn ancestor(&self, steps: u32) -> Result<CubeAddress> {
        if steps > self.level {
            return Err(Error::LevelMismatch(format!(
                "cannot go {steps} levels up from level {}",
                self.level
            )));
        }
        let scale = u64::from(self.base).pow(steps);
        let coords = self.coords.iter().map(|&c| c / scale).collect();
        CubeAddress::new(self.base, self.dim, self.level - steps, coords)
    }

    /// Does `self` lie `steps` levels below `anc` inside its box?
    pub fn is_descendant_of(&self, anc: &CubeAddress, steps: u32) -> Result<bool> {
        self.check_compatible(anc)?;
        if self.level != anc.level + steps {
            return Err(Error::LevelMismatch(format!(
                "descendant test needs level {} + {steps} = {}, got {}",
                anc.level,
                anc.level + steps,
                self.level
            )));
        }
        let scale = u64::from(self.base).pow(steps);
        Ok(self
            .coords
            .iter()
            .zip(&anc.coords)
            .all(|(&c, &p)| c / scale == p))
    }

    /// Per-axis offsets of `self` within ancestor `anc`, in units of
    /// `M^-level(self)`. Errors when `self` is not inside `anc`.
    pub fn offsets_within(&self, anc: &CubeAddress) -> Result<Vec<u64>> {
        let steps = self
            .level
            .checked_sub(anc.level)
            .ok_or_else(|| Error::LevelMismatch("ancestor is deeper than the cube".into()))?;
        if !self.is_descendant_of(anc, steps)? {
            return Err(Error::NotDescendant(format!("{self} is not inside {anc}")));
        }
        let scale = u64::from(self.base).pow(steps);
        Ok(self
            .coords
            .iter()
            .zip(&anc.coords)
            .map(|(&c, &p)| c - p * scale)
            .collect())
    }

    /// Distance from this cube to the boundary of ancestor `anc`, in units of
    /// `M^-level(self)` (exact integer).
    pub fn dist_to_ancestor_boundary_units(&self, anc: &CubeAddress) -> Result<u64> {
        let steps = self.level - anc.level.min(self.level);
        let offs = self.offsets_within(anc)?;
        let span = u64::from(self.base).pow(steps);
        Ok(offs
            .iter()
            .map(|&o| o.min(span - 1 - o))
            .min()
            .unwrap_or(0))
    }

    /// Same distance in absolute units.
    pub fn dist_to_ancestor_boundary(&self, anc: &CubeAddress) -> Result<f64> {
        let units = self.dist_to_ancestor_boundary_units(anc)?;
        Ok(units as f64 * self.side())
    }

    /// The central descendant `steps` levels down: offset `(M^steps)/2 - 1`
    /// on every axis when `M^steps` is even, `(M^steps - 1)/2` when odd.
    pub fn center_descendant(&self, steps: u32) -> Result<CubeAddress> {
        if steps == 0 {
            return Err(Error::Parameter(
                "center descendant needs at least one level".into(),
            ));
        }
        let span = checked_pow(u64::from(self.base), steps)
            .filter(|v| *v <= u128::from(u64::MAX))
            .ok_or_else(|| Error::Parameter("M^steps overflows".into()))?;
        let span = span as u64;
        let off = if span % 2 == 0 {
            span / 2 - 1
        } else {
            (span - 1) / 2
        };
        let coords = self.coords.iter().map(|&c| c * span + off).collect();
        CubeAddress::new(self.base, self.dim, self.level + steps, coords)
    }

    /// Flattened per-level index (see module docs).
    pub fn flat(&self) -> u64 {
        flat_index(self.base, self.dim, self.level, &self.coords)
    }

    pub fn from_flat(base: u32, dim: u32, level: u32, idx: u64) -> Result<CubeAddress> {
        if !index_width_ok(base, dim, level) {
            return Err(Error::Parameter(format!(
                "flattened index width overflows at level {level}"
            )));
        }
        let coords = coords_from_flat(base, dim, level, idx);
        CubeAddress::new(base, dim, level, coords)
    }

    /// Parse the text form `"n:c1,...,cd"` given the subdivision base.
    pub fn parse(s: &str, base: u32) -> Result<CubeAddress> {
        let (lvl, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("cube address needs 'level:coords': {s:?}")))?;
        let level: u32 = lvl
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad level in cube address {s:?}")))?;
        let coords = rest
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Format(format!("bad coordinate in cube address {s:?}")))
            })
            .collect::<Result<Vec<u64>>>()?;
        if coords.is_empty() {
            return Err(Error::Format(format!("cube address has no coordinates: {s:?}")));
        }
        CubeAddress::new(base, coords.len() as u32, level, coords)
    }

    fn check_compatible(&self, other: &CubeAddress) -> Result<()> {
        if self.base != other.base || self.dim != other.dim {
            return Err(Error::Parameter(format!(
                "incompatible cubes: base {}/{} dim {}/{}",
                self.base, other.base, self.dim, other.dim
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for CubeAddress {
    /// Text form `"n:c1,...,cd"`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:", self.level)?;
        for (l, c) in self.coords.iter().enumerate() {
            if l > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Flattened index of a coordinate tuple (root = 0, children contiguous).
pub fn flat_index(base: u32, dim: u32, level: u32, coords: &[u64]) -> u64 {
    let m = u64::from(base);
    let k = m.pow(dim);
    let mut idx = 0u64;
    for i in 0..level {
        let shift = m.pow(level - 1 - i);
        let mut ord = 0u64;
        for &c in coords.iter().take(dim as usize) {
            ord = ord * m + (c / shift) % m;
        }
        idx = idx * k + ord;
    }
    idx
}

/// Inverse of [`flat_index`].
pub fn coords_from_flat(base: u32, dim: u32, level: u32, idx: u64) -> Vec<u64> {
    let mut coords = vec![0u64; dim as usize];
    coords_from_flat_into(base, dim, level, idx, &mut coords);
    coords
}

/// Allocation-free variant of [`coords_from_flat`].
pub fn coords_from_flat_into(base: u32, dim: u32, level: u32, idx: u64, out: &mut [u64]) {
    let m = u64::from(base);
    let k = m.pow(dim);
    out[..dim as usize].fill(0);
    let mut rem = idx;
    // Peel ordinals least-significant (deepest) first.
    let mut scale = 1u64;
    for _ in 0..level {
        let mut ord = rem % k;
        rem /= k;
        for l in (0..dim as usize).rev() {
            out[l] += (ord % m) * scale;
            ord /= m;
        }
        scale *= m;
    }
}

/// Exact squared Euclidean distance between two cube boxes, in units of
/// `M^-L` where `L = max(level_a, level_b)` (the common refinement).
/// Returns `(gap_squared, common_level)`.
pub fn cube_gap_sq_units(a: &CubeAddress, b: &CubeAddress) -> Result<(u128, u32)> {
    a.check_compatible(b)?;
    let common = a.level.max(b.level);
    let m = u128::from(a.base);
    let sa = m.pow(common - a.level);
    let sb = m.pow(common - b.level);
    let mut sum: u128 = 0;
    for l in 0..a.dim as usize {
        let alo = u128::from(a.coords[l]) * sa;
        let ahi = alo + sa;
        let blo = u128::from(b.coords[l]) * sb;
        let bhi = blo + sb;
        let gap = if ahi < blo {
            blo - ahi
        } else if bhi < alo {
            alo - bhi
        } else {
            0
        };
        sum += gap * gap;
    }
    Ok((sum, common))
}

/// Euclidean distance between the closed boxes of two cube sets
/// (minimum over pairs). Exact integer gaps, converted once at the end.
pub fn set_distance(a: &[CubeAddress], b: &[CubeAddress]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("set_distance needs nonempty sets".into()));
    }
    let mut best: Option<(u128, u32)> = None;
    for ca in a {
        for cb in b {
            let (g2, lvl) = cube_gap_sq_units(ca, cb)?;
            // Compare across possibly different common levels by scaling to
            // the finer one: g2 * M^(2*(fine - lvl)).
            best = Some(match best {
                None => (g2, lvl),
                Some((bg2, blvl)) => {
                    let fine = lvl.max(blvl);
                    let m = u128::from(ca.base);
                    let g2s = g2.saturating_mul(m.pow(2 * (fine - lvl)));
                    let bg2s = bg2.saturating_mul(m.pow(2 * (fine - blvl)));
                    if g2s < bg2s {
                        (g2, lvl)
                    } else {
                        (bg2, blvl)
                    }
                }
            });
            if let Some((0, _)) = best {
                return Ok(0.0);
            }
        }
    }
    let (g2, lvl) = best.unwrap();
    let base = f64::from(a[0].base);
    Ok((g2 as f64).sqrt() * base.powi(-(lvl as i32)))
}
