//! Block pruning of marked trees.
//!
//! A pruned tree keeps a sub-collection of the surviving cubes at block
//! levels `0, N, 2N, ...`: starting from the root, each selected cube at
//! level nN picks which of its surviving level-(n+1)N descendants stay,
//! according to a local rule. All rules are functions of the retention
//! pattern and survival marks, so a selected cube's subtree still follows
//! the survival-conditioned offspring law — per-parent statistics may be
//! pooled across block levels.

use crate::error::{Error, Result};
use crate::mcube::CubeAddress;
use crate::porosity::{self, BoxDim};
use crate::sampler::{PercolationConfig, PercolationTree};
use crate::wire::{self, WireLevel};
use serde::{Deserialize, Serialize};

fn default_net() -> u32 {
    4096
}

/// Local selection rules, applied per selected cube per block step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum PruneRule {
    /// Keep all `M^(dN)` descendants iff every one of them survives;
    /// otherwise keep none.
    FullBlock { block: u32 },
    /// Keep the survivors unless there is exactly one; a sole survivor is
    /// dropped.
    AtLeastTwo { block: u32 },
    /// Keep the survivors; in a fully surviving block additionally drop the
    /// central descendant.
    DropCenter { block: u32 },
    /// Keep the survivors unless the block survives completely; a full
    /// block is dropped wholesale.
    NotAll { block: u32 },
    /// In each fully surviving shell block `shell` levels above the target,
    /// keep only the descendants at least `shell` cells away from the shell
    /// boundary; partial shell blocks contribute nothing.
    InteriorShell { block: u32, shell: u32 },
    /// Drop a sole survivor when it sits well inside its block (more than
    /// one cell from the boundary and `(m-1)^2 > d` at offset `m`), leaving
    /// an empty annulus around the remaining piece.
    AnnularIsolated { block: u32 },
    /// If the selected cube subdivided only partially, remove the first
    /// survivor meeting the ball inscribed in the first missing child; a
    /// fully subdivided cube keeps all survivors.
    HoleDrop { block: u32 },
    /// Keep, per surviving cube `min_level` levels above the target, only a
    /// centrally placed survivor (one seeing far family members in every
    /// direction), and only where at least `(M^(d-1)+1)^min_level`
    /// descendants survive.
    ConicalSelect {
        block: u32,
        min_level: u32,
        #[serde(default = "default_net")]
        net: u32,
    },
}

impl PruneRule {
    /// Block size `N`: selection happens every `N` tree levels.
    pub fn block(&self) -> u32 {
        match *self {
            PruneRule::FullBlock { block }
            | PruneRule::AtLeastTwo { block }
            | PruneRule::DropCenter { block }
            | PruneRule::NotAll { block }
            | PruneRule::InteriorShell { block, .. }
            | PruneRule::AnnularIsolated { block }
            | PruneRule::HoleDrop { block }
            | PruneRule::ConicalSelect { block, .. } => block,
        }
    }

    pub fn validate(&self, config: &PercolationConfig) -> Result<()> {
        let n = self.block();
        if n == 0 {
            return Err(Error::Parameter("block size must be >= 1".into()));
        }
        match *self {
            PruneRule::InteriorShell { shell, .. } => {
                if shell == 0 || shell >= n {
                    return Err(Error::Parameter(
                        "shell width must satisfy 1 <= shell < block".into(),
                    ));
                }
                let m = u64::from(config.base);
                let span = m.pow(shell);
                if span <= 2 * u64::from(shell) {
                    return Err(Error::Parameter(format!(
                        "interior shell is empty: M^shell = {span} <= 2*shell"
                    )));
                }
            }
            PruneRule::ConicalSelect { min_level, net, .. } => {
                if min_level == 0 || min_level >= n {
                    return Err(Error::Parameter(
                        "min_level must satisfy 1 <= min_level < block".into(),
                    ));
                }
                if config.dim > 3 {
                    return Err(Error::Unsupported(
                        "conical selection is implemented for dimensions 1 to 3".into(),
                    ));
                }
                if config.dim >= 2 && net < 8 {
                    return Err(Error::Parameter("need a net of at least 8 directions".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Counters for the discretionary parts of the rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneStats {
    /// Hole witness fell back to a survivor adjacent to a missing child.
    pub hole_fallback_adjacent: u64,
    /// Hole witness fell back to the first survivor outright.
    pub hole_fallback_lexfirst: u64,
    pub conical_selected: u64,
    pub conical_not_found: u64,
    pub conical_below_threshold: u64,
}

/// Selection result: cubes kept at block levels `0, N, ..., B*N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedTree {
    rule: PruneRule,
    config: PercolationConfig,
    block: u32,
    /// `levels[n]` = sorted flat indices selected at tree level `n * block`.
    levels: Vec<Vec<u64>>,
    stats: PruneStats,
}

#[derive(Serialize, Deserialize)]
struct PrunedHeader {
    config: PercolationConfig,
    rule: PruneRule,
    block: u32,
    stats: PruneStats,
}

impl PrunedTree {
    pub fn rule(&self) -> &PruneRule {
        &self.rule
    }

    pub fn config(&self) -> &PercolationConfig {
        &self.config
    }

    pub fn block(&self) -> u32 {
        self.block
    }

    /// Number of block steps: selected levels run `0..=block_steps()`.
    pub fn block_steps(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    /// Selected cubes at block level `n` (tree level `n * block`).
    pub fn selected(&self, n: u32) -> Result<&[u64]> {
        self.levels
            .get(n as usize)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::LevelMismatch(format!(
                    "block level {n} beyond {}",
                    self.levels.len() - 1
                ))
            })
    }

    pub fn counts(&self) -> Vec<u64> {
        self.levels.iter().map(|l| l.len() as u64).collect()
    }

    pub fn stats(&self) -> &PruneStats {
        &self.stats
    }

    pub fn addr(&self, n: u32, slot: usize) -> Result<CubeAddress> {
        let level = self.selected(n)?;
        let idx = *level
            .get(slot)
            .ok_or_else(|| Error::Parameter(format!("slot {slot} out of range")))?;
        CubeAddress::from_flat(self.config.base, self.config.dim, n * self.block, idx)
    }

    fn validate_shape(&self) -> Result<()> {
        let b = self.config.depth / self.block;
        if self.levels.len() != b as usize + 1 {
            return Err(Error::Format(format!(
                "expected {} block levels, got {}",
                b + 1,
                self.levels.len()
            )));
        }
        let span = (u128::from(self.config.base).pow(self.config.dim)).pow(self.block);
        for (n, lvl) in self.levels.iter().enumerate() {
            for w in lvl.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Format(format!(
                        "block level {n} indices not strictly sorted"
                    )));
                }
            }
            let width = span.pow(n as u32);
            if let Some(&last) = lvl.last() {
                if u128::from(last) >= width {
                    return Err(Error::Format(format!("index out of range at block level {n}")));
                }
            }
            if n > 0 {
                let k = span as u64;
                for &idx in lvl {
                    if self.levels[n - 1].binary_search(&(idx / k)).is_err() {
                        return Err(Error::Format(format!(
                            "selected cube at block level {n} has no selected block parent"
                        )));
                    }
                }
            } else if !(lvl.is_empty() || lvl[..] == [0]) {
                return Err(Error::Format("block level 0 must be empty or the root".into()));
            }
        }
        Ok(())
    }
}

/// Survivor flat indices among the `steps`-level descendants of `v`.
fn surviving_descendants(
    tree: &PercolationTree,
    level: u32,
    v: u64,
    steps: u32,
) -> Result<Vec<u64>> {
    let target = level + steps;
    let indices = tree.retained(target)?;
    let mut out = Vec::new();
    for slot in tree.descendant_slots(level, v, steps)? {
        if tree.survives_slot(target, slot)? {
            out.push(indices[slot]);
        }
    }
    Ok(out)
}

/// Apply a rule to a marked tree.
pub fn apply_prune(tree: &PercolationTree, rule: &PruneRule) -> Result<PrunedTree> {
    let config = tree.config().clone();
    rule.validate(&config)?;
    if !tree.marked() {
        return Err(Error::Precondition(
            "pruning needs survival marks; sample with marking first".into(),
        ));
    }
    let n_block = rule.block();
    if config.depth < n_block {
        return Err(Error::Parameter(format!(
            "depth {} holds no block of size {n_block}",
            config.depth
        )));
    }
    let b = config.depth / n_block;
    let mut stats = PruneStats::default();
    let mut levels: Vec<Vec<u64>> = Vec::with_capacity(b as usize + 1);
    levels.push(if tree.root_survives() { vec![0] } else { vec![] });
    let span = u64::from(config.base).pow(config.dim).pow(n_block);
    for n in 0..b {
        let level = n * n_block;
        let mut next: Vec<u64> = Vec::new();
        for &v in &levels[n as usize] {
            select_children(tree, rule, level, v, span, &mut next, &mut stats)?;
        }
        debug_assert!(next.windows(2).all(|w| w[0] < w[1]));
        levels.push(next);
    }
    Ok(PrunedTree {
        rule: rule.clone(),
        config,
        block: n_block,
        levels,
        stats,
    })
}

fn select_children(
    tree: &PercolationTree,
    rule: &PruneRule,
    level: u32,
    v: u64,
    span: u64,
    out: &mut Vec<u64>,
    stats: &mut PruneStats,
) -> Result<()> {
    let config = tree.config();
    let n_block = rule.block();
    match *rule {
        PruneRule::FullBlock { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            if survivors.len() as u64 == span {
                out.extend(survivors);
            }
        }
        PruneRule::NotAll { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            if (survivors.len() as u64) < span {
                out.extend(survivors);
            }
        }
        PruneRule::AtLeastTwo { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            if survivors.len() != 1 {
                out.extend(survivors);
            }
        }
        PruneRule::DropCenter { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            if survivors.len() as u64 == span {
                let center = CubeAddress::from_flat(config.base, config.dim, level, v)?
                    .center_descendant(n_block)?
                    .flat();
                out.extend(survivors.into_iter().filter(|&s| s != center));
            } else {
                out.extend(survivors);
            }
        }
        PruneRule::AnnularIsolated { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            if let [sole] = survivors[..] {
                let parent = CubeAddress::from_flat(config.base, config.dim, level, v)?;
                let cube =
                    CubeAddress::from_flat(config.base, config.dim, level + n_block, sole)?;
                let m = cube.dist_to_ancestor_boundary_units(&parent)?;
                let deep = m >= 2 && (m - 1) * (m - 1) > u64::from(config.dim);
                if !deep {
                    out.push(sole);
                }
            } else {
                out.extend(survivors);
            }
        }
        PruneRule::InteriorShell { shell, .. } => {
            let mid = level + (n_block - shell);
            let span_a = u64::from(config.base).pow(config.dim).pow(shell);
            let side = u64::from(config.base).pow(shell);
            let mids = surviving_descendants(tree, level, v, n_block - shell)?;
            let mut offsets = vec![0u64; config.dim as usize];
            for q in mids {
                let survivors = surviving_descendants(tree, mid, q, shell)?;
                if survivors.len() as u64 != span_a {
                    continue;
                }
                for s in survivors {
                    let ordinal = s - q * span_a;
                    crate::mcube::coords_from_flat_into(
                        config.base,
                        config.dim,
                        shell,
                        ordinal,
                        &mut offsets,
                    );
                    let interior = offsets
                        .iter()
                        .all(|&o| o >= u64::from(shell) && o + u64::from(shell) <= side - 1);
                    if interior {
                        out.push(s);
                    }
                }
            }
        }
        PruneRule::HoleDrop { .. } => {
            let survivors = surviving_descendants(tree, level, v, n_block)?;
            let k = config.children_per_cube();
            let child_count = tree.descendant_slots(level, v, 1)?.len() as u64;
            if child_count == k {
                out.extend(survivors);
            } else {
                let parent = CubeAddress::from_flat(config.base, config.dim, level, v)?;
                let hm = porosity::hole_meeting_children(tree, &parent, n_block)?;
                match hm.fallback {
                    Some(porosity::HoleFallback::AdjacentToMissing) => {
                        stats.hole_fallback_adjacent += 1
                    }
                    Some(porosity::HoleFallback::LexFirstSurvivor) => {
                        stats.hole_fallback_lexfirst += 1
                    }
                    None => {}
                }
                let drop = hm.cubes[0].flat();
                out.extend(survivors.into_iter().filter(|&s| s != drop));
            }
        }
        PruneRule::ConicalSelect { min_level, net, .. } => {
            let mid = level + (n_block - min_level);
            let threshold = (u64::from(config.base).pow(config.dim - 1) + 1).pow(min_level);
            let mids = surviving_descendants(tree, level, v, n_block - min_level)?;
            for q in mids {
                let survivors = surviving_descendants(tree, mid, q, min_level)?;
                if (survivors.len() as u64) < threshold {
                    stats.conical_below_threshold += 1;
                    continue;
                }
                let addrs: Vec<CubeAddress> = survivors
                    .iter()
                    .map(|&s| {
                        CubeAddress::from_flat(config.base, config.dim, level + n_block, s)
                    })
                    .collect::<Result<_>>()?;
                match porosity::conical_central_cube(&addrs, net)? {
                    Some(w) => {
                        stats.conical_selected += 1;
                        out.push(w.cube.flat());
                    }
                    None => stats.conical_not_found += 1,
                }
            }
        }
    }
    Ok(())
}

/// Dimension verdict for a pruned selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrunedDimension {
    /// The selection died out too early to fit a slope.
    Extinct,
    Estimate(BoxDim),
}

/// Box-dimension fit of the selection counts over the nonempty prefix of
/// block levels `1..`, in tree-level units (comparable with similarity
/// dimensions).
pub fn pruned_dimension(pruned: &PrunedTree) -> Result<PrunedDimension> {
    let counts = pruned.counts();
    let mut levels: Vec<u32> = Vec::new();
    let mut cs: Vec<u64> = Vec::new();
    for (n, &c) in counts.iter().enumerate().skip(1) {
        if c == 0 {
            break;
        }
        levels.push(n as u32 * pruned.block());
        cs.push(c);
    }
    if levels.len() < 3 {
        return Ok(PrunedDimension::Extinct);
    }
    Ok(PrunedDimension::Estimate(porosity::box_dimension(
        pruned.config().base,
        &levels,
        &cs,
    )?))
}

/// Pooled per-parent offspring statistics over an ensemble of pruned trees.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockStats {
    pub replicas: u64,
    /// Parent observations: selected cubes with a block level below them.
    pub pairs: u64,
    /// Ratio estimate: total selected children / total parents.
    pub mean: f64,
    /// Replica-clustered standard error of `mean` (parents within a replica
    /// are correlated; replicas are independent).
    pub se: f64,
    /// Empirical child-count distribution over `0..=M^(d*block)`.
    pub pmf: Vec<f64>,
    /// Replica-clustered standard errors of the pmf entries.
    pub pmf_se: Vec<f64>,
}

/// Per-replica totals: parents, children, and per-count parent tallies.
fn replica_tallies(p: &PrunedTree) -> (u64, u64, Vec<u64>) {
    let span = u64::from(p.config().base)
        .pow(p.config().dim)
        .pow(p.block());
    let mut parents = 0u64;
    let mut children = 0u64;
    let mut by_count = vec![0u64; span as usize + 1];
    for n in 0..p.block_steps() as usize {
        let cur = &p.levels[n];
        let nxt = &p.levels[n + 1];
        parents += cur.len() as u64;
        children += nxt.len() as u64;
        for &v in cur {
            let lo = nxt.partition_point(|&x| x < v * span);
            let hi = nxt.partition_point(|&x| x < (v + 1) * span);
            by_count[hi - lo] += 1;
        }
    }
    (parents, children, by_count)
}

pub fn block_offspring_stats(ensemble: &[PrunedTree]) -> Result<BlockStats> {
    if ensemble.is_empty() {
        return Err(Error::EmptyInput("empty ensemble".into()));
    }
    let first = &ensemble[0];
    for p in ensemble {
        if p.rule() != first.rule() || p.block() != first.block() {
            return Err(Error::Parameter(
                "ensemble mixes rules or block sizes".into(),
            ));
        }
    }
    let tallies: Vec<(u64, u64, Vec<u64>)> = ensemble.iter().map(replica_tallies).collect();
    let total_parents: u64 = tallies.iter().map(|t| t.0).sum();
    if total_parents == 0 {
        return Err(Error::EmptyInput(
            "no selected parents anywhere in the ensemble".into(),
        ));
    }
    let total_children: u64 = tallies.iter().map(|t| t.1).sum();
    let mean = total_children as f64 / total_parents as f64;
    let r = ensemble.len() as f64;
    let pp = total_parents as f64;
    // Linearised variance of a ratio of replica sums.
    let cluster_se = |num: &dyn Fn(&(u64, u64, Vec<u64>)) -> f64, ratio: f64| -> f64 {
        if ensemble.len() < 2 {
            return f64::NAN;
        }
        let s: f64 = tallies
            .iter()
            .map(|t| {
                let resid = num(t) - ratio * t.0 as f64;
                resid * resid
            })
            .sum();
        (s / (pp * pp) * r / (r - 1.0)).sqrt()
    };
    let se = cluster_se(&|t| t.1 as f64, mean);
    let span = tallies[0].2.len();
    let mut pmf = Vec::with_capacity(span);
    let mut pmf_se = Vec::with_capacity(span);
    for c in 0..span {
        let tot: u64 = tallies.iter().map(|t| t.2[c]).sum();
        let p = tot as f64 / total_parents as f64;
        pmf.push(p);
        pmf_se.push(cluster_se(&|t| t.2[c] as f64, p));
    }
    Ok(BlockStats {
        replicas: ensemble.len() as u64,
        pairs: total_parents,
        mean,
        se,
        pmf,
        pmf_se,
    })
}

/// Serialize a pruned tree to the versioned container (kind 1).
pub fn pruned_to_bytes(p: &PrunedTree) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&PrunedHeader {
        config: p.config.clone(),
        rule: p.rule.clone(),
        block: p.block,
        stats: p.stats,
    })?;
    let levels: Vec<WireLevel> = p
        .levels
        .iter()
        .map(|l| WireLevel {
            indices: l.clone(),
            marks: None,
        })
        .collect();
    wire::encode(wire::KIND_PRUNED, &header, &levels)
}

/// Deserialize and re-validate a pruned tree.
pub fn pruned_from_bytes(bytes: &[u8]) -> Result<PrunedTree> {
    let dec = wire::decode(bytes, wire::KIND_PRUNED)?;
    let header: PrunedHeader = serde_json::from_slice(&dec.header)?;
    header.config.validate()?;
    header.rule.validate(&header.config)?;
    if header.block != header.rule.block() {
        return Err(Error::Format("block field disagrees with the rule".into()));
    }
    let p = PrunedTree {
        rule: header.rule,
        config: header.config,
        block: header.block,
        levels: dec.levels.into_iter().map(|l| l.indices).collect(),
        stats: header.stats,
    };
    p.validate_shape()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{self, ModelSpec};

    fn config(base: u32, dim: u32, depth: u32) -> PercolationConfig {
        PercolationConfig {
            base,
            dim,
            depth,
            model: ModelSpec::Homogeneous { p: 0.8 },
            seed: 1,
            condition: false,
            node_cap: 1 << 30,
        }
    }

    fn full_tree(base: u32, dim: u32, depth: u32) -> PercolationTree {
        let k = u64::from(base).pow(dim);
        let mut levels = Vec::new();
        let mut marks = Vec::new();
        let mut count = 1u64;
        for _ in 0..=depth {
            levels.push((0..count).collect::<Vec<u64>>());
            marks.push(vec![true; count as usize]);
            count *= k;
        }
        PercolationTree::from_parts(config(base, dim, depth), levels, Some(marks), 0).unwrap()
    }

    fn tree(
        base: u32,
        dim: u32,
        depth: u32,
        levels: Vec<Vec<u64>>,
        marks: Vec<Vec<bool>>,
    ) -> PercolationTree {
        PercolationTree::from_parts(config(base, dim, depth), levels, Some(marks), 0).unwrap()
    }

    #[test]
    fn full_block_keeps_complete_blocks_only() {
        let t = tree(
            2,
            1,
            2,
            vec![vec![0], vec![0, 1], vec![0, 1, 3]],
            vec![vec![true], vec![true, true], vec![true, true, true]],
        );
        let p = apply_prune(&t, &PruneRule::FullBlock { block: 1 }).unwrap();
        assert_eq!(p.selected(0).unwrap(), &[0]);
        assert_eq!(p.selected(1).unwrap(), &[0, 1]);
        // Parent 1 has a single survivor, not a complete block.
        assert_eq!(p.selected(2).unwrap(), &[0, 1]);
        let full = full_tree(2, 1, 3);
        let p = apply_prune(&full, &PruneRule::FullBlock { block: 1 }).unwrap();
        assert_eq!(p.counts(), vec![1, 2, 4, 8]);
    }

    #[test]
    fn not_all_drops_complete_blocks() {
        let full = full_tree(2, 1, 2);
        let p = apply_prune(&full, &PruneRule::NotAll { block: 1 }).unwrap();
        assert_eq!(p.counts(), vec![1, 0, 0]);
        let t = tree(
            2,
            1,
            1,
            vec![vec![0], vec![0]],
            vec![vec![true], vec![true]],
        );
        let p = apply_prune(&t, &PruneRule::NotAll { block: 1 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[0]);
    }

    #[test]
    fn at_least_two_drops_singletons() {
        let t = tree(
            2,
            1,
            2,
            vec![vec![0], vec![0, 1], vec![0, 3]],
            vec![vec![true], vec![true, true], vec![true, true]],
        );
        let p = apply_prune(&t, &PruneRule::AtLeastTwo { block: 2 }).unwrap();
        // Two survivors at level 2: kept.
        assert_eq!(p.selected(1).unwrap(), &[0, 3]);
        let t = tree(
            2,
            1,
            2,
            vec![vec![0], vec![0, 1], vec![3]],
            vec![vec![true], vec![false, true], vec![true]],
        );
        let p = apply_prune(&t, &PruneRule::AtLeastTwo { block: 2 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[] as &[u64]);
    }

    #[test]
    fn drop_center_in_full_blocks() {
        let full = full_tree(3, 2, 1);
        let p = apply_prune(&full, &PruneRule::DropCenter { block: 1 }).unwrap();
        // Nine children minus the central one, coords (1,1) = flat 4.
        assert_eq!(p.selected(1).unwrap(), &[0, 1, 2, 3, 5, 6, 7, 8]);
        // Partial blocks keep everything.
        let t = tree(
            3,
            2,
            1,
            vec![vec![0], vec![0, 4, 8]],
            vec![vec![true], vec![true, true, true]],
        );
        let p = apply_prune(&t, &PruneRule::DropCenter { block: 1 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[0, 4, 8]);
    }

    #[test]
    fn annular_isolated_drops_deep_singletons() {
        // M=3, block 2: a sole survivor at per-axis offset 4 is deep inside
        // (m = 4, (m-1)^2 = 9 > d = 2); at offset 2 it is not (1 <= 2).
        let deep = tree(
            3,
            2,
            2,
            vec![vec![0], vec![4], vec![40]],
            vec![vec![true], vec![true], vec![true]],
        );
        let p = apply_prune(&deep, &PruneRule::AnnularIsolated { block: 2 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[] as &[u64]);
        // Coords (2,2) at level 2: ordinal digits (0, 8) -> flat 8.
        let shallow = tree(
            3,
            2,
            2,
            vec![vec![0], vec![0], vec![8]],
            vec![vec![true], vec![true], vec![true]],
        );
        let p = apply_prune(&shallow, &PruneRule::AnnularIsolated { block: 2 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[8]);
        // Two survivors are never touched.
        let two = tree(
            3,
            2,
            2,
            vec![vec![0], vec![4], vec![36, 40]],
            vec![vec![true], vec![true], vec![true, true]],
        );
        let p = apply_prune(&two, &PruneRule::AnnularIsolated { block: 2 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[36, 40]);
    }

    #[test]
    fn interior_shell_keeps_the_core() {
        // M=3, block 2, shell 1: every level-1 cube subdivides fully, so each
        // contributes its (3-2)^2 = 1 central child.
        let full = full_tree(3, 2, 2);
        let p = apply_prune(
            &full,
            &PruneRule::InteriorShell { block: 2, shell: 1 },
        )
        .unwrap();
        let sel = p.selected(1).unwrap();
        assert_eq!(sel.len(), 9);
        for (i, &idx) in sel.iter().enumerate() {
            let c = CubeAddress::from_flat(3, 2, 2, idx).unwrap();
            // Center of the i-th level-1 cube.
            let q = CubeAddress::from_flat(3, 2, 1, i as u64).unwrap();
            assert_eq!(c, q.center_descendant(1).unwrap());
        }
        // A partial shell block contributes nothing.
        let t = tree(
            3,
            2,
            2,
            vec![vec![0], vec![4], (36..44).collect()],
            vec![vec![true], vec![true], vec![true; 8]],
        );
        let p = apply_prune(&t, &PruneRule::InteriorShell { block: 2, shell: 1 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[] as &[u64]);
        // Shell geometry validation.
        assert!(apply_prune(&full_tree(2, 1, 2), &PruneRule::InteriorShell { block: 2, shell: 1 })
            .is_err());
    }

    #[test]
    fn hole_drop_removes_one_witness() {
        // Partial subdivision: the sole survivor is the witness; nothing is
        // left.
        let t = tree(
            2,
            1,
            1,
            vec![vec![0], vec![0]],
            vec![vec![true], vec![true]],
        );
        let p = apply_prune(&t, &PruneRule::HoleDrop { block: 1 }).unwrap();
        assert_eq!(p.selected(1).unwrap(), &[] as &[u64]);
        assert_eq!(p.stats().hole_fallback_adjacent, 0);
        // Full subdivision keeps all survivors.
        let full = full_tree(2, 1, 2);
        let p = apply_prune(&full, &PruneRule::HoleDrop { block: 1 }).unwrap();
        assert_eq!(p.counts(), vec![1, 2, 4]);
        // Partial with two survivors: exactly one goes.
        let t = tree(
            2,
            2,
            1,
            vec![vec![0], vec![0, 3]],
            vec![vec![true], vec![true, true]],
        );
        let p = apply_prune(&t, &PruneRule::HoleDrop { block: 1 }).unwrap();
        assert_eq!(p.selected(1).unwrap().len(), 1);
    }

    #[test]
    fn conical_select_picks_central_cubes() {
        let flat = |level: u32, c0: u64, c1: u64| {
            CubeAddress::new(3, 2, level, vec![c0, c1]).unwrap().flat()
        };
        let cluster = |level: u32, range0: std::ops::Range<u64>, range1: std::ops::Range<u64>| {
            let mut v: Vec<u64> = Vec::new();
            for c0 in range0.clone() {
                for c1 in range1.clone() {
                    v.push(flat(level, c0, c1));
                }
            }
            v.sort_unstable();
            v
        };
        // M=3 d=2 depth 3, one level-1 cube fully populated at level 3
        // (81 cubes >= threshold (3+1)^2 = 16): exactly one selection.
        let t = tree(
            3,
            2,
            3,
            vec![vec![0], vec![0], (0..9).collect(), cluster(3, 0..9, 0..9)],
            vec![vec![true], vec![true], vec![true; 9], vec![true; 81]],
        );
        let rule = PruneRule::ConicalSelect {
            block: 3,
            min_level: 2,
            net: 16,
        };
        let p = apply_prune(&t, &rule).unwrap();
        assert_eq!(p.stats().conical_selected, 1);
        assert_eq!(p.selected(1).unwrap().len(), 1);
        let sel = CubeAddress::from_flat(3, 2, 3, p.selected(1).unwrap()[0]).unwrap();
        // The pick must sit well inside the 9x9 family.
        for &c in sel.coords() {
            assert!((2..=6).contains(&c), "selected {:?}", sel.coords());
        }
        // Deterministic.
        let p2 = apply_prune(&t, &rule).unwrap();
        assert_eq!(p, p2);

        // A 4x4 corner cluster meets the threshold but has no central cube:
        // no member has far family in opposite directions.
        let l2: Vec<u64> = vec![
            flat(2, 0, 0),
            flat(2, 0, 1),
            flat(2, 1, 0),
            flat(2, 1, 1),
        ];
        let t = tree(
            3,
            2,
            3,
            vec![vec![0], vec![0], l2, cluster(3, 0..4, 0..4)],
            vec![vec![true], vec![true], vec![true; 4], vec![true; 16]],
        );
        let p = apply_prune(&t, &rule).unwrap();
        assert_eq!(p.stats().conical_not_found, 1);
        assert!(p.selected(1).unwrap().is_empty());

        // Nine survivors stay below the threshold.
        let ring = [
            (0u64, 4u64),
            (1, 1),
            (1, 7),
            (4, 0),
            (4, 4),
            (4, 8),
            (7, 1),
            (7, 7),
            (8, 4),
        ];
        let mut l3: Vec<u64> = ring.iter().map(|&(a, b)| flat(3, a, b)).collect();
        l3.sort_unstable();
        let t = tree(
            3,
            2,
            3,
            vec![vec![0], vec![0], (0..9).collect(), l3],
            vec![vec![true], vec![true], vec![true; 9], vec![true; 9]],
        );
        let p = apply_prune(&t, &rule).unwrap();
        assert_eq!(p.stats().conical_below_threshold, 1);
        assert!(p.selected(1).unwrap().is_empty());
    }

    #[test]
    fn selection_invariants_on_sampled_trees() {
        let mut cfg = config(2, 2, 6);
        cfg.model = ModelSpec::Homogeneous { p: 0.7 };
        cfg.condition = true;
        cfg.seed = 17;
        let t = sampler::sample_marked(&cfg).unwrap();
        let rules = [
            PruneRule::FullBlock { block: 2 },
            PruneRule::AtLeastTwo { block: 2 },
            PruneRule::DropCenter { block: 2 },
            PruneRule::NotAll { block: 2 },
            PruneRule::AnnularIsolated { block: 2 },
            PruneRule::HoleDrop { block: 2 },
            PruneRule::ConicalSelect {
                block: 2,
                min_level: 1,
                net: 16,
            },
        ];
        for rule in &rules {
            let p = apply_prune(&t, rule).unwrap();
            p.validate_shape().unwrap();
            assert_eq!(p.block_steps(), 3);
            for n in 0..=3u32 {
                for &idx in p.selected(n).unwrap() {
                    assert!(t.survives_index(n * 2, idx).unwrap(), "{rule:?}");
                }
            }
            // Selected sets shrink relative to the survivors.
            for n in 1..=3u32 {
                assert!(
                    p.selected(n).unwrap().len() as u64 <= t.surviving_count(n * 2).unwrap()
                );
            }
        }
        // InteriorShell needs a base-3 tree for a nonempty shell.
        let mut cfg = config(3, 2, 4);
        cfg.model = ModelSpec::Homogeneous { p: 0.6 };
        cfg.condition = true;
        let t = sampler::sample_marked(&cfg).unwrap();
        let p = apply_prune(&t, &PruneRule::InteriorShell { block: 2, shell: 1 }).unwrap();
        p.validate_shape().unwrap();
        for n in 0..=2u32 {
            for &idx in p.selected(n).unwrap() {
                assert!(t.survives_index(n * 2, idx).unwrap());
            }
        }
    }

    #[test]
    fn dimension_verdicts() {
        let full = full_tree(2, 1, 3);
        let p = apply_prune(&full, &PruneRule::FullBlock { block: 1 }).unwrap();
        match pruned_dimension(&p).unwrap() {
            PrunedDimension::Estimate(b) => {
                assert!((b.dimension - 1.0).abs() < 1e-9);
                assert!(!b.degenerate);
            }
            PrunedDimension::Extinct => panic!("full tree is not extinct"),
        }
        let p = apply_prune(&full, &PruneRule::NotAll { block: 1 }).unwrap();
        assert_eq!(pruned_dimension(&p).unwrap(), PrunedDimension::Extinct);
    }

    #[test]
    fn block_stats_hand_values() {
        let a = apply_prune(&full_tree(2, 1, 2), &PruneRule::FullBlock { block: 1 }).unwrap();
        let b_tree = tree(
            2,
            1,
            2,
            vec![vec![0], vec![0], vec![0, 1]],
            vec![vec![true], vec![true], vec![true, true]],
        );
        let b = apply_prune(&b_tree, &PruneRule::FullBlock { block: 1 }).unwrap();
        // a: parents 1+2, children 2+4, all with count 2.
        // b: root has one survivor at level 1 -> nothing selected below root.
        let s = block_offspring_stats(&[a, b]).unwrap();
        assert_eq!(s.replicas, 2);
        assert_eq!(s.pairs, 4);
        assert!((s.mean - 1.5).abs() < 1e-15);
        assert!((s.se - 0.75).abs() < 1e-12);
        assert!((s.pmf[0] - 0.25).abs() < 1e-15);
        assert!((s.pmf[2] - 0.75).abs() < 1e-15);
        assert!((s.pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(block_offspring_stats(&[]).is_err());
    }

    #[test]
    fn pruned_serialization_roundtrip() {
        let t = full_tree(2, 2, 4);
        let p = apply_prune(&t, &PruneRule::DropCenter { block: 2 }).unwrap();
        let bytes = pruned_to_bytes(&p).unwrap();
        let back = pruned_from_bytes(&bytes).unwrap();
        assert_eq!(p, back);
        // Tree containers are refused here.
        let tb = sampler::tree_to_bytes(&t).unwrap();
        assert!(pruned_from_bytes(&tb).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 9] ^= 0x40;
        assert!(pruned_from_bytes(&bad).is_err());
    }

    #[test]
    fn rule_json_shapes() {
        let r: PruneRule =
            serde_json::from_str(r#"{"rule":"conical-select","block":3,"min_level":2}"#).unwrap();
        assert_eq!(
            r,
            PruneRule::ConicalSelect {
                block: 3,
                min_level: 2,
                net: 4096
            }
        );
        let r: PruneRule =
            serde_json::from_str(r#"{"rule":"interior-shell","block":4,"shell":1}"#).unwrap();
        assert_eq!(r.block(), 4);
        let j = serde_json::to_string(&PruneRule::HoleDrop { block: 2 }).unwrap();
        assert_eq!(j, r#"{"rule":"hole-drop","block":2}"#);
    }
}
