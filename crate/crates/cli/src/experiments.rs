//! Monte-Carlo experiments: conditioned replica ensembles checked against
//! the analytic targets the bound table predicts for them.

use percolab_core::{
    annular_bounds, apply_prune, block_offspring_stats, bound_c, bound_lpor_dim,
    bound_lpor_lower, bound_upor_dim, bound_upor_dim_general, bound_upor_lower, box_dimension,
    chi_square_gof, default_scale_grid, level_set, mean_se, porosity_profile, replica_seed,
    sample_ensemble, sample_mu_points, survival_offspring, survival_offspring_pmf, Error,
    LevelSetMode, ModelSpec, Occupancy, OccupiedSet, OffspringDistribution, PercolationConfig,
    PointPolicy, PruneRule, Result,
};
use serde_json::{json, Value};

use crate::manifest::num;

pub const EXPERIMENTS: &[&str] = &[
    "el-check",
    "pmf-check",
    "dim-check",
    "prune-T1",
    "prune-T2",
    "prune-T3",
    "prune-T4",
    "prune-T5",
    "prune-annular",
    "prune-holedrop",
    "prune-conical",
    "porosity-extremal",
    "levelset-beta",
    "levelset-β",
];

pub struct SummaryRow {
    pub statistic: String,
    pub estimate: String,
    pub se: String,
    pub target: String,
    pub sigmas: String,
    pub verdict: String,
}

impl SummaryRow {
    /// A checked statistic: pass iff the estimate is within 3 standard
    /// errors of the target.
    fn checked(statistic: &str, est: f64, se: f64, target: f64) -> SummaryRow {
        let (sigmas, verdict) = if se > 0.0 {
            let s = (est - target).abs() / se;
            (num(s), if s <= 3.0 { "pass" } else { "fail" })
        } else if (est - target).abs() <= 1e-9 {
            (String::new(), "pass")
        } else {
            (String::new(), "fail")
        };
        SummaryRow {
            statistic: statistic.into(),
            estimate: num(est),
            se: num(se),
            target: num(target),
            sigmas,
            verdict: verdict.into(),
        }
    }

    /// An informational statistic with no analytic target.
    fn info(statistic: &str, est: f64, se: Option<f64>) -> SummaryRow {
        SummaryRow {
            statistic: statistic.into(),
            estimate: num(est),
            se: se.map(num).unwrap_or_default(),
            target: String::new(),
            sigmas: String::new(),
            verdict: "n/a".into(),
        }
    }
}

pub struct McOutput {
    pub replica_header: Vec<String>,
    pub replica_rows: Vec<Vec<String>>,
    pub summary_rows: Vec<SummaryRow>,
    /// Command-specific knobs, recorded in the manifest fingerprint.
    pub params: Value,
}

pub struct McRequest {
    pub experiment: String,
    pub replicas: u64,
    pub workers: Option<usize>,
    pub level: Option<u32>,
    pub eps: f64,
    pub alpha: f64,
    pub mode: Option<String>,
}

fn conditioned(config: &PercolationConfig) -> PercolationConfig {
    PercolationConfig {
        condition: true,
        ..config.clone()
    }
}

fn strs<const N: usize>(cells: [String; N]) -> Vec<String> {
    cells.into_iter().collect()
}

fn header<const N: usize>(cells: [&str; N]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

pub fn run_mc(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    if !(req.eps > 0.0 && req.eps < 0.5) {
        return Err(Error::Parameter(format!(
            "eps must lie in (0, 1/2), got {}",
            req.eps
        )));
    }
    match req.experiment.as_str() {
        "el-check" => el_check(config, req),
        "pmf-check" => pmf_check(config, req),
        "dim-check" => dim_check(config, req),
        "prune-T1" | "prune-T2" | "prune-T3" | "prune-T4" | "prune-T5" | "prune-annular"
        | "prune-holedrop" | "prune-conical" => prune_experiment(config, req),
        "porosity-extremal" => porosity_extremal(config, req),
        "levelset-beta" | "levelset-β" => levelset(config, req),
        other => Err(Error::Parameter(format!(
            "unknown experiment {other:?}; available: {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

/// Conditioned on survival, E(surviving count at level n) is exactly
/// (mean offspring)^n.
fn el_check(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let cfg = conditioned(config);
    let level = req.level.unwrap_or(cfg.depth);
    if level == 0 || level > cfg.depth {
        return Err(Error::Parameter(format!(
            "level must lie in 1..={}, got {level}",
            cfg.depth
        )));
    }
    let counts = sample_ensemble(&cfg, req.replicas, req.workers, |_, t| {
        t.surviving_count(level)
    })?;
    let rows = counts
        .iter()
        .enumerate()
        .map(|(r, c)| {
            strs([
                r.to_string(),
                replica_seed(cfg.seed, r as u64).to_string(),
                c.to_string(),
            ])
        })
        .collect();
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (mean, se) = mean_se(&xs);
    let target = cfg.offspring_distribution()?.mean().powi(level as i32);
    Ok(McOutput {
        replica_header: header(["replica", "seed", "surviving_count"]),
        replica_rows: rows,
        summary_rows: vec![SummaryRow::checked("mean_surviving", mean, se, target)],
        params: json!({ "experiment": req.experiment, "level": level }),
    })
}

/// The conditioned level-n count against its analytic pmf, judged by a
/// chi-square fit (pass iff p > 1e-3).
fn pmf_check(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let cfg = conditioned(config);
    let level = req.level.unwrap_or(cfg.depth);
    if level == 0 || level > cfg.depth {
        return Err(Error::Parameter(format!(
            "level must lie in 1..={}, got {level}",
            cfg.depth
        )));
    }
    let dist = cfg.offspring_distribution()?;
    let pmf = survival_offspring_pmf(&dist, level)?;
    let counts = sample_ensemble(&cfg, req.replicas, req.workers, |_, t| {
        t.surviving_count(level)
    })?;
    let mut observed = vec![0u64; pmf.len()];
    let mut rows = Vec::with_capacity(counts.len());
    for (r, &c) in counts.iter().enumerate() {
        observed[c as usize] += 1;
        rows.push(strs([
            r.to_string(),
            replica_seed(cfg.seed, r as u64).to_string(),
            c.to_string(),
        ]));
    }
    let gof = chi_square_gof(&observed[1..], &pmf[1..])?;
    let mut summary = vec![
        SummaryRow {
            statistic: "chi_square_p".into(),
            estimate: num(gof.p_value),
            se: String::new(),
            target: String::new(),
            sigmas: String::new(),
            verdict: if gof.p_value > 1e-3 { "pass" } else { "fail" }.into(),
        },
        SummaryRow::info("chi_square_stat", gof.statistic, None),
        SummaryRow::info("chi_square_dof", gof.dof as f64, None),
    ];
    let n = req.replicas as f64;
    for (j, (&o, &p)) in observed.iter().zip(&pmf).enumerate() {
        let freq = o as f64 / n;
        let mut row = SummaryRow::info(&format!("p[{j}]"), freq, Some((freq * (1.0 - freq) / n).sqrt()));
        row.target = num(p);
        summary.push(row);
    }
    Ok(McOutput {
        replica_header: header(["replica", "seed", "surviving_count"]),
        replica_rows: rows,
        summary_rows: summary,
        params: json!({ "experiment": req.experiment, "level": level }),
    })
}

/// Per-replica box-counting slope over the deepest levels (all >= 2)
/// against the offspring dimension log E(L) / log M.
fn dim_check(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let cfg = conditioned(config);
    if cfg.depth < 3 {
        return Err(Error::Parameter(
            "dim-check needs depth >= 3 for a two-point fit from level 2".into(),
        ));
    }
    let lo = 2.max(cfg.depth.saturating_sub(6));
    let levels: Vec<u32> = (lo..=cfg.depth).collect();
    let fits = {
        let levels = levels.clone();
        sample_ensemble(&cfg, req.replicas, req.workers, move |_, t| {
            let counts: Vec<u64> = levels
                .iter()
                .map(|&l| t.surviving_count(l))
                .collect::<Result<_>>()?;
            box_dimension(t.config().base, &levels, &counts)
        })?
    };
    let rows = fits
        .iter()
        .enumerate()
        .map(|(r, b)| {
            strs([
                r.to_string(),
                replica_seed(cfg.seed, r as u64).to_string(),
                num(b.dimension),
                num(b.r2),
            ])
        })
        .collect();
    let xs: Vec<f64> = fits.iter().map(|b| b.dimension).collect();
    let (mean, se) = mean_se(&xs);
    let target = cfg.offspring_distribution()?.fractal_dimension()?;
    Ok(McOutput {
        replica_header: header(["replica", "seed", "dimension", "r2"]),
        replica_rows: rows,
        summary_rows: vec![SummaryRow::checked("mean_dimension", mean, se, target)],
        params: json!({ "experiment": req.experiment, "levels": levels }),
    })
}

/// Probability that none of 0 < r < K retained children carries a
/// surviving line, i.e. the chance a surviving cube's child row is
/// incomplete: sum over 0 < r < K of pmf[r] (1 - q^r) / (1 - q).
fn incomplete_given_survival(dist: &OffspringDistribution) -> f64 {
    let q = dist.extinction_prob();
    let k = dist.max_children();
    let mut acc = 0.0;
    for r in 1..k {
        acc += dist.prob(r) * (1.0 - q.powi(r as i32));
    }
    acc / (1.0 - q)
}

/// Smallest integer t with (t-1)^2 > d: the axis layer count past which a
/// sub-cube clears the unit-distance diagonal.
fn clearance_layers(dim: u32) -> u64 {
    (1u64..).find(|t| (t - 1) * (t - 1) > u64::from(dim)).unwrap()
}

fn interior_fraction(base: u32, dim: u32, n: u32, layers: u64) -> f64 {
    let side = f64::from(base).powi(n as i32);
    ((side - 2.0 * layers as f64).max(0.0) / side).powi(dim as i32)
}

struct PruneSetup {
    rule: PruneRule,
    block: u32,
    /// 3-sigma target for the pooled block mean, when one exists.
    target: Option<f64>,
    extra: Vec<SummaryRow>,
}

fn homogeneous_p(config: &PercolationConfig) -> Result<f64> {
    match config.model {
        ModelSpec::Homogeneous { p } => Ok(p),
        _ => Err(Error::Precondition(
            "this construction is analysed for homogeneous retention only".into(),
        )),
    }
}

fn prune_setup(config: &PercolationConfig, req: &McRequest) -> Result<PruneSetup> {
    let dist = config.offspring_distribution()?;
    let (base, dim) = (config.base, config.dim);
    let ln_k = f64::from(dim) * f64::from(base).ln();
    let id = req.experiment.as_str();

    let block = match req.level {
        Some(n) if n >= 1 => n,
        Some(n) => {
            return Err(Error::Parameter(format!("block size must be >= 1, got {n}")));
        }
        None => match id {
            "prune-T1" => bound_c(&dist)?.block,
            "prune-T2" => bound_upor_dim(&dist, req.eps)?.block,
            "prune-holedrop" => bound_upor_dim_general(&dist, req.eps)?.block,
            "prune-T3" => bound_lpor_dim(&dist, req.eps)?.block,
            "prune-T4" => bound_upor_lower(base, dim, homogeneous_p(config)?)?.block,
            "prune-T5" => bound_lpor_lower(&dist)?.block,
            "prune-annular" => annular_bounds(base, dim, homogeneous_p(config)?)?.block,
            _ => 2,
        },
    };
    if config.depth < 2 * block {
        return Err(Error::Parameter(format!(
            "depth {} holds fewer than two block levels of size {block}",
            config.depth
        )));
    }
    let so = survival_offspring(&dist, block)?;
    let top_block = (f64::from(block) * ln_k + so.ln_p_top).exp();

    let setup = match id {
        "prune-T1" => PruneSetup {
            rule: PruneRule::FullBlock { block },
            block,
            target: Some(top_block),
            extra: vec![],
        },
        "prune-T2" => PruneSetup {
            rule: PruneRule::AtLeastTwo { block },
            block,
            target: Some(so.mean - so.p_one),
            extra: vec![],
        },
        "prune-T3" => PruneSetup {
            rule: PruneRule::DropCenter { block },
            block,
            target: Some(so.mean - so.p_top),
            extra: vec![],
        },
        "prune-T5" => PruneSetup {
            rule: PruneRule::NotAll { block },
            block,
            target: Some(so.mean - top_block),
            extra: vec![],
        },
        "prune-holedrop" => PruneSetup {
            rule: PruneRule::HoleDrop { block },
            block,
            target: Some(so.mean - incomplete_given_survival(&dist)),
            extra: vec![],
        },
        "prune-T4" => {
            let rep = bound_upor_lower(base, dim, homogeneous_p(config)?)?;
            let a = rep.constants["a"] as u32;
            if block <= a {
                return Err(Error::Parameter(format!(
                    "block size {block} must exceed the buffer width {a}"
                )));
            }
            let p = homogeneous_p(config)?;
            let ln_c = rep.constants["ln_C"];
            let target = (ln_c + f64::from(block - a) * (p.ln() + ln_k)).exp();
            PruneSetup {
                rule: PruneRule::InteriorShell { block, shell: a },
                block,
                target: Some(target),
                extra: vec![],
            }
        }
        "prune-annular" => {
            let exact =
                so.mean - so.p_one * interior_fraction(base, dim, block, clearance_layers(dim));
            let k0 = 1 + (1u64..).find(|c| c * c >= u64::from(dim)).unwrap();
            let p_b = interior_fraction(base, dim, block, k0);
            let formula = so.mean - so.p_one + p_b;
            PruneSetup {
                rule: PruneRule::AnnularIsolated { block },
                block,
                target: Some(exact),
                extra: vec![SummaryRow::info("formula_mean", formula, None)],
            }
        }
        "prune-conical" => {
            if block < 2 {
                return Err(Error::Parameter(
                    "conical selection needs block size >= 2 (one level above the threshold window)"
                        .into(),
                ));
            }
            PruneSetup {
                rule: PruneRule::ConicalSelect {
                    block,
                    min_level: 1,
                    net: 4096,
                },
                block,
                target: None,
                extra: vec![],
            }
        }
        other => {
            return Err(Error::Parameter(format!(
                "not a pruning experiment: {other}"
            )));
        }
    };
    Ok(setup)
}

fn prune_experiment(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let setup = prune_setup(config, req)?;
    let cfg = conditioned(config);
    let ensemble = sample_ensemble(&cfg, req.replicas, req.workers, |_, t| {
        apply_prune(t, &setup.rule)
    })?;
    let stats = block_offspring_stats(&ensemble)?;

    let mut rows = Vec::with_capacity(ensemble.len());
    let mut fallback_adjacent = 0u64;
    let mut fallback_lexfirst = 0u64;
    let mut conical_selected = 0u64;
    let mut conical_not_found = 0u64;
    let mut conical_below = 0u64;
    for (r, p) in ensemble.iter().enumerate() {
        let counts = p.counts();
        let parents: u64 = counts[..counts.len() - 1].iter().sum();
        let children: u64 = counts[1..].iter().sum();
        let s = p.stats();
        fallback_adjacent += s.hole_fallback_adjacent;
        fallback_lexfirst += s.hole_fallback_lexfirst;
        conical_selected += s.conical_selected;
        conical_not_found += s.conical_not_found;
        conical_below += s.conical_below_threshold;
        rows.push(strs([
            r.to_string(),
            replica_seed(cfg.seed, r as u64).to_string(),
            parents.to_string(),
            children.to_string(),
            counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ]));
    }

    let mut summary = vec![match setup.target {
        Some(t) => SummaryRow::checked("block_mean", stats.mean, stats.se, t),
        None => SummaryRow::info("block_mean", stats.mean, Some(stats.se)),
    }];
    summary.extend(setup.extra);
    summary.push(SummaryRow::info("block_pairs", stats.pairs as f64, None));
    for (name, v) in [
        ("hole_fallback_adjacent", fallback_adjacent),
        ("hole_fallback_lexfirst", fallback_lexfirst),
        ("conical_selected", conical_selected),
        ("conical_not_found", conical_not_found),
        ("conical_below_threshold", conical_below),
    ] {
        if v > 0 {
            summary.push(SummaryRow::info(name, v as f64, None));
        }
    }

    Ok(McOutput {
        replica_header: header(["replica", "seed", "parents", "children", "block_counts"]),
        replica_rows: rows,
        summary_rows: summary,
        params: json!({
            "experiment": req.experiment,
            "rule": setup.rule,
            "block": setup.block,
        }),
    })
}

/// Porosity profiles at sampled limit-measure points; the extremality
/// diagnostic is the median upper porosity over the ensemble (soft
/// threshold 0.40).
fn porosity_extremal(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let cfg = conditioned(config);
    if cfg.depth < 5 {
        return Err(Error::Parameter(
            "porosity-extremal needs depth >= 5 (at least three dyadic scales)".into(),
        ));
    }
    let scales = default_scale_grid(cfg.base, 1..=cfg.depth - 2);
    let points_per_replica = 4u64;
    let per = {
        let scales = scales.clone();
        sample_ensemble(&cfg, req.replicas, req.workers, move |_, t| {
            let set = OccupiedSet::from_tree(t, Occupancy::Surviving, t.config().depth)?;
            let pts = sample_mu_points(t, t.config().depth, points_per_replica)?;
            let mut out = Vec::with_capacity(pts.len());
            for p in &pts {
                let prof = porosity_profile(&set, p, &scales, 3)?;
                let coords = p
                    .coords
                    .iter()
                    .map(|c| num(*c))
                    .collect::<Vec<_>>()
                    .join(";");
                out.push((coords, prof.upor, prof.lpor));
            }
            Ok(out)
        })?
    };
    let mut rows = Vec::new();
    let mut upors = Vec::new();
    let mut lpors = Vec::new();
    for (r, pts) in per.iter().enumerate() {
        for (i, (coords, upor, lpor)) in pts.iter().enumerate() {
            rows.push(strs([
                r.to_string(),
                replica_seed(cfg.seed, r as u64).to_string(),
                i.to_string(),
                coords.clone(),
                num(*upor),
                num(*lpor),
            ]));
            upors.push(*upor);
            lpors.push(*lpor);
        }
    }
    upors.sort_by(|a, b| a.total_cmp(b));
    let median = {
        let n = upors.len();
        if n % 2 == 1 {
            upors[n / 2]
        } else {
            (upors[n / 2 - 1] + upors[n / 2]) / 2.0
        }
    };
    let (mean_u, se_u) = mean_se(&upors);
    let (mean_l, se_l) = mean_se(&lpors);
    let soft = SummaryRow {
        statistic: "median_upor".into(),
        estimate: num(median),
        se: String::new(),
        target: "0.40".into(),
        sigmas: String::new(),
        verdict: if median >= 0.40 { "soft-pass" } else { "soft-fail" }.into(),
    };
    Ok(McOutput {
        replica_header: header(["replica", "seed", "point", "coords", "upor", "lpor"]),
        replica_rows: rows,
        summary_rows: vec![
            soft,
            SummaryRow::info("mean_upor", mean_u, Some(se_u)),
            SummaryRow::info("mean_lpor", mean_l, Some(se_l)),
        ],
        params: json!({
            "experiment": req.experiment,
            "scales": scales,
            "points_per_replica": points_per_replica,
        }),
    })
}

/// Level sets of the finite-scale porosity: per replica, the cubes whose
/// profile stays on one side of alpha, with a box-counting estimate of the
/// set's dimension. No exact target; the paired-batch concentration check
/// lives in the acceptance suite.
fn levelset(config: &PercolationConfig, req: &McRequest) -> Result<McOutput> {
    let cfg = conditioned(config);
    if !(0.0..=0.5).contains(&req.alpha) {
        return Err(Error::Parameter(format!(
            "alpha must lie in [0, 1/2], got {}",
            req.alpha
        )));
    }
    if cfg.depth < 6 {
        return Err(Error::Parameter(
            "levelset needs depth >= 6 (scales 2..=5 under the resolution)".into(),
        ));
    }
    let mode = match req.mode.as_deref() {
        None | Some("upor-at-most") => LevelSetMode::UporAtMost,
        Some("lpor-at-least") => LevelSetMode::LporAtLeast,
        Some(other) => {
            return Err(Error::Parameter(format!(
                "levelset mode must be upor-at-most or lpor-at-least, got {other:?}"
            )));
        }
    };
    let level = match req.level {
        Some(l) if l >= 1 && l < cfg.depth => l,
        Some(l) => {
            return Err(Error::Parameter(format!(
                "level must lie in 1..{}, got {l}",
                cfg.depth
            )));
        }
        None => cfg.depth - 3,
    };
    let scales = default_scale_grid(cfg.base, 2..=5.min(cfg.depth - 1));
    let alpha = req.alpha;
    let ests = {
        let scales = scales.clone();
        sample_ensemble(&cfg, req.replicas, req.workers, move |_, t| {
            level_set(t, level, alpha, mode, &scales, 5, PointPolicy::Center)
        })?
    };
    let mut rows = Vec::with_capacity(ests.len());
    let mut member_counts = Vec::new();
    let mut dims = Vec::new();
    for (r, e) in ests.iter().enumerate() {
        let (d, r2) = match &e.dimension {
            Some(b) => (num(b.dimension), num(b.r2)),
            None => (String::new(), String::new()),
        };
        if let Some(b) = &e.dimension {
            dims.push(b.dimension);
        }
        member_counts.push(e.member_count as f64);
        rows.push(strs([
            r.to_string(),
            replica_seed(cfg.seed, r as u64).to_string(),
            e.member_count.to_string(),
            d,
            r2,
        ]));
    }
    let (mean_m, se_m) = mean_se(&member_counts);
    let mut summary = vec![SummaryRow::info("mean_members", mean_m, Some(se_m))];
    if !dims.is_empty() {
        let (mean_d, se_d) = mean_se(&dims);
        summary.push(SummaryRow::info("levelset_dimension", mean_d, Some(se_d)));
        summary.push(SummaryRow::info(
            "dimension_samples",
            dims.len() as f64,
            None,
        ));
    }
    Ok(McOutput {
        replica_header: header(["replica", "seed", "members", "dimension", "r2"]),
        replica_rows: rows,
        summary_rows: summary,
        params: json!({
            "experiment": "levelset-beta",
            "alpha": alpha,
            "level": level,
            "mode": match mode { LevelSetMode::UporAtMost => "upor-at-most", LevelSetMode::LporAtLeast => "lpor-at-least" },
            "scales": scales,
        }),
    })
}
