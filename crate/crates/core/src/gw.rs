//! Galton–Watson analysis of the cube-retention process.
//!
//! The number of retained children of any cube is an offspring distribution
//! on `{0, .., M^d}`. Everything analytic about the limit set comes from its
//! probability generating function `f`: extinction probability `q` (smallest
//! fixed point), the fractal dimension `s = log_M E(L_o)`, and the law of the
//! survival-conditioned block process. The `bound_*` functions package the
//! dimension-bound recipes tied to each pruning construction into
//! [`BoundReport`] records.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;

/// Offspring distribution on `{0, .., M^d}` for one subdivision step.
#[derive(Clone, Debug)]
pub struct OffspringDistribution {
    base: u32,
    dim: u32,
    pmf: Vec<f64>,
    label: String,
}

/// Largest supported offspring alphabet (`M^d + 1` pmf entries).
const MAX_ALPHABET: u64 = 1 << 20;

impl OffspringDistribution {
    /// Build from an explicit pmf of length `M^d + 1`.
    pub fn from_pmf(base: u32, dim: u32, pmf: Vec<f64>) -> Result<OffspringDistribution> {
        let label = format!(
            "pmf=[{}]",
            pmf.iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join("|")
        );
        Self::with_label(base, dim, pmf, label)
    }

    fn with_label(
        base: u32,
        dim: u32,
        pmf: Vec<f64>,
        label: String,
    ) -> Result<OffspringDistribution> {
        if base < 2 || dim == 0 {
            return Err(Error::Parameter(format!(
                "need base >= 2 and dim >= 1, got M={base}, d={dim}"
            )));
        }
        let k = crate::mcube::checked_pow(u64::from(base), dim)
            .filter(|&k| k <= u128::from(MAX_ALPHABET))
            .ok_or_else(|| {
                Error::ResourceCap(format!("offspring alphabet M^d too large (M={base}, d={dim})"))
            })? as u64;
        if pmf.len() as u64 != k + 1 {
            return Err(Error::Parameter(format!(
                "pmf must have M^d + 1 = {} entries, got {}",
                k + 1,
                pmf.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in pmf.iter().enumerate() {
            if !((-1e-12..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::Parameter(format!(
                    "pmf entry {i} out of [0,1]: {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("pmf sums to {sum}, expected 1")));
        }
        let pmf = pmf.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(OffspringDistribution {
            base,
            dim,
            pmf,
            label,
        })
    }

    /// Homogeneous retention with probability `p`: Binomial(M^d, p), built by
    /// exact convolution.
    pub fn binomial(base: u32, dim: u32, p: f64) -> Result<OffspringDistribution> {
        if !(0.0 < p && p < 1.0) {
            return Err(Error::Parameter(format!(
                "retention probability must lie in (0,1), got {p}"
            )));
        }
        let k = crate::mcube::checked_pow(u64::from(base), dim)
            .filter(|&k| k <= u128::from(MAX_ALPHABET))
            .ok_or_else(|| {
                Error::ResourceCap(format!("offspring alphabet M^d too large (M={base}, d={dim})"))
            })? as u64;
        Self::poisson_binomial_impl(base, dim, &vec![p; k as usize], format!("p={p}"))
    }

    /// Independent, possibly unequal per-child retention probabilities
    /// (one per child position): the count is Poisson-binomial.
    pub fn poisson_binomial(base: u32, dim: u32, probs: &[f64]) -> Result<OffspringDistribution> {
        let label = format!(
            "probs=[{}]",
            probs
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join("|")
        );
        Self::poisson_binomial_impl(base, dim, probs, label)
    }

    fn poisson_binomial_impl(
        base: u32,
        dim: u32,
        probs: &[f64],
        label: String,
    ) -> Result<OffspringDistribution> {
        let k = crate::mcube::checked_pow(u64::from(base), dim)
            .filter(|&k| k <= u128::from(MAX_ALPHABET))
            .ok_or_else(|| {
                Error::ResourceCap(format!("offspring alphabet M^d too large (M={base}, d={dim})"))
            })? as u64;
        if probs.len() as u64 != k {
            return Err(Error::Parameter(format!(
                "need M^d = {k} child probabilities, got {}",
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!(
                    "child probability {i} out of [0,1]: {p}"
                )));
            }
        }
        let mut pmf = vec![0.0f64; probs.len() + 1];
        pmf[0] = 1.0;
        for (n, &p) in probs.iter().enumerate() {
            // In-place convolution with (1-p, p); iterate counts downward.
            for c in (0..=n + 1).rev() {
                let stay = if c <= n { pmf[c] * (1.0 - p) } else { 0.0 };
                let up = if c > 0 { pmf[c - 1] * p } else { 0.0 };
                pmf[c] = stay + up;
            }
        }
        Self::with_label(base, dim, pmf, label)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// `M^d`, the maximum possible child count.
    pub fn max_children(&self) -> u64 {
        self.pmf.len() as u64 - 1
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, k: u64) -> f64 {
        self.pmf.get(k as usize).copied().unwrap_or(0.0)
    }

    /// Model descriptor used in report rows.
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, &p)| k as f64 * p)
            .sum()
    }

    pub fn is_supercritical(&self) -> bool {
        self.mean() > 1.0
    }

    /// `P(0 < L_o < M^d)`: some but not all children retained.
    pub fn prob_partial(&self) -> f64 {
        self.pmf[1..self.pmf.len() - 1].iter().sum()
    }

    /// Generating function `f(t) = sum_k p_k t^k` (Horner).
    pub fn pgf(&self, t: f64) -> f64 {
        self.pmf.iter().rev().fold(0.0, |acc, &p| acc * t + p)
    }

    /// `f'(t)`.
    pub fn pgf_prime(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for k in (1..self.pmf.len()).rev() {
            acc = acc * t + k as f64 * self.pmf[k];
        }
        acc
    }

    /// Extinction probability: the smallest fixed point of the pgf in [0,1].
    /// Exactly 1 for mean <= 1; otherwise found by monotone fixed-point
    /// iteration polished with Newton steps (both approach from below for a
    /// convex pgf, so the smallest root is the one reached).
    pub fn extinction_prob(&self) -> f64 {
        if self.mean() <= 1.0 {
            return 1.0;
        }
        let mut t = 0.0f64;
        for _ in 0..10_000 {
            let next = self.pgf(t);
            if next - t < 1e-12 {
                t = next;
                break;
            }
            t = next;
        }
        for _ in 0..64 {
            let g = self.pgf(t) - t;
            let gp = self.pgf_prime(t) - 1.0;
            if gp >= 0.0 || g <= 0.0 {
                break;
            }
            let next = t - g / gp;
            if !next.is_finite() || next <= t {
                break;
            }
            if next - t < 1e-16 {
                t = next;
                break;
            }
            t = next;
        }
        t.clamp(0.0, 1.0)
    }

    /// Similarity/box dimension of the nonempty limit set,
    /// `s = log E(L_o) / log M`. Errors when the process is subcritical.
    pub fn fractal_dimension(&self) -> Result<f64> {
        let mean = self.mean();
        if mean <= 1.0 {
            return Err(Error::Subcritical(format!(
                "mean offspring {mean} <= 1: the limit set is almost surely empty"
            )));
        }
        Ok(mean.ln() / f64::from(self.base).ln())
    }

    /// Probability that a surviving cube has at least one missing child,
    /// `P(0 < L_o < M^d | survive) = sum_{0<k<K} p_k (1 - q^k) / (1 - q)`.
    pub fn survival_hole_prob(&self) -> Result<f64> {
        let q = self.extinction_prob();
        if q >= 1.0 {
            return Err(Error::Subcritical(
                "hole probability conditions on survival; process is subcritical".into(),
            ));
        }
        let k_max = self.pmf.len() - 1;
        let mut num = 0.0;
        for k in 1..k_max {
            num += self.pmf[k] * (1.0 - q.powi(k as i32));
        }
        Ok(num / (1.0 - q))
    }
}

/// Closed-form facts about the survival-conditioned block process at block
/// size `N`: the count of surviving level-N descendants of a surviving cube.
#[derive(Clone, Copy, Debug)]
pub struct SurvivalOffspring {
    pub block: u32,
    /// `E(L~) = E(L_o)^N`.
    pub mean: f64,
    /// `P(L~ = 1) = f'(q)^N` (derivative of the N-fold composition at the
    /// extinction fixed point).
    pub p_one: f64,
    /// `P(L~ = M^dN) = p_K^((K^N-1)/(K-1)) (1-q)^(K^N-1)` with `K = M^d`:
    /// full retention down N levels, all deepest cubes surviving, divided by
    /// the survival probability.
    pub p_top: f64,
    /// Log-space versions, finite or -inf even when the linear fields
    /// overflow or underflow.
    pub ln_mean: f64,
    pub ln_p_one: f64,
    pub ln_p_top: f64,
}

/// Compute [`SurvivalOffspring`] for block size `n >= 1`. Requires a
/// supercritical distribution (conditioning on survival is impossible
/// otherwise).
pub fn survival_offspring(dist: &OffspringDistribution, n: u32) -> Result<SurvivalOffspring> {
    if n == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    let mean1 = dist.mean();
    if mean1 <= 1.0 {
        return Err(Error::Subcritical(format!(
            "mean offspring {mean1} <= 1: survival conditioning undefined"
        )));
    }
    let q = dist.extinction_prob();
    let k = dist.max_children() as f64;
    let kn = k.powi(n as i32);
    let geom = (kn - 1.0) / (k - 1.0);
    let ln_mean = f64::from(n) * mean1.ln();
    let ln_p_one = f64::from(n) * dist.pgf_prime(q).ln();
    let ln_p_top = geom * dist.prob(dist.max_children()).ln() + (kn - 1.0) * (-q).ln_1p();
    Ok(SurvivalOffspring {
        block: n,
        mean: ln_mean.exp(),
        p_one: ln_p_one.exp(),
        p_top: ln_p_top.exp(),
        ln_mean,
        ln_p_one,
        ln_p_top,
    })
}

/// Largest supported pmf length for exact block-pmf composition.
const MAX_BLOCK_PMF: u64 = 4096;

/// Exact pmf of the survival-conditioned block count `L~` on `{0,..,M^dN}`
/// via N-fold pgf composition: the unconditioned block pgf is
/// `f^(N)(q + (1-q) t)`; dropping the mass at zero (which equals q) and
/// rescaling by `1-q` conditions on survival. Entry 0 of the result is 0.
pub fn survival_offspring_pmf(dist: &OffspringDistribution, n: u32) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    if !dist.is_supercritical() {
        return Err(Error::Subcritical(
            "survival conditioning undefined for mean offspring <= 1".into(),
        ));
    }
    let kn = crate::mcube::checked_pow(dist.max_children(), n)
        .filter(|&v| v <= u128::from(MAX_BLOCK_PMF))
        .ok_or_else(|| {
            Error::ResourceCap(format!(
                "block pmf has M^(dN)+1 > {} entries; estimate it by Monte Carlo instead",
                MAX_BLOCK_PMF + 1
            ))
        })?;
    let q = dist.extinction_prob();
    // Coefficients of q + (1-q) t.
    let mut u = vec![q, 1.0 - q];
    for _ in 0..n {
        u = compose_pgf(&dist.pmf, &u);
    }
    debug_assert_eq!(u.len() as u128, kn + 1);
    // The mass at zero of the unconditioned block law is exactly q.
    debug_assert!((u[0] - q).abs() < 1e-9);
    let mut out = vec![0.0; u.len()];
    for (k, &c) in u.iter().enumerate().skip(1) {
        out[k] = (c / (1.0 - q)).max(0.0);
    }
    Ok(out)
}

/// Polynomial composition `f(u(t))` by Horner over polynomial arithmetic.
fn compose_pgf(f: &[f64], u: &[f64]) -> Vec<f64> {
    let mut res = vec![*f.last().unwrap()];
    for &c in f.iter().rev().skip(1) {
        res = poly_mul(&res, u);
        res[0] += c;
    }
    res
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Whether a pruned block process keeps a supercritical mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Subcritical,
    Supercritical,
}

/// One row of the analytic bound table: the block size a construction picks,
/// the expected selected-offspring count `E_L` of the pruned block process,
/// the subcriticality verdict, and (iff `E_L > 1`) the dimension increment
/// `delta` the construction certifies. `constants` carries rule-specific
/// values (porosity constants, radii, probabilities) plus `ln_E_L`.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub theorem: String,
    #[serde(rename = "M")]
    pub base: u32,
    pub d: u32,
    pub params: String,
    #[serde(rename = "N")]
    pub block: u32,
    #[serde(rename = "E_L")]
    pub expected_offspring: f64,
    pub verdict: Verdict,
    pub delta: Option<f64>,
    pub constants: BTreeMap<String, f64>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "theorem,M,d,params,N,E_L,verdict,delta,constants";

    pub fn csv_row(&self) -> String {
        let verdict = match self.verdict {
            Verdict::Subcritical => "subcritical",
            Verdict::Supercritical => "supercritical",
        };
        let delta = self.delta.map(|d| d.to_string()).unwrap_or_default();
        let constants = self
            .constants
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.theorem,
            self.base,
            self.d,
            self.params,
            self.block,
            self.expected_offspring,
            verdict,
            delta,
            constants
        )
    }

    fn build(
        theorem: &str,
        dist_like: (u32, u32, String),
        block: u32,
        ln_e: f64,
        delta: Option<f64>,
        constants: BTreeMap<String, f64>,
    ) -> BoundReport {
        let (base, d, params) = dist_like;
        let mut constants = constants;
        constants.insert("ln_E_L".into(), ln_e);
        BoundReport {
            theorem: theorem.into(),
            base,
            d,
            params,
            block,
            expected_offspring: ln_e.exp(),
            verdict: if ln_e > 0.0 {
                Verdict::Supercritical
            } else {
                Verdict::Subcritical
            },
            delta,
            constants,
        }
    }
}

/// `ln(e^a - e^b)` for `a > b`, stable; `-inf` when the difference is <= 0.
fn ln_diff(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-((b - a).exp())).ln_1p()
}

/// Smallest integer `t >= 1` with `t*t >= d` (exact ceil of sqrt).
fn ceil_sqrt(d: u32) -> u64 {
    let mut t = 1u64;
    while t * t < u64::from(d) {
        t += 1;
    }
    t
}

fn ln_base(base: u32) -> f64 {
    f64::from(base).ln()
}

const BLOCK_SEARCH_CAP: u32 = 1_000_000;

/// Infimum-porosity constant: find the smallest block size `N` making the
/// full-block process subcritical (`M^dN * p_top < 1`), and report the
/// porosity floor `c = (1/2) d^(-1/2) M^(-N)` that holds at mu-almost every
/// point. Requires a supercritical model with `P(L_o = M^d) < 1`.
pub fn bound_c(dist: &OffspringDistribution) -> Result<BoundReport> {
    if dist.prob(dist.max_children()) >= 1.0 {
        return Err(Error::Parameter(
            "full retention is almost sure; the full-block process never dies".into(),
        ));
    }
    let d = dist.dim();
    let lnm = ln_base(dist.base());
    for n in 1..=BLOCK_SEARCH_CAP {
        let so = survival_offspring(dist, n)?;
        let ln_e = f64::from(d * n) * lnm + so.ln_p_top;
        if ln_e < 0.0 {
            let c = 0.5 / f64::from(d).sqrt() * f64::from(dist.base()).powi(-(n as i32));
            let mut constants = BTreeMap::new();
            constants.insert("c".into(), c);
            constants.insert("p_top".into(), so.p_top);
            return Ok(BoundReport::build(
                "upor-infimum",
                (dist.base(), d, dist.label().into()),
                n,
                ln_e,
                None,
                constants,
            ));
        }
    }
    Err(Error::ResourceCap(format!(
        "no subcritical full-block size found up to N = {BLOCK_SEARCH_CAP}"
    )))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0 < eps && eps < 0.5) {
        return Err(Error::Parameter(format!(
            "scale parameter eps must lie in (0, 1/2), got {eps}"
        )));
    }
    Ok(())
}

/// Smallest `n >= 1` with `coeff * M^(-n) < eps` (strict).
fn smallest_block_for_scale(base: u32, coeff: f64, eps: f64) -> Result<u32> {
    let m = f64::from(base);
    for n in 1..=BLOCK_SEARCH_CAP {
        if coeff * m.powi(-(n as i32)) < eps {
            return Ok(n);
        }
    }
    Err(Error::ResourceCap(
        "no block size reaches the requested scale".into(),
    ))
}

/// Upper bound on the dimension of points with upper porosity <= 1/2 - eps:
/// drop single-survivor blocks; `E_L = E(L~) - p_one`, and if `E_L > 1` the
/// exceptional set has dimension at most `s - delta` with
/// `delta = s - log E_L / log M^N`.
pub fn bound_upor_dim(dist: &OffspringDistribution, eps: f64) -> Result<BoundReport> {
    check_eps(eps)?;
    let n = smallest_block_for_scale(dist.base(), f64::from(dist.dim()).sqrt(), eps)?;
    let so = survival_offspring(dist, n)?;
    let ln_e = ln_diff(so.ln_mean, so.ln_p_one);
    let s = dist.fractal_dimension()?;
    let delta = (ln_e > 0.0).then(|| s - ln_e / (f64::from(n) * ln_base(dist.base())));
    let mut constants = BTreeMap::new();
    constants.insert("eps".into(), eps);
    constants.insert("p_one_N".into(), so.p_one);
    Ok(BoundReport::build(
        "upor-dim-upper",
        (dist.base(), dist.dim(), dist.label().into()),
        n,
        ln_e,
        delta,
        constants,
    ))
}

/// General-model variant driven by porosity holes: drop one hole-meeting cube
/// per block with a missing child; `E_L = E(L~) - P(0 < L_o < M^d)`.
pub fn bound_upor_dim_general(dist: &OffspringDistribution, eps: f64) -> Result<BoundReport> {
    check_eps(eps)?;
    let n = smallest_block_for_scale(dist.base(), f64::from(dist.dim()).sqrt(), eps)?;
    let so = survival_offspring(dist, n)?;
    let p_mid = dist.prob_partial();
    let ln_e = ln_diff(so.ln_mean, p_mid.ln());
    let s = dist.fractal_dimension()?;
    let delta = (ln_e > 0.0).then(|| s - ln_e / (f64::from(n) * ln_base(dist.base())));
    let mut constants = BTreeMap::new();
    constants.insert("eps".into(), eps);
    constants.insert("p_partial".into(), p_mid);
    Ok(BoundReport::build(
        "upor-dim-upper-hole",
        (dist.base(), dist.dim(), dist.label().into()),
        n,
        ln_e,
        delta,
        constants,
    ))
}

/// Upper bound on the dimension of points with lower porosity >= eps:
/// drop the central cube of full blocks; `E_L = E(L~) - p_top`. The scale
/// bracket is `3 sqrt(d) M^(-N) < eps`. Needs `P(L_o = M^d) > 0` (otherwise
/// full blocks never occur and the construction is vacuous).
pub fn bound_lpor_dim(dist: &OffspringDistribution, eps: f64) -> Result<BoundReport> {
    check_eps(eps)?;
    if dist.prob(dist.max_children()) <= 0.0 {
        return Err(Error::Parameter(
            "needs positive probability of retaining all M^d children".into(),
        ));
    }
    let n = smallest_block_for_scale(dist.base(), 3.0 * f64::from(dist.dim()).sqrt(), eps)?;
    let so = survival_offspring(dist, n)?;
    let ln_e = ln_diff(so.ln_mean, so.ln_p_top);
    let s = dist.fractal_dimension()?;
    let delta = (ln_e > 0.0).then(|| s - ln_e / (f64::from(n) * ln_base(dist.base())));
    let mut constants = BTreeMap::new();
    constants.insert("eps".into(), eps);
    constants.insert("p_top_N".into(), so.p_top);
    Ok(BoundReport::build(
        "lpor-dim-upper",
        (dist.base(), dist.dim(), dist.label().into()),
        n,
        ln_e,
        delta,
        constants,
    ))
}

/// Lower bound on the dimension of points whose upper porosity stays below
/// 1/2 by a definite margin (homogeneous model only). Keeps interior shells
/// of fully surviving `a`-blocks with `a = ceil(sqrt(d)) + 2`; the selected
/// block process has
/// `E_L(N) = C (p M^d)^(N-a)` with
/// `C = (M^a - 2a)^d p^(M^d (M^da - 1)/(M^d - 1)) (1-q)^(M^ad - 1)`,
/// and the first `N > a` with `E_L > 1` certifies dimension >= delta at
/// points of upper porosity <= rho = 1/2 - M^(-2N)/(2 sqrt(d)).
pub fn bound_upor_lower(base: u32, dim: u32, p: f64) -> Result<BoundReport> {
    let dist = OffspringDistribution::binomial(base, dim, p)?;
    if !dist.is_supercritical() {
        return Err(Error::Subcritical(format!(
            "p = {p} <= M^-d: the process dies out almost surely"
        )));
    }
    let a = (ceil_sqrt(dim) + 2) as u32;
    let ma = crate::mcube::checked_pow(u64::from(base), a)
        .filter(|&v| v <= u128::from(u64::MAX))
        .ok_or_else(|| Error::Parameter("M^a overflows".into()))? as u64;
    if ma <= 2 * u64::from(a) {
        return Err(Error::Parameter(format!(
            "shell width a = {a} leaves no interior (M^a = {ma} <= 2a)"
        )));
    }
    let q = dist.extinction_prob();
    let kf = f64::from(base).powi(dim as i32);
    let kfa = kf.powi(a as i32);
    let ln_c = f64::from(dim) * ((ma - 2 * u64::from(a)) as f64).ln()
        + kf * (kfa - 1.0) / (kf - 1.0) * p.ln()
        + (kfa - 1.0) * (-q).ln_1p();
    let ln_growth = (p * kf).ln();
    let lnm = ln_base(base);
    for n in (a + 1)..=BLOCK_SEARCH_CAP {
        let ln_e = ln_c + f64::from(n - a) * ln_growth;
        if ln_e > 0.0 {
            let m2n = f64::from(base).powi(-2 * n as i32);
            let margin = m2n / (2.0 * f64::from(dim).sqrt());
            let delta = ln_e / (f64::from(n) * lnm);
            let mut constants = BTreeMap::new();
            constants.insert("a".into(), f64::from(a));
            constants.insert("ln_C".into(), ln_c);
            constants.insert("rho".into(), 0.5 - margin);
            constants.insert("eps_margin".into(), margin);
            return Ok(BoundReport::build(
                "upor-dim-lower",
                (base, dim, format!("p={p}")),
                n,
                ln_e,
                Some(delta),
                constants,
            ));
        }
    }
    Err(Error::ResourceCap(format!(
        "no block size with supercritical shell process up to N = {BLOCK_SEARCH_CAP}"
    )))
}

/// Lower bound on the dimension of points with lower porosity <= eps:
/// drop whole blocks when every descendant survives; the first `N` with
/// `E_L = E(L~) - M^dN p_top > 1` certifies dimension >= delta at points of
/// lower porosity <= eps = (1/2) d^(-1/2) M^(-2N).
pub fn bound_lpor_lower(dist: &OffspringDistribution) -> Result<BoundReport> {
    if dist.prob(dist.max_children()) >= 1.0 {
        return Err(Error::Parameter(
            "full retention is almost sure; no block is ever dropped".into(),
        ));
    }
    let d = dist.dim();
    let lnm = ln_base(dist.base());
    for n in 1..=BLOCK_SEARCH_CAP {
        let so = survival_offspring(dist, n)?;
        let ln_top = f64::from(d * n) * lnm + so.ln_p_top;
        let ln_e = ln_diff(so.ln_mean, ln_top);
        if ln_e > 0.0 {
            let eps = 0.5 / f64::from(d).sqrt() * f64::from(dist.base()).powi(-2 * n as i32);
            let delta = ln_e / (f64::from(n) * lnm);
            let mut constants = BTreeMap::new();
            constants.insert("eps".into(), eps);
            constants.insert("p_top_N".into(), so.p_top);
            return Ok(BoundReport::build(
                "lpor-dim-lower",
                (dist.base(), d, dist.label().into()),
                n,
                ln_e,
                Some(delta),
                constants,
            ));
        }
    }
    Err(Error::ResourceCap(format!(
        "no supercritical not-all block size up to N = {BLOCK_SEARCH_CAP}"
    )))
}

/// Annular-isolation construction (homogeneous model): drop a sole surviving
/// block descendant lying more than `(1+sqrt(d)) M^-(n+1)N` inside its block.
/// Reports the bound-form mean
/// `E_L = (pM^d)^N - (pM^d)^N ((1-p) + pq)^((M^d-1)N) + p_b`, whose
/// subcriticality implies the annulus-porosity statement; `exact_mean` in the
/// constants is the exchangeability-exact conditioned mean
/// `E(L~) - p_one * frac_interior`, which Monte-Carlo estimates converge to.
pub fn annular_bounds(base: u32, dim: u32, p: f64) -> Result<BoundReport> {
    let dist = OffspringDistribution::binomial(base, dim, p)?;
    if !dist.is_supercritical() {
        return Err(Error::Subcritical(format!(
            "p = {p} <= M^-d: the process dies out almost surely"
        )));
    }
    // Smallest N with M^N > 3 + sqrt(d), exactly: M^N >= 4 and (M^N-3)^2 > d.
    let mut n = 0u32;
    let mut mn = 1u64;
    loop {
        n += 1;
        mn = mn
            .checked_mul(u64::from(base))
            .ok_or_else(|| Error::Parameter("M^N overflows".into()))?;
        if mn >= 4 && (mn - 3) * (mn - 3) > u64::from(dim) {
            break;
        }
    }
    let k0 = 1 + ceil_sqrt(dim);
    let p_b = ((mn.saturating_sub(2 * k0)) as f64 / mn as f64).powi(dim as i32);
    let so = survival_offspring(&dist, n)?;
    let e_formula = so.mean - so.p_one + p_b;
    // Exact conditioned mean of the operational rule: the sole survivor is
    // uniform over positions by exchangeability, and is dropped iff its
    // boundary offset t satisfies (t-1)^2 > d per axis minimum.
    let mut t = 2u64;
    while (t - 1) * (t - 1) <= u64::from(dim) {
        t += 1;
    }
    let frac_interior = ((mn.saturating_sub(2 * t)) as f64 / mn as f64).powi(dim as i32);
    let exact_mean = so.mean - so.p_one * frac_interior;
    let ln_e = e_formula.ln(); // NaN-free: e_formula > 0 always (p_b >= 0, mean > p_one)
    let delta = (ln_e > 0.0).then(|| ln_e / (f64::from(n) * ln_base(base)));
    let mut constants = BTreeMap::new();
    constants.insert("k0".into(), k0 as f64);
    constants.insert("p_b".into(), p_b);
    constants.insert("p_one_N".into(), so.p_one);
    constants.insert("exact_mean".into(), exact_mean);
    constants.insert("frac_interior".into(), frac_interior);
    Ok(BoundReport::build(
        "annular-isolation",
        (base, dim, format!("p={p}")),
        n,
        ln_e,
        delta,
        constants,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hom(base: u32, dim: u32, p: f64) -> OffspringDistribution {
        OffspringDistribution::binomial(base, dim, p).unwrap()
    }

    #[test]
    fn binomial_pmf_exact() {
        let d = hom(2, 1, 0.8);
        assert_abs_diff_eq!(d.pmf()[0], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(d.pmf()[1], 0.32, epsilon = 1e-15);
        assert_abs_diff_eq!(d.pmf()[2], 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(d.mean(), 1.6, epsilon = 1e-15);
    }

    #[test]
    fn extinction_quadratic_family() {
        // For M=2, d=1 the pgf is quadratic and q = ((1-p)/p)^2.
        for &p in &[0.6, 0.7, 0.8, 0.9] {
            let d = hom(2, 1, p);
            let want = ((1.0 - p) / p).powi(2);
            assert_abs_diff_eq!(d.extinction_prob(), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn extinction_edge_cases() {
        // Subcritical and critical both give exactly 1.
        assert_eq!(hom(2, 1, 0.4).extinction_prob(), 1.0);
        assert_eq!(hom(2, 1, 0.5).extinction_prob(), 1.0);
        // No mass at zero gives q = 0.
        let d = OffspringDistribution::from_pmf(2, 1, vec![0.0, 0.3, 0.7]).unwrap();
        assert_eq!(d.extinction_prob(), 0.0);
        // Near-critical: q solves the quartic, pinned by an external bisection.
        let d22 = hom(2, 2, 0.2501);
        assert_abs_diff_eq!(d22.extinction_prob(), 0.99893399669797, epsilon = 1e-11);
    }

    #[test]
    fn extinction_quartic_oracle() {
        let d = hom(2, 2, 0.7);
        assert_abs_diff_eq!(d.extinction_prob(), 0.00878483398252486, epsilon = 1e-12);
        assert_abs_diff_eq!(d.fractal_dimension().unwrap(), 1.48542682717024176, epsilon = 1e-12);
    }

    #[test]
    fn dimension_oracle_and_subcritical_error() {
        assert_abs_diff_eq!(
            hom(2, 1, 0.8).fractal_dimension().unwrap(),
            0.678071905112637652,
            epsilon = 1e-12
        );
        assert!(matches!(
            hom(2, 1, 0.4).fractal_dimension(),
            Err(Error::Subcritical(_))
        ));
    }

    #[test]
    fn survival_offspring_closed_forms() {
        let d = hom(2, 1, 0.8);
        let so1 = survival_offspring(&d, 1).unwrap();
        assert_abs_diff_eq!(so1.mean, 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(so1.p_one, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(so1.p_top, 0.6, epsilon = 1e-12);
        let so2 = survival_offspring(&d, 2).unwrap();
        assert_abs_diff_eq!(so2.p_one, 0.16, epsilon = 1e-12);
        assert_abs_diff_eq!(so2.p_top, 0.216, epsilon = 1e-12);
        let so3 = survival_offspring(&d, 3).unwrap();
        assert_abs_diff_eq!(so3.p_top, 0.0279936, epsilon = 1e-12);
        assert!(matches!(
            survival_offspring(&hom(2, 1, 0.5), 1),
            Err(Error::Subcritical(_))
        ));
    }

    #[test]
    fn survival_pmf_matches_closed_forms() {
        let d = hom(2, 1, 0.8);
        let pmf1 = survival_offspring_pmf(&d, 1).unwrap();
        assert_eq!(pmf1.len(), 3);
        assert_abs_diff_eq!(pmf1[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pmf1[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(pmf1[2], 0.6, epsilon = 1e-12);
        // Hand-computed exact rationals for N = 2 (pgf composed twice):
        // (0, 0.16, 0.336, 0.288, 0.216).
        let pmf2 = survival_offspring_pmf(&d, 2).unwrap();
        let want = [0.0, 0.16, 0.336, 0.288, 0.216];
        for (got, want) in pmf2.iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for n in 1..=3u32 {
            let pmf = survival_offspring_pmf(&d, n).unwrap();
            let so = survival_offspring(&d, n).unwrap();
            assert_abs_diff_eq!(pmf[1], so.p_one, epsilon = 1e-10);
            assert_abs_diff_eq!(*pmf.last().unwrap(), so.p_top, epsilon = 1e-10);
            assert_abs_diff_eq!(pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
            let mean: f64 = pmf.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
            assert_abs_diff_eq!(mean, so.mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn survival_pmf_cap_errors() {
        let d = hom(2, 2, 0.7);
        // 4^7 = 16384 > 4096.
        assert!(matches!(
            survival_offspring_pmf(&d, 7),
            Err(Error::ResourceCap(_))
        ));
    }

    #[test]
    fn hole_prob_closed_form() {
        // M=2, d=1: only k=1 is partial, so the value is p_1 exactly.
        let d = hom(2, 1, 0.8);
        assert_abs_diff_eq!(d.survival_hole_prob().unwrap(), 0.32, epsilon = 1e-12);
        assert_abs_diff_eq!(d.prob_partial(), 0.32, epsilon = 1e-15);
    }

    #[test]
    fn bound_c_frozen() {
        let r = bound_c(&hom(2, 1, 0.8)).unwrap();
        assert_eq!(r.block, 2);
        assert_eq!(r.verdict, Verdict::Subcritical);
        assert!(r.delta.is_none());
        assert_abs_diff_eq!(r.constants["c"], 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(r.expected_offspring, 0.864, epsilon = 1e-9);
    }

    #[test]
    fn bound_upor_dim_frozen() {
        let r = bound_upor_dim(&hom(2, 1, 0.8), 0.4).unwrap();
        assert_eq!(r.block, 2);
        assert_eq!(r.verdict, Verdict::Supercritical);
        assert_abs_diff_eq!(r.expected_offspring, 2.4, epsilon = 1e-9);
        assert_abs_diff_eq!(r.delta.unwrap(), 0.0465547021957407, epsilon = 1e-9);
        assert!(matches!(
            bound_upor_dim(&hom(2, 1, 0.8), 0.6),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bound_upor_dim_general_frozen() {
        let r = bound_upor_dim_general(&hom(2, 1, 0.8), 0.4).unwrap();
        assert_eq!(r.block, 2);
        assert_abs_diff_eq!(r.expected_offspring, 2.56 - 0.32, epsilon = 1e-9);
    }

    #[test]
    fn bound_lpor_dim_frozen() {
        let r = bound_lpor_dim(&hom(2, 1, 0.8), 0.4).unwrap();
        assert_eq!(r.block, 3);
        assert_abs_diff_eq!(r.expected_offspring, 4.0680064, epsilon = 1e-9);
        assert_abs_diff_eq!(r.delta.unwrap(), 0.0032979221391913, epsilon = 1e-9);
        // A model that never retains everything cannot run this construction.
        let no_full = OffspringDistribution::from_pmf(2, 1, vec![0.1, 0.9, 0.0]).unwrap();
        assert!(matches!(
            bound_lpor_dim(&no_full, 0.4),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bound_upor_lower_frozen() {
        let r = bound_upor_lower(2, 1, 0.9).unwrap();
        assert_eq!(r.block, 5);
        assert_abs_diff_eq!(r.constants["a"], 3.0, epsilon = 0.0);
        assert_abs_diff_eq!(r.constants["ln_C"].exp(), 0.4194304, epsilon = 1e-9);
        assert_abs_diff_eq!(r.expected_offspring, 1.358954496, epsilon = 1e-9);
        assert_abs_diff_eq!(r.delta.unwrap(), 0.0884994297796727, epsilon = 1e-9);
        assert_abs_diff_eq!(r.constants["rho"], 0.49951171875, epsilon = 1e-12);

        let r8 = bound_upor_lower(2, 1, 0.8).unwrap();
        assert_eq!(r8.block, 10);
        assert_abs_diff_eq!(r8.constants["ln_C"].exp(), 0.0559872, epsilon = 1e-9);
        assert_abs_diff_eq!(r8.expected_offspring, 1.50289495621632, epsilon = 1e-8);
        assert_abs_diff_eq!(r8.delta.unwrap(), 0.0587744176625020, epsilon = 1e-9);
        assert_abs_diff_eq!(r8.constants["rho"], 0.499999523162841796875, epsilon = 1e-15);

        assert!(matches!(
            bound_upor_lower(2, 1, 0.4),
            Err(Error::Subcritical(_))
        ));
    }

    #[test]
    fn bound_lpor_lower_frozen() {
        let r = bound_lpor_lower(&hom(2, 1, 0.8)).unwrap();
        assert_eq!(r.block, 2);
        assert_abs_diff_eq!(r.expected_offspring, 1.696, epsilon = 1e-9);
        assert_abs_diff_eq!(r.constants["eps"], 0.03125, epsilon = 1e-15);
        assert_abs_diff_eq!(r.delta.unwrap(), 0.3810680849505561, epsilon = 1e-9);
    }

    #[test]
    fn annular_frozen() {
        let r = annular_bounds(2, 1, 0.8).unwrap();
        assert_eq!(r.block, 3);
        assert_abs_diff_eq!(r.constants["p_b"], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.expected_offspring, 4.532, epsilon = 1e-9);
        assert_abs_diff_eq!(r.constants["exact_mean"], 4.08, epsilon = 1e-9);
        assert_eq!(r.verdict, Verdict::Supercritical);

        let sub = annular_bounds(2, 2, 0.2501).unwrap();
        assert_eq!(sub.block, 3);
        assert_abs_diff_eq!(sub.constants["p_b"], 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(sub.expected_offspring, 0.0648997870031700, epsilon = 1e-9);
        assert_eq!(sub.verdict, Verdict::Subcritical);
    }

    #[test]
    fn delta_rederivable_from_printed_fields() {
        // The CSV contract: delta must be recomputable from E_L, N, s.
        let d = hom(2, 1, 0.8);
        let s = d.fractal_dimension().unwrap();
        let lnm = 2.0f64.ln();
        for r in [
            bound_upor_dim(&d, 0.4).unwrap(),
            bound_lpor_dim(&d, 0.4).unwrap(),
        ] {
            let want = s - r.expected_offspring.ln() / (f64::from(r.block) * lnm);
            assert_abs_diff_eq!(r.delta.unwrap(), want, epsilon = 1e-9);
        }
        for r in [bound_lpor_lower(&d).unwrap(), bound_upor_lower(2, 1, 0.9).unwrap()] {
            let want = r.expected_offspring.ln() / (f64::from(r.block) * lnm);
            assert_abs_diff_eq!(r.delta.unwrap(), want, epsilon = 1e-9);
        }
    }

    #[test]
    fn csv_row_shape() {
        let r = bound_c(&hom(2, 1, 0.8)).unwrap();
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), BoundReport::CSV_HEADER.split(',').count());
        assert!(row.starts_with("upor-infimum,2,1,p=0.8,2,"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["M"], 2);
        assert_eq!(json["N"], 2);
        assert!(json["delta"].is_null());
    }

    #[test]
    fn pmf_validation_errors() {
        assert!(OffspringDistribution::from_pmf(2, 1, vec![0.5, 0.5]).is_err());
        assert!(OffspringDistribution::from_pmf(2, 1, vec![0.5, 0.2, 0.2]).is_err());
        assert!(OffspringDistribution::from_pmf(2, 1, vec![1.2, -0.2, 0.0]).is_err());
        assert!(OffspringDistribution::binomial(2, 1, 1.0).is_err());
        assert!(OffspringDistribution::binomial(2, 1, 0.0).is_err());
        assert!(OffspringDistribution::poisson_binomial(2, 1, &[0.9]).is_err());
    }

    #[test]
    fn poisson_binomial_mean_is_sum() {
        let d = OffspringDistribution::poisson_binomial(2, 1, &[0.9, 0.6]).unwrap();
        assert_abs_diff_eq!(d.mean(), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.pmf()[0], 0.1 * 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(d.pmf()[2], 0.9 * 0.6, epsilon = 1e-15);
    }
}
