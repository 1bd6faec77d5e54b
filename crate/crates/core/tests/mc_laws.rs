//! Distributional checks: sampled ensembles against the analytic laws they
//! are supposed to follow. Seeds are fixed, so every run sees the same
//! draws and the 3-sigma assertions are deterministic.

use percolab_core::{
    chi_square_gof, mean_se, sample_ensemble, survival_offspring_pmf, ModelSpec,
    OffspringDistribution, PercolationConfig,
};

fn hom(base: u32, dim: u32, p: f64, depth: u32, seed: u64, condition: bool) -> PercolationConfig {
    PercolationConfig {
        base,
        dim,
        depth,
        model: ModelSpec::Homogeneous { p },
        seed,
        condition,
        node_cap: 1 << 24,
    }
}

fn binom_pmf(n: u64, p: f64) -> Vec<f64> {
    (0..=n)
        .map(|k| {
            let mut c = 1.0;
            for i in 0..k {
                c = c * (n - i) as f64 / (i + 1) as f64;
            }
            c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect()
}

#[test]
fn level_one_counts_follow_binomial() {
    let config = hom(2, 2, 0.7, 1, 0xA11C_E001, false);
    let counts =
        sample_ensemble(&config, 100_000, None, |_, t| Ok(t.retained_count(1)?)).unwrap();
    let mut observed = vec![0u64; 5];
    for c in counts {
        observed[c as usize] += 1;
    }
    let gof = chi_square_gof(&observed, &binom_pmf(4, 0.7)).unwrap();
    assert!(
        gof.p_value > 1e-3,
        "chi-square p = {} (stat {}, dof {})",
        gof.p_value,
        gof.statistic,
        gof.dof
    );
}

#[test]
fn root_survival_rate_matches_extinction_prob() {
    let config = hom(2, 2, 0.7, 3, 0xBEE5_0007, false);
    let n = 100_000u64;
    let survived = sample_ensemble(&config, n, None, |_, t| Ok(t.root_survives()))
        .unwrap()
        .into_iter()
        .filter(|&b| b)
        .count() as f64;
    let q = OffspringDistribution::binomial(2, 2, 0.7)
        .unwrap()
        .extinction_prob();
    let target = 1.0 - q;
    let sigma = (target * q / n as f64).sqrt();
    let freq = survived / n as f64;
    assert!(
        (freq - target).abs() <= 3.0 * sigma,
        "survival rate {freq} vs {target} (sigma {sigma})"
    );
}

#[test]
fn conditioned_level_mean_follows_mean_power() {
    // Conditioned on survival, the expected surviving count at level n is
    // exactly (mean offspring)^n; for M=2, d=1, p=0.7 that is 1.4^2.
    let config = hom(2, 1, 0.7, 2, 0xC0FF_EE11, true);
    let vals = sample_ensemble(&config, 100_000, None, |_, t| {
        Ok(t.surviving_count(2)? as f64)
    })
    .unwrap();
    let (mean, se) = mean_se(&vals);
    assert!(se > 0.0);
    assert!(
        (mean - 1.96).abs() <= 3.0 * se,
        "conditioned mean {mean} vs 1.96 (se {se})"
    );
}

#[test]
fn conditioned_block_counts_match_analytic_pmf() {
    let config = hom(2, 1, 0.8, 2, 0xD00D_0013, true);
    let counts =
        sample_ensemble(&config, 100_000, None, |_, t| Ok(t.surviving_count(2)?)).unwrap();
    let mut observed = vec![0u64; 5];
    for c in counts {
        observed[c as usize] += 1;
    }
    assert_eq!(observed[0], 0, "conditioning forbids an empty block");

    let dist = OffspringDistribution::binomial(2, 1, 0.8).unwrap();
    let pmf = survival_offspring_pmf(&dist, 2).unwrap();
    let gof = chi_square_gof(&observed[1..], &pmf[1..]).unwrap();
    assert!(
        gof.p_value > 1e-3,
        "chi-square p = {} (stat {}, dof {})",
        gof.p_value,
        gof.statistic,
        gof.dof
    );
}

#[test]
fn rejection_rate_matches_survival_prob() {
    // Conditioning rejects a fresh tree whenever its root dies, so accepted
    // draws / total attempts estimates the survival probability 15/16.
    let config = hom(2, 1, 0.8, 3, 0xFACE_0017, true);
    let n = 20_000u64;
    let rejections: u64 = sample_ensemble(&config, n, None, |_, t| Ok(t.rejections()))
        .unwrap()
        .into_iter()
        .sum();
    let attempts = (n + rejections) as f64;
    let target = 15.0 / 16.0;
    let freq = n as f64 / attempts;
    let sigma = (target * (1.0 - target) / attempts).sqrt();
    assert!(
        (freq - target).abs() <= 3.0 * sigma,
        "acceptance rate {freq} vs {target} (sigma {sigma})"
    );
}
