//! Small statistics helpers shared by experiments and tests.

use crate::error::{Error, Result};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean and standard error of the mean (n-1 variance). SE is 0 for
/// fewer than two observations.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Number of bins after pooling low-expectation bins.
    pub bins: usize,
}

/// Pearson goodness-of-fit test of observed counts against expected
/// probabilities. Adjacent bins are pooled until each expected count is at
/// least 5 (the usual validity rule for the chi-square approximation).
pub fn chi_square_gof(observed: &[u64], expected_probs: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected_probs.len() {
        return Err(Error::Parameter(format!(
            "observed bins {} != expected bins {}",
            observed.len(),
            expected_probs.len()
        )));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("no observations".into()));
    }
    let psum: f64 = expected_probs.iter().sum();
    if (psum - 1.0).abs() > 1e-6 || expected_probs.iter().any(|&p| p < 0.0) {
        return Err(Error::Parameter(format!(
            "expected probabilities must be nonnegative and sum to 1 (sum {psum})"
        )));
    }
    // Pool adjacent bins until expected >= 5.
    let mut pooled: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
    let mut acc_o = 0.0;
    let mut acc_e = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        acc_o += o as f64;
        acc_e += p * total as f64;
        if acc_e >= 5.0 {
            pooled.push((acc_o, acc_e));
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 || acc_o > 0.0 {
        if let Some(last) = pooled.last_mut() {
            last.0 += acc_o;
            last.1 += acc_e;
        } else {
            pooled.push((acc_o, acc_e));
        }
    }
    if pooled.len() < 2 {
        return Err(Error::Parameter(
            "fewer than two bins with adequate expected counts".into(),
        ));
    }
    let statistic: f64 = pooled
        .iter()
        .map(|&(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = pooled.len() - 1;
    let chi = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Parameter(format!("chi-square dof {dof}: {e}")))?;
    let p_value = 1.0 - chi.cdf(statistic);
    Ok(ChiSquare {
        statistic,
        dof,
        p_value,
        bins: pooled.len(),
    })
}

/// Ordinary least squares of y against x. Returns (slope, intercept, r2,
/// residuals). `degenerate` is true when y has (numerically) no variance, in
/// which case the slope is 0 and r2 is reported as 1.
pub struct LeastSquares {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub residuals: Vec<f64>,
    pub degenerate: bool,
}

pub fn least_squares(x: &[f64], y: &[f64]) -> Result<LeastSquares> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Parameter(
            "least squares needs >= 2 equal-length samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Parameter("x values are all equal".into()));
    }
    if syy <= 1e-20 {
        return Ok(LeastSquares {
            slope: 0.0,
            intercept: my,
            r2: 1.0,
            residuals: vec![0.0; x.len()],
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| b - (intercept + slope * a))
        .collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(LeastSquares {
        slope,
        intercept,
        r2: 1.0 - ss_res / syy,
        residuals,
        degenerate: false,
    })
}
