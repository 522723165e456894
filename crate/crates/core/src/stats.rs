//! Monte-Carlo check that norm ratios of i.i.d. Gaussian matrices
//! concentrate at 1 as the parameter count grows.
//!
//! For `W ∈ ℝ^{m×n}` with `N(0, σ²)` entries:
//! `E‖W‖₁ = mnσ√(2/π)`, `Var‖W‖₁ = mnσ²(1 − 2/π)`,
//! `E‖W‖₂² = mnσ²`, `Var‖W‖₂² = 2mnσ⁴`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Trials below this count produce statistics but no assertions.
pub const MIN_ASSERTABLE_TRIALS: usize = 100;

/// Default deviation threshold for the exceedance column.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Norm statistics of one independent pair of matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSample {
    pub ratio_l1: f64,
    pub ratio_l2: f64,
    /// `‖W_q‖₁ / (mnσ√(2/π))`.
    pub norm_l1: f64,
    /// `‖W_q‖₂² / (mnσ²)`.
    pub norm_l2sq: f64,
}

/// Streams `count` Gaussian entries, returning `(Σ|x|, Σx²)`.
fn gaussian_sums(count: usize, sigma: f64, rng: &mut Rng) -> (f64, f64) {
    let (mut abs, mut sq) = (0.0, 0.0);
    for _ in 0..count {
        let x = rng.standard_normal();
        abs += x.abs();
        sq += x * x;
    }
    (sigma * abs, sigma * sigma * sq)
}

fn check_dims(m: usize, n: usize, sigma: f64) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(StatsError::Invalid(format!("dimensions must be positive, got {m}x{n}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(StatsError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn sample_pair(m: usize, n: usize, sigma: f64, rng: &mut Rng) -> Result<TrialSample> {
    check_dims(m, n, sigma)?;
    let count = m * n;
    let (q1, q2) = gaussian_sums(count, sigma, rng);
    let (k1, k2) = gaussian_sums(count, sigma, rng);
    let mn = count as f64;
    Ok(TrialSample {
        ratio_l1: q1 / k1,
        ratio_l2: (q2 / k2).sqrt(),
        norm_l1: q1 / (mn * sigma * (2.0 / PI).sqrt()),
        norm_l2sq: q2 / (mn * sigma * sigma),
    })
}

/// `(‖W_q‖₁/‖W_k‖₁, ‖W_q‖₂/‖W_k‖₂)` for two fresh Gaussian matrices.
pub fn norm_ratio_trial(m: usize, n: usize, sigma: f64, rng: &mut Rng) -> Result<(f64, f64)> {
    sample_pair(m, n, sigma, rng).map(|s| (s.ratio_l1, s.ratio_l2))
}

/// Runs `trials` independent pairs; trial `t` of size slot `slot` draws from
/// its own stream so results match at any thread count.
pub fn run_trials(m: usize, n: usize, trials: usize, sigma: f64, seed: u64, slot: u64) -> Result<Vec<TrialSample>> {
    check_dims(m, n, sigma)?;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::stream(seed, (slot << 32) | t as u64);
            sample_pair(m, n, sigma, &mut rng)
        })
        .collect()
}

/// 4σ envelope for `|ratio_l1 − 1|`, with `σ² ≈ 2(π/2 − 1)/mn`.
pub fn ratio_envelope(m: usize, n: usize) -> f64 {
    4.0 * (2.0 * (PI / 2.0 - 1.0) / (m * n) as f64).sqrt()
}

/// Chebyshev bound on `P(|‖W‖₁/(mnσ√(2/π)) − 1| > ε)`, capped at 1.
pub fn chebyshev_bound(m: usize, n: usize, epsilon: f64) -> f64 {
    ((PI / 2.0 - 1.0) / (epsilon * epsilon * (m * n) as f64)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    pub mean_ratio_l1: f64,
    pub std_ratio_l1: f64,
    pub mean_ratio_l2: f64,
    pub std_ratio_l2: f64,
    /// Empirical `E‖W‖₁ / (mnσ√(2/π))`.
    pub mean_norm_l1: f64,
    /// Empirical `Var(‖W‖₂²) / (mnσ⁴)`.
    pub var_norm_l2sq: f64,
    pub epsilon: f64,
    /// Fraction of trials with `|‖W‖₁/(mnσ√(2/π)) − 1| > ε`.
    pub exceed_freq: f64,
    pub chebyshev_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub sigma: f64,
    pub seed: u64,
    pub rows: Vec<ConvergenceRow>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize_row(m: usize, n: usize, sigma: f64, epsilon: f64, samples: &[TrialSample]) -> ConvergenceRow {
    let (mean_ratio_l1, std_ratio_l1) = mean_std(samples.iter().map(|s| s.ratio_l1));
    let (mean_ratio_l2, std_ratio_l2) = mean_std(samples.iter().map(|s| s.ratio_l2));
    let (mean_norm_l1, _) = mean_std(samples.iter().map(|s| s.norm_l1));
    let (_, sd_l2sq) = mean_std(samples.iter().map(|s| s.norm_l2sq));
    // norm_l2sq is ‖W‖₂²/(mnσ²); rescale its variance to Var(‖W‖₂²)/(mnσ⁴).
    let var_norm_l2sq = sd_l2sq * sd_l2sq * (m * n) as f64;
    let exceed = samples.iter().filter(|s| (s.norm_l1 - 1.0).abs() > epsilon).count();
    let _ = sigma;
    ConvergenceRow {
        m,
        n,
        trials: samples.len(),
        mean_ratio_l1,
        std_ratio_l1,
        mean_ratio_l2,
        std_ratio_l2,
        mean_norm_l1,
        var_norm_l2sq,
        epsilon,
        exceed_freq: exceed as f64 / samples.len().max(1) as f64,
        chebyshev_bound: chebyshev_bound(m, n, epsilon),
    }
}

pub fn convergence_experiment(sizes: &[(usize, usize)], trials: usize, sigma: f64, seed: u64) -> Result<ConvergenceTable> {
    if trials == 0 {
        return Err(StatsError::Invalid("trials must be at least 1".into()));
    }
    let rows = sizes
        .iter()
        .enumerate()
        .map(|(slot, &(m, n))| {
            let samples = run_trials(m, n, trials, sigma, seed, slot as u64)?;
            Ok(summarize_row(m, n, sigma, DEFAULT_EPSILON, &samples))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceTable { sigma, seed, rows })
}

pub const CSV_HEADER: &str = "m,n,trials,mean_ratio_l1,std_ratio_l1,mean_ratio_l2,std_ratio_l2,mean_norm_l1,var_norm_l2sq,epsilon,exceed_freq,chebyshev_bound";

impl ConvergenceTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.m,
                r.n,
                r.trials,
                r.mean_ratio_l1,
                r.std_ratio_l1,
                r.mean_ratio_l2,
                r.std_ratio_l2,
                r.mean_norm_l1,
                r.var_norm_l2sq,
                r.epsilon,
                r.exceed_freq,
                r.chebyshev_bound
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of the concentration assertions over a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TableVerdict {
    /// Too few trials to assert anything.
    Skipped(String),
    Checked(Vec<Check>),
}

impl TableVerdict {
    pub fn all_passed(&self) -> bool {
        match self {
            TableVerdict::Skipped(_) => true,
            TableVerdict::Checked(c) => c.iter().all(|c| c.passed),
        }
    }
}

/// Assertions a table must satisfy: unbiased L1 mean and L2² variance for
/// `mn ≥ 4096`, exceedance under the Chebyshev bound plus 3σ binomial noise,
/// and strictly shrinking ratio spread along the size ladder.
pub fn check_table(table: &ConvergenceTable) -> TableVerdict {
    let min_trials = table.rows.iter().map(|r| r.trials).min().unwrap_or(0);
    if min_trials < MIN_ASSERTABLE_TRIALS {
        return TableVerdict::Skipped(format!(
            "{min_trials} trials per size is below {MIN_ASSERTABLE_TRIALS}; assertions skipped"
        ));
    }
    let mut checks = Vec::new();
    for r in &table.rows {
        let tag = format!("{}x{}", r.m, r.n);
        if r.m * r.n >= 4096 {
            checks.push(Check {
                name: format!("{tag} mean_ratio_l1"),
                passed: (r.mean_ratio_l1 - 1.0).abs() <= 0.01,
                detail: format!("{:.6} within 1 ± 0.01", r.mean_ratio_l1),
            });
            if r.trials >= 1000 {
                checks.push(Check {
                    name: format!("{tag} l1 expectation"),
                    passed: (0.99..=1.01).contains(&r.mean_norm_l1),
                    detail: format!("{:.6} in [0.99, 1.01]", r.mean_norm_l1),
                });
                checks.push(Check {
                    name: format!("{tag} l2 variance"),
                    passed: (1.8..=2.2).contains(&r.var_norm_l2sq),
                    detail: format!("{:.4} in [1.8, 2.2]", r.var_norm_l2sq),
                });
            }
        }
        let b = r.chebyshev_bound;
        let noise = 3.0 * (b * (1.0 - b) / r.trials as f64).sqrt();
        checks.push(Check {
            name: format!("{tag} chebyshev"),
            passed: r.exceed_freq <= b + noise,
            detail: format!("exceedance {:.5} <= bound {:.5} + {:.5}", r.exceed_freq, b, noise),
        });
    }
    let mut ladder: Vec<&ConvergenceRow> = table.rows.iter().filter(|r| r.m * r.n > 1).collect();
    ladder.sort_by_key(|r| r.m * r.n);
    for pair in ladder.windows(2) {
        let (small, big) = (pair[0], pair[1]);
        if small.m * small.n == big.m * big.n {
            continue;
        }
        checks.push(Check {
            name: format!("std shrinks {}x{} -> {}x{}", small.m, small.n, big.m, big.n),
            passed: big.std_ratio_l1 < small.std_ratio_l1 && big.std_ratio_l2 < small.std_ratio_l2,
            detail: format!(
                "l1 {:.3e} -> {:.3e}, l2 {:.3e} -> {:.3e}",
                small.std_ratio_l1, big.std_ratio_l1, small.std_ratio_l2, big.std_ratio_l2
            ),
        });
    }
    TableVerdict::Checked(checks)
}

/// Parses `"16x16,64x64"` into size pairs.
pub fn parse_sizes(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            let (m, n) = s
                .split_once(['x', 'X'])
                .ok_or_else(|| StatsError::Invalid(format!("size '{s}' is not MxN")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| StatsError::Invalid(format!("bad dimension in '{s}'")))
            };
            Ok((parse(m)?, parse(n)?))
        })
        .collect()
}
