//! Functional-equivalence checks and flatness probes.
//!
//! Two parameter sets are equivalent when the same architecture maps every
//! input to the same output. [`verify_equivalence`] checks that over a
//! battery of inputs. The sharpness helpers estimate `Tr(H)` by central
//! second differences and compare a Monte-Carlo estimate of the loss under
//! Gaussian parameter noise with its second-order prediction
//! `L0 + σ²/2 · Tr(H)`.

use std::cmp::Ordering;
use std::fmt::Display;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{gaussian_fill, relative, Matrix};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("structural mismatch on input {index}: outputs {a:?} vs {b:?}")]
    Structural {
        index: usize,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("forward pass failed on input {index}: {message}")]
    Forward { index: usize, message: String },
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training losses differ: {0} vs {1}")]
    LossMismatch(f64, f64),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// Deviation between two models over an input battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub battery_size: usize,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Battery index with the largest relative deviation.
    pub worst_index: Option<usize>,
}

pub const DEFAULT_BATTERY: usize = 32;
pub const DEFAULT_BATTERY_SEED: u64 = 0x5eed;

/// `count` inputs of shape `n_tokens × d_model` with `N(0, 1)` entries.
pub fn gaussian_battery(count: usize, n_tokens: usize, d_model: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| gaussian_fill(n_tokens, d_model, 1.0, &mut rng).expect("unit sigma"))
        .collect()
}

fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return job();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(job),
        Err(_) => job(),
    }
}

/// Runs both forwards over `battery` using the global thread pool.
pub fn verify_equivalence<FA, FB, E>(f_a: FA, f_b: FB, battery: &[Matrix], tol: f64) -> Result<EquivalenceReport>
where
    FA: Fn(&Matrix) -> std::result::Result<Matrix, E> + Sync,
    FB: Fn(&Matrix) -> std::result::Result<Matrix, E> + Sync,
    E: Display,
{
    verify_equivalence_with(f_a, f_b, battery, tol, 0)
}

/// As [`verify_equivalence`] on a dedicated pool of `workers` threads
/// (0 = global pool). The report does not depend on `workers`.
pub fn verify_equivalence_with<FA, FB, E>(
    f_a: FA,
    f_b: FB,
    battery: &[Matrix],
    tol: f64,
    workers: usize,
) -> Result<EquivalenceReport>
where
    FA: Fn(&Matrix) -> std::result::Result<Matrix, E> + Sync,
    FB: Fn(&Matrix) -> std::result::Result<Matrix, E> + Sync,
    E: Display,
{
    if !(tol > 0.0) {
        return Err(VerifyError::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let per_input: Vec<Result<(f64, f64)>> = with_workers(workers, || {
        battery
            .par_iter()
            .enumerate()
            .map(|(index, x)| {
                let forward_err = |e: E| VerifyError::Forward {
                    index,
                    message: e.to_string(),
                };
                let a = f_a(x).map_err(forward_err)?;
                let b = f_b(x).map_err(|e| VerifyError::Forward {
                    index,
                    message: e.to_string(),
                })?;
                if a.shape() != b.shape() {
                    return Err(VerifyError::Structural {
                        index,
                        a: a.shape(),
                        b: b.shape(),
                    });
                }
                let abs = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| if p == q { 0.0 } else { (p - q).abs() })
                    .fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
                Ok((abs, relative(abs, a.max_abs())))
            })
            .collect()
    });

    let mut report = EquivalenceReport {
        battery_size: battery.len(),
        max_abs_dev: 0.0,
        max_rel_dev: 0.0,
        tolerance: tol,
        passed: true,
        worst_index: None,
    };
    for (i, r) in per_input.into_iter().enumerate() {
        let (abs, rel) = r?;
        report.max_abs_dev = report.max_abs_dev.max(abs);
        if report.worst_index.is_none() || rel > report.max_rel_dev {
            report.max_rel_dev = rel;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_dev <= tol;
    Ok(report)
}

/// Finite-difference step used when none is given.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn eval<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64]) -> Result<f64> {
    let v = f(theta);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VerifyError::NonFinite(format!("f({theta:?}) = {v}")))
    }
}

/// `Σ_i (f(θ + h·e_i) − 2f(θ) + f(θ − h·e_i)) / h²`.
pub fn hessian_trace<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(VerifyError::Invalid(format!("step must be positive, got {h}")));
    }
    let f0 = eval(&f, theta)?;
    let mut point = theta.to_vec();
    let mut trace = 0.0;
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let up = eval(&f, &point)?;
        point[i] = theta[i] - h;
        let down = eval(&f, &point)?;
        point[i] = theta[i];
        trace += (up - 2.0 * f0 + down) / (h * h);
    }
    Ok(trace)
}

/// Expected loss under `δ ~ N(0, σ²I)`, measured and predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessProbe {
    pub base_loss: f64,
    pub hessian_trace: f64,
    pub sigma: f64,
    pub samples: usize,
    pub mc_expected_val_loss: f64,
    /// Standard error of the Monte-Carlo mean.
    pub mc_std_error: f64,
    pub analytic_expected_val_loss: f64,
}

const MC_CHUNK: usize = 4096;

pub fn expected_val_loss<F>(f: F, theta: &[f64], sigma: f64, samples: usize, rng: &mut Rng) -> Result<SharpnessProbe>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(VerifyError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if samples == 0 {
        return Err(VerifyError::Invalid("samples must be at least 1".into()));
    }
    let base_loss = eval(&f, theta)?;
    let trace = hessian_trace(&f, theta, DEFAULT_FD_STEP)?;

    // Chunk c draws from its own stream, so the result is the same on any
    // number of threads.
    let base_seed = rng.next_u64();
    let chunks = samples.div_ceil(MC_CHUNK);
    let sums: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = Rng::stream(base_seed, c as u64);
            let n = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut point = vec![0.0; theta.len()];
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                for (p, t) in point.iter_mut().zip(theta) {
                    *p = t + stream.normal(sigma);
                }
                let v = eval(&f, &point)?;
                s += v;
                s2 += v * v;
            }
            Ok((s, s2))
        })
        .collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for r in sums {
        let (a, b) = r?;
        s += a;
        s2 += b;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = if samples > 1 {
        ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(SharpnessProbe {
        base_loss,
        hessian_trace: trace,
        sigma,
        samples,
        mc_expected_val_loss: mean,
        mc_std_error: (var / n).sqrt(),
        analytic_expected_val_loss: base_loss + 0.5 * sigma * sigma * trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharper {
    First,
    Second,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessComparison {
    pub sharper: Sharper,
    pub trace_first: f64,
    pub trace_second: f64,
    /// `E[L_val(θ₁)] − E[L_val(θ₂)] = σ²/2 · (Tr H₁ − Tr H₂)`.
    pub expected_loss_gap: f64,
}

/// Relative gap below which two traces count as equal.
const TRACE_TIE_TOL: f64 = 1e-9;

/// Which of two equal-loss points is sharper (larger `Tr(H)`).
pub fn sharpness_compare<F: Fn(&[f64]) -> f64>(
    f: F,
    theta1: &[f64],
    theta2: &[f64],
    sigma: f64,
    loss_tol: f64,
) -> Result<SharpnessComparison> {
    let l1 = eval(&f, theta1)?;
    let l2 = eval(&f, theta2)?;
    if (l1 - l2).abs() > loss_tol {
        return Err(VerifyError::LossMismatch(l1, l2));
    }
    let t1 = hessian_trace(&f, theta1, DEFAULT_FD_STEP)?;
    let t2 = hessian_trace(&f, theta2, DEFAULT_FD_STEP)?;
    let scale = t1.abs().max(t2.abs()).max(f64::MIN_POSITIVE);
    let sharper = if (t1 - t2).abs() <= TRACE_TIE_TOL * scale {
        Sharper::Tie
    } else {
        match t1.partial_cmp(&t2) {
            Some(Ordering::Greater) => Sharper::First,
            _ => Sharper::Second,
        }
    };
    Ok(SharpnessComparison {
        sharper,
        trace_first: t1,
        trace_second: t2,
        expected_loss_gap: 0.5 * sigma * sigma * (t1 - t2),
    })
}
