//! Two-parameter toy landscape `L(Q, K) = (QK − C)²`.
//!
//! Every point on the contour `QK = c` is an equivalent model of every other;
//! the Hessian trace `2(Q² + K²)` along it is smallest where `|Q| == |K|`.
//! This module runs SGD with momentum from a raw start and from its
//! balanced projection, and exports trajectories as CSV or SVG.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LandscapeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("division by zero: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, LandscapeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Target product.
    pub c: f64,
    pub eta: f64,
    pub beta: f64,
    /// Loss threshold; a run stops once `loss < epsilon`.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for SimConfig {
    /// C = 1, η = 0.01, β = 0.9, ε = 1e-2.
    fn default() -> Self {
        Self {
            c: 1.0,
            eta: 0.01,
            beta: 0.9,
            epsilon: 1e-2,
            max_iters: 10_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LandscapeError::Config(msg));
        if !self.c.is_finite() {
            return bad(format!("C must be finite, got {}", self.c));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1), got {}", self.beta));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        Ok(())
    }
}

pub fn toy_loss(q: f64, k: f64, c: f64) -> f64 {
    let r = q * k - c;
    r * r
}

pub fn toy_grad(q: f64, k: f64, c: f64) -> (f64, f64) {
    let r = 2.0 * (q * k - c);
    (r * k, r * q)
}

/// Balanced point on the same contour: `Q' = sign(Q)·√|QK|`, `K' = QK / Q'`.
pub fn wisca_project(q: f64, k: f64) -> (f64, f64) {
    let p = q * k;
    if p == 0.0 {
        return (0.0, 0.0);
    }
    let qp = p.abs().sqrt().copysign(q);
    (qp, p / qp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub q: f64,
    pub k: f64,
    pub loss: f64,
    pub grad_q: f64,
    pub grad_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub converged: bool,
    pub diverged: bool,
    pub iters_to_converge: Option<usize>,
}

/// Heavy-ball SGD: `v ← βv − η∇L`, `θ ← θ + v`, from `(q0, k0)` or its
/// balanced projection.
pub fn sgd_momentum_run(q0: f64, k0: f64, cfg: &SimConfig, wisca_init: bool) -> Result<Trajectory> {
    cfg.validate()?;
    let (mut q, mut k) = if wisca_init { wisca_project(q0, k0) } else { (q0, k0) };
    let (mut vq, mut vk) = (0.0, 0.0);
    let mut records = Vec::new();
    for iter in 0..=cfg.max_iters {
        let loss = toy_loss(q, k, cfg.c);
        let (gq, gk) = toy_grad(q, k, cfg.c);
        records.push(StepRecord {
            iter,
            q,
            k,
            loss,
            grad_q: gq,
            grad_k: gk,
        });
        if !(loss.is_finite() && gq.is_finite() && gk.is_finite()) {
            return Ok(Trajectory {
                records,
                converged: false,
                diverged: true,
                iters_to_converge: None,
            });
        }
        if loss < cfg.epsilon {
            return Ok(Trajectory {
                records,
                converged: true,
                diverged: false,
                iters_to_converge: Some(iter),
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        vq = cfg.beta * vq - cfg.eta * gq;
        vk = cfg.beta * vk - cfg.eta * gk;
        q += vq;
        k += vk;
    }
    Ok(Trajectory {
        records,
        converged: false,
        diverged: false,
        iters_to_converge: None,
    })
}

/// `|Q/K − (Q − εK)/(K − εQ)|`: how much the gradient direction turns after
/// one normalized step. Zero exactly when `Q² == K²`.
pub fn gradient_direction_drift(q: f64, k: f64, eps: f64) -> Result<f64> {
    let denom = k - eps * q;
    if k == 0.0 || denom == 0.0 {
        return Err(LandscapeError::Domain(format!(
            "K = {k}, K − εQ = {denom} at (Q, K, ε) = ({q}, {k}, {eps})"
        )));
    }
    Ok((q / k - (q - eps * k) / denom).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPoint {
    pub q: f64,
    pub k: f64,
    /// Analytic `Tr(H) = 2(Q² + K²)` on the contour.
    pub trace: f64,
}

/// Samples `QK = C` at `grid` points `Q = √C·e^t`, `t` evenly spaced over
/// `[−ln 10, ln 10]`. An odd grid contains `Q = K = √C` exactly.
pub fn contour_flatness_profile(c: f64, grid: usize) -> Result<Vec<ContourPoint>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(LandscapeError::Config(format!("C must be positive, got {c}")));
    }
    if grid < 3 {
        return Err(LandscapeError::Config(format!("grid must be at least 3, got {grid}")));
    }
    let span = 10f64.ln();
    let root = c.sqrt();
    let mid = (grid - 1) as f64 / 2.0;
    Ok((0..grid)
        .map(|i| {
            let t = span * (i as f64 - mid) / mid;
            let (q, k) = if 2 * i == grid - 1 {
                (root, root)
            } else {
                (root * t.exp(), root * (-t).exp())
            };
            ContourPoint {
                q,
                k,
                trace: 2.0 * (q * q + k * k),
            }
        })
        .collect())
}

/// Index of the smallest trace in a profile.
pub fn flattest(profile: &[ContourPoint]) -> Option<usize> {
    profile
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.trace.total_cmp(&b.1.trace))
        .map(|(i, _)| i)
}

pub const CSV_HEADER: &str = "iter,Q,K,loss,gQ,gK";

/// Writes `iter,Q,K,loss,gQ,gK` rows with 17 significant digits.
pub fn write_trajectory_csv<W: Write>(t: &Trajectory, mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &t.records {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.q, r.k, r.loss, r.grad_q, r.grad_k
        )?;
    }
    Ok(())
}

/// Renders trajectories over contour lines of the landscape.
pub fn trajectory_svg(c: f64, paths: &[(&str, &Trajectory)]) -> String {
    let (w, h) = (480.0, 480.0);
    let finite = |r: &&StepRecord| r.q.is_finite() && r.k.is_finite();
    let extent = paths
        .iter()
        .flat_map(|(_, t)| t.records.iter().filter(finite))
        .fold(c.abs().sqrt() * 2.0, |m, r| m.max(r.q.abs()).max(r.k.abs()))
        .min(1e6)
        * 1.1;
    let px = |q: f64| w / 2.0 + q / extent * (w / 2.0);
    let py = |k: f64| h / 2.0 - k / extent * (h / 2.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<line x1="0" y1="{y}" x2="{w}" y2="{y}" stroke="#999"/><line x1="{x}" y1="0" x2="{x}" y2="{h}" stroke="#999"/>"##,
        x = w / 2.0,
        y = h / 2.0
    );
    // Contours QK = level, one hyperbola branch per quadrant.
    for level in [0.25, 0.5, 1.0, 2.0, 4.0].map(|f| f * c) {
        for sign in [1.0, -1.0] {
            let pts: Vec<String> = (1..200)
                .map(|i| sign * extent * i as f64 / 200.0)
                .filter_map(|q| {
                    let k = level / q;
                    (k.abs() <= extent).then(|| format!("{:.2},{:.2}", px(q), py(k)))
                })
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(
                    svg,
                    r##"<polyline points="{}" fill="none" stroke="#ccc"/>"##,
                    pts.join(" ")
                );
            }
        }
    }
    let colors = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e"];
    for (i, (label, t)) in paths.iter().enumerate() {
        let pts: Vec<String> = t
            .records
            .iter()
            .filter(finite)
            .map(|r| format!("{:.2},{:.2}", px(r.q), py(r.k)))
            .collect();
        let color = colors[i % colors.len()];
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{label}</title></polyline>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="8" y="{}" fill="{color}" font-size="12">{label}</text>"#,
            16 + 16 * i
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Paired iteration counts from one sampled initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPair {
    pub q0: f64,
    pub k0: f64,
    pub raw_iters: Option<usize>,
    pub wisca_iters: Option<usize>,
}

impl SweepPair {
    fn count(v: Option<usize>, cfg: &SimConfig) -> usize {
        v.unwrap_or(cfg.max_iters + 1)
    }

    /// Raw and balanced counts, with non-converged runs as `max_iters + 1`.
    pub fn counts(&self, cfg: &SimConfig) -> (usize, usize) {
        (Self::count(self.raw_iters, cfg), Self::count(self.wisca_iters, cfg))
    }
}

/// Distribution of random initial points for sweeps.
///
/// `|Q0|` and `|K0|` are log-uniform on `[min_abs, max_abs]` with a shared
/// sign, rejected until `|Q0·K0 − C|` lies in `[band_lo, band_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSampler {
    pub min_abs: f64,
    pub max_abs: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for InitSampler {
    fn default() -> Self {
        Self {
            min_abs: 0.05,
            max_abs: 20.0,
            band_lo: 0.3,
            band_hi: 3.0,
        }
    }
}

impl InitSampler {
    pub fn sample(&self, c: f64, rng: &mut Rng) -> (f64, f64) {
        let (lo, hi) = (self.min_abs.ln(), self.max_abs.ln());
        loop {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let q = sign * rng.uniform_range(lo, hi).exp();
            let k = sign * rng.uniform_range(lo, hi).exp();
            let gap = (q * k - c).abs();
            if (self.band_lo..=self.band_hi).contains(&gap) {
                return (q, k);
            }
        }
    }
}

pub fn sweep(n: usize, cfg: &SimConfig, sampler: &InitSampler, rng: &mut Rng) -> Result<Vec<SweepPair>> {
    cfg.validate()?;
    (0..n)
        .map(|_| {
            let (q0, k0) = sampler.sample(cfg.c, rng);
            Ok(SweepPair {
                q0,
                k0,
                raw_iters: sgd_momentum_run(q0, k0, cfg, false)?.iters_to_converge,
                wisca_iters: sgd_momentum_run(q0, k0, cfg, true)?.iters_to_converge,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub pairs: usize,
    pub wisca_strictly_fewer: usize,
    pub wisca_fewer_or_equal: usize,
    pub median_raw: f64,
    pub median_wisca: f64,
}

fn median(mut v: Vec<usize>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn summarize(pairs: &[SweepPair], cfg: &SimConfig) -> SweepSummary {
    let counts: Vec<(usize, usize)> = pairs.iter().map(|p| p.counts(cfg)).collect();
    SweepSummary {
        pairs: pairs.len(),
        wisca_strictly_fewer: counts.iter().filter(|(r, w)| w < r).count(),
        wisca_fewer_or_equal: counts.iter().filter(|(r, w)| w <= r).count(),
        median_raw: median(counts.iter().map(|c| c.0).collect()),
        median_wisca: median(counts.iter().map(|c| c.1).collect()),
    }
}
