use std::path::PathBuf;

use wisca_core::landscape::{
    sgd_momentum_run, summarize, sweep, trajectory_svg, write_trajectory_csv, InitSampler, SimConfig, SweepPair,
};
use wisca_core::Rng;

use crate::common::write_bytes;
use crate::error::{CliError, Result};

pub const SWEEP_HEADER: &str = "q0,k0,raw_iters,wisca_iters";

#[derive(Debug, Clone)]
pub struct SimulateParams {
    pub q0: Option<f64>,
    pub k0: Option<f64>,
    pub cfg: SimConfig,
    pub wisca_init: bool,
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub sweep: Option<usize>,
    pub seed: u64,
}

fn fmt_count(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |n| n.to_string())
}

pub fn sweep_csv(pairs: &[SweepPair]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in pairs {
        out.push_str(&format!(
            "{:.16e},{:.16e},{},{}\n",
            p.q0,
            p.k0,
            fmt_count(p.raw_iters),
            fmt_count(p.wisca_iters)
        ));
    }
    out
}

pub fn cmd_simulate(p: &SimulateParams) -> Result<()> {
    p.cfg.validate().map_err(|e| CliError::Parse(e.to_string()))?;
    if let Some(n) = p.sweep {
        let mut rng = Rng::new(p.seed);
        let pairs = sweep(n, &p.cfg, &InitSampler::default(), &mut rng).map_err(|e| CliError::Parse(e.to_string()))?;
        let csv = sweep_csv(&pairs);
        match &p.csv {
            Some(path) => write_bytes(path, csv.as_bytes())?,
            None => print!("{csv}"),
        }
        let s = summarize(&pairs, &p.cfg);
        let relation = if s.median_raw >= s.median_wisca { ">=" } else { "<" };
        eprintln!(
            "summary: pairs {} wisca strictly fewer {} ({:.3}) fewer or equal {} ({:.3}) median raw {} {relation} median wisca {}",
            s.pairs,
            s.wisca_strictly_fewer,
            s.wisca_strictly_fewer as f64 / s.pairs.max(1) as f64,
            s.wisca_fewer_or_equal,
            s.wisca_fewer_or_equal as f64 / s.pairs.max(1) as f64,
            s.median_raw,
            s.median_wisca
        );
        return Ok(());
    }

    let (Some(q0), Some(k0)) = (p.q0, p.k0) else {
        return Err(CliError::Parse("simulate needs --q0 and --k0, or --sweep".into()));
    };
    if !(q0.is_finite() && k0.is_finite()) {
        return Err(CliError::Parse("--q0 and --k0 must be finite".into()));
    }
    let run = sgd_momentum_run(q0, k0, &p.cfg, p.wisca_init).map_err(|e| CliError::Parse(e.to_string()))?;
    if let Some(path) = &p.csv {
        let mut buf = Vec::new();
        write_trajectory_csv(&run, &mut buf).map_err(|e| CliError::io(path.display(), e))?;
        write_bytes(path, &buf)?;
    }
    if let Some(path) = &p.svg {
        let name = if p.wisca_init { "wisca" } else { "raw" };
        write_bytes(path, trajectory_svg(p.cfg.c, &[(name, &run)]).as_bytes())?;
    }
    let last = run.records.last().expect("at least one record");
    match run.iters_to_converge {
        Some(n) => println!("converged at iter {n} (Q={:.6}, K={:.6}, loss={:.3e})", last.q, last.k, last.loss),
        None if run.diverged => println!("diverged at iter {}", last.iter),
        None => println!("did not converge within {} iterations (loss={:.3e})", p.cfg.max_iters, last.loss),
    }
    Ok(())
}
