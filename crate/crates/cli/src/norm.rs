use std::path::PathBuf;

use wisca_core::stats::{check_table, convergence_experiment, parse_sizes, TableVerdict};

use crate::common::write_bytes;
use crate::error::{CliError, Result};

pub const DEFAULT_SIZES: &str = "16x16,64x64,256x256,1024x1024";

#[derive(Debug, Clone)]
pub struct NormParams {
    pub sizes: String,
    pub trials: usize,
    pub sigma: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_norm_theorem(p: &NormParams) -> Result<()> {
    let sizes = parse_sizes(&p.sizes).map_err(|e| CliError::Parse(e.to_string()))?;
    let table = convergence_experiment(&sizes, p.trials, p.sigma, p.seed).map_err(|e| CliError::Parse(e.to_string()))?;
    let csv = table.to_csv();
    match &p.out {
        Some(path) => write_bytes(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    match check_table(&table) {
        TableVerdict::Skipped(why) => {
            eprintln!("warning: {why}");
            Ok(())
        }
        TableVerdict::Checked(checks) => {
            let failed: Vec<String> = checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect();
            for c in &checks {
                eprintln!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Assertion(format!("concentration checks failed:\n{}", failed.join("\n"))))
            }
        }
    }
}
