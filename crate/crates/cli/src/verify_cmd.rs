use std::path::PathBuf;

use rayon::prelude::*;
use wisca_core::checkpoint::layout::{resolve_layout, Block, LayoutError};

use crate::common::{block_seed, block_tolerance, load_checkpoint, load_layout, resolve, verify_block};
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct VerifyParams {
    pub a: PathBuf,
    pub b: PathBuf,
    pub layout: PathBuf,
    pub battery: usize,
    pub tolerance: Option<f64>,
    pub seed: u64,
}

fn shape_of(block: &Block) -> String {
    match block {
        Block::Attention { weights, .. } => format!(
            "q {:?} k {:?} v {:?} o {:?}",
            weights.w_q.shape(),
            weights.w_k.shape(),
            weights.w_v.shape(),
            weights.w_o.shape()
        ),
        Block::Lora(p) => format!("a {:?} b {:?}", p.a.shape(), p.b.shape()),
    }
}

pub fn cmd_verify(p: &VerifyParams) -> Result<()> {
    let (cp_a, _) = load_checkpoint(&p.a)?;
    let (cp_b, _) = load_checkpoint(&p.b)?;
    let (ld, _) = load_layout(&p.layout)?;
    let blocks_a = resolve(&cp_a, &ld)?;
    // A second file that no longer fits the descriptor is a different model.
    let blocks_b = resolve_layout(&cp_b, &ld).map_err(|e| match e {
        LayoutError::Geometry { .. } | LayoutError::Unmatched(_) | LayoutError::Model(_) => {
            CliError::Structural(format!("{}: {e}", p.b.display()))
        }
        other => CliError::from(other),
    })?;
    let labels_a: Vec<&str> = blocks_a.iter().map(|b| b.label.as_str()).collect();
    let labels_b: Vec<&str> = blocks_b.iter().map(|b| b.label.as_str()).collect();
    if labels_a != labels_b {
        return Err(CliError::Structural(format!(
            "block sets differ: {labels_a:?} vs {labels_b:?}"
        )));
    }
    for (x, y) in blocks_a.iter().zip(&blocks_b) {
        let (sx, sy) = (shape_of(&x.block), shape_of(&y.block));
        if sx != sy {
            return Err(CliError::Structural(format!("{}: shapes differ: {sx} vs {sy}", x.label)));
        }
    }

    let reports = blocks_a
        .par_iter()
        .zip(blocks_b.par_iter())
        .enumerate()
        .map(|(i, (x, y))| {
            let tol = p
                .tolerance
                .unwrap_or_else(|| block_tolerance(&cp_a, x).max(block_tolerance(&cp_b, y)));
            verify_block(&x.label, &x.block, &y.block, p.battery, tol, block_seed(p.seed, i))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut failed = Vec::new();
    for (x, r) in blocks_a.iter().zip(&reports) {
        println!(
            "{}: battery {} max abs dev {:.3e} max rel dev {:.3e} tol {:.1e} {}",
            x.label,
            r.battery_size,
            r.max_abs_dev,
            r.max_rel_dev,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(x.label.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Equivalence(format!("not equivalent: {}", failed.join(", "))))
    }
}
