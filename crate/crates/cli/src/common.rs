use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use wisca_core::attention::gqa_forward;
use wisca_core::checkpoint::layout::{resolve_layout, Block, LayoutDescriptor, QkvSource, ResolvedBlock, Sources};
use wisca_core::checkpoint::CheckpointFile;
use wisca_core::tensor::matmul;
use wisca_core::verify::{gaussian_battery, verify_equivalence, EquivalenceReport, VerifyError};

use crate::error::{CliError, Result};

/// Tokens per battery input.
pub const BATTERY_TOKENS: usize = 8;

/// Environment variable selecting the worker thread count.
pub const WORKERS_ENV: &str = "WISCA_WORKERS";

pub fn init_workers() {
    let Ok(value) = std::env::var(WORKERS_ENV) else { return };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => eprintln!("warning: ignoring {WORKERS_ENV}={value:?}; expected a positive integer"),
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path.display(), e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointFile, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let cp = CheckpointFile::from_bytes(&bytes).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    Ok((cp, bytes))
}

pub fn load_layout(path: &Path) -> Result<(LayoutDescriptor, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Parse(format!("{}: descriptor is not UTF-8", path.display())))?;
    let ld = LayoutDescriptor::from_toml_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    Ok((ld, bytes))
}

pub fn resolve(cp: &CheckpointFile, ld: &LayoutDescriptor) -> Result<Vec<ResolvedBlock>> {
    Ok(resolve_layout(cp, ld)?)
}

pub fn source_names(s: &Sources) -> Vec<&str> {
    match s {
        Sources::Lora { a, b } => vec![a, b],
        Sources::Attention { qkv, o, o_bias } => {
            let mut v: Vec<&str> = vec![o];
            v.extend(o_bias.as_deref());
            match qkv {
                QkvSource::Separate {
                    q,
                    k,
                    v: vv,
                    q_bias,
                    k_bias,
                    v_bias,
                } => {
                    v.extend([q.as_str(), k.as_str(), vv.as_str()]);
                    v.extend([q_bias, k_bias, v_bias].into_iter().filter_map(|b| b.as_deref()));
                }
                QkvSource::Fused { name, bias, .. } => {
                    v.push(name);
                    v.extend(bias.as_deref());
                }
            }
            v
        }
    }
}

/// Loosest default tolerance over the dtypes a block is stored in.
pub fn block_tolerance(cp: &CheckpointFile, block: &ResolvedBlock) -> f64 {
    source_names(&block.sources)
        .into_iter()
        .filter_map(|n| cp.entry(n).ok())
        .map(|e| e.dtype.default_tolerance())
        .fold(0.0, f64::max)
}

fn verify_failure(label: &str, e: VerifyError) -> CliError {
    match e {
        VerifyError::Structural { .. } | VerifyError::Forward { .. } => CliError::Structural(format!("{label}: {e}")),
        other => CliError::Parse(format!("{label}: {other}")),
    }
}

/// Runs the equivalence battery on two resolved versions of one block.
pub fn verify_block(label: &str, a: &Block, b: &Block, battery: usize, tol: f64, seed: u64) -> Result<EquivalenceReport> {
    match (a, b) {
        (
            Block::Attention {
                weights: wa,
                layout: la,
            },
            Block::Attention {
                weights: wb,
                layout: lb,
            },
        ) => {
            if la != lb {
                return Err(CliError::Structural(format!("{label}: layouts differ: {la:?} vs {lb:?}")));
            }
            let inputs = gaussian_battery(battery, BATTERY_TOKENS, la.d_model, seed);
            verify_equivalence(|x| gqa_forward(x, wa, la), |x| gqa_forward(x, wb, lb), &inputs, tol)
                .map_err(|e| verify_failure(label, e))
        }
        (Block::Lora(pa), Block::Lora(pb)) => {
            if pa.a.shape() != pb.a.shape() || pa.b.shape() != pb.b.shape() {
                return Err(CliError::Structural(format!(
                    "{label}: adapter shapes differ: {:?}/{:?} vs {:?}/{:?}",
                    pa.a.shape(),
                    pa.b.shape(),
                    pb.a.shape(),
                    pb.b.shape()
                )));
            }
            let inputs = gaussian_battery(battery, BATTERY_TOKENS, pa.a.rows(), seed);
            let run = |p: &wisca_core::LoraPair, x: &wisca_core::Matrix| matmul(&matmul(x, &p.a)?, &p.b);
            verify_equivalence(|x| run(pa, x), |x| run(pb, x), &inputs, tol).map_err(|e| verify_failure(label, e))
        }
        _ => Err(CliError::Structural(format!("{label}: block kinds differ"))),
    }
}

/// Battery seed for the `index`-th block of a run.
pub fn block_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn strategy_name(s: wisca_core::Strategy) -> String {
    match serde_json::to_value(s) {
        Ok(serde_json::Value::String(name)) => name,
        _ => format!("{s:?}"),
    }
}
