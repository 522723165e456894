//! `apply` and `replay`: rescale a checkpoint and record a replayable manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wisca_core::checkpoint::layout::{Block, ResolvedBlock};
use wisca_core::tensor::l1_norm;
use wisca_core::transform::{Balancer, Rescale, Role, ScalePlan, Strategy};
use wisca_core::verify::EquivalenceReport;

use crate::common::{
    block_seed, block_tolerance, load_checkpoint, load_layout, read_bytes, resolve, sha256_hex, strategy_name,
    verify_block, write_bytes,
};
use crate::error::{CliError, Result};

/// Inputs that fully determine an `apply` run's output.
#[derive(Debug, Clone)]
pub struct ApplyParams {
    pub input: PathBuf,
    pub layout: PathBuf,
    /// Empty means: take the descriptor's strategy table.
    pub strategies: Vec<Strategy>,
    pub verify: bool,
    pub tolerance: Option<f64>,
    pub battery: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub label: String,
    pub layer: usize,
    pub plans: Vec<ScalePlan>,
    pub l1_before: BTreeMap<String, f64>,
    pub l1_after: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub input: String,
    pub input_sha256: String,
    pub output: String,
    pub output_sha256: String,
    pub layout: String,
    pub layout_sha256: String,
    pub strategies: Vec<Strategy>,
    pub verify: bool,
    pub tolerance: Option<f64>,
    pub battery: usize,
    pub seed: u64,
    pub blocks: Vec<BlockSummary>,
}

/// Application order: qk before vo before lora, tensor before channel.
pub fn ordered(strategies: &[Strategy]) -> Vec<Strategy> {
    let rank = |s: &Strategy| match s {
        Strategy::QkTensor | Strategy::GqaTensor => 0,
        Strategy::QkChannel | Strategy::GqaChannel => 1,
        Strategy::VoTensor => 2,
        Strategy::VoChannel => 3,
        Strategy::Lora => 4,
        Strategy::LinearPair | Strategy::Composite => 5,
    };
    let mut out = strategies.to_vec();
    out.sort_by_key(rank);
    out.dedup();
    out
}

fn norms(block: &Block) -> BTreeMap<String, f64> {
    let pairs: Vec<(&str, &wisca_core::Matrix)> = match block {
        Block::Attention { weights: w, .. } => vec![("q", &w.w_q), ("k", &w.w_k), ("v", &w.w_v), ("o", &w.w_o)],
        Block::Lora(p) => vec![("a", &p.a), ("b", &p.b)],
    };
    pairs
        .into_iter()
        .map(|(k, m)| (k.to_string(), l1_norm(m).unwrap_or(0.0)))
        .collect()
}

fn applies_to(strategy: Strategy, block: &Block) -> bool {
    match block {
        Block::Attention { .. } => !matches!(
            strategy,
            Strategy::Lora | Strategy::LinearPair | Strategy::Composite
        ),
        Block::Lora(_) => strategy == Strategy::Lora,
    }
}

fn transform_block(block: &ResolvedBlock, strategies: &[Strategy]) -> Result<(Block, Vec<ScalePlan>)> {
    let balancer = Balancer::default();
    let fail = |e: wisca_core::transform::TransformError| CliError::Parse(format!("{}: {e}", block.label));
    let mut current = block.block.clone();
    let mut plans = Vec::new();
    for &s in strategies.iter().filter(|s| applies_to(**s, &block.block)) {
        current = match current {
            Block::Attention { weights, layout } => {
                let plan = balancer.attention_plan(&weights, &layout, s).map_err(fail)?;
                let weights = weights.apply_plan(&plan).map_err(fail)?;
                plans.push(plan);
                Block::Attention { weights, layout }
            }
            Block::Lora(pair) => {
                let (pair, plan) = balancer.lora_scale(&pair).map_err(fail)?;
                plans.push(plan);
                Block::Lora(pair)
            }
        };
    }
    Ok((current, plans))
}

/// Output of an apply run, not yet written anywhere.
pub struct ApplyResult {
    pub output: Vec<u8>,
    pub input_sha256: String,
    pub layout_sha256: String,
    pub strategies: Vec<Strategy>,
    pub blocks: Vec<BlockSummary>,
}

pub fn run_apply(p: &ApplyParams) -> Result<ApplyResult> {
    let (cp, input_bytes) = load_checkpoint(&p.input)?;
    let (ld, layout_bytes) = load_layout(&p.layout)?;
    let strategies = if p.strategies.is_empty() {
        ld.strategy.strategies()
    } else {
        ordered(&p.strategies)
    };
    if strategies.is_empty() {
        return Err(CliError::Parse(
            "no strategy selected: pass --strategy or set [strategy] in the descriptor".into(),
        ));
    }
    let blocks = resolve(&cp, &ld)?;
    let transformed: Vec<(Block, Vec<ScalePlan>)> = blocks
        .par_iter()
        .map(|b| transform_block(b, &strategies))
        .collect::<Result<_>>()?;

    let mut out = cp.clone();
    for (b, (updated, _)) in blocks.iter().zip(&transformed) {
        ld.write_back(&mut out, b, updated)?;
    }
    let output = out.to_bytes();

    // Verification reads the tensors back from the encoded output, so the
    // check covers rounding to the stored dtype.
    let reports: Vec<Option<EquivalenceReport>> = if p.verify {
        let reread = wisca_core::CheckpointFile::from_bytes(&output)?;
        let after = resolve(&reread, &ld)?;
        blocks
            .par_iter()
            .zip(after.par_iter())
            .enumerate()
            .map(|(i, (before, after))| {
                let tol = p.tolerance.unwrap_or_else(|| block_tolerance(&cp, before));
                verify_block(&before.label, &before.block, &after.block, p.battery, tol, block_seed(p.seed, i)).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; blocks.len()]
    };

    let mut summaries = Vec::with_capacity(blocks.len());
    let mut failures = Vec::new();
    for ((b, (updated, plans)), report) in blocks.iter().zip(transformed).zip(reports) {
        if let Some(r) = &report {
            if !r.passed {
                failures.push(format!(
                    "{}: max relative deviation {:.3e} exceeds {:.3e}",
                    b.label, r.max_rel_dev, r.tolerance
                ));
            }
        }
        summaries.push(BlockSummary {
            label: b.label.clone(),
            layer: b.layer,
            warnings: plans.iter().flat_map(|p| p.warnings.iter().cloned()).collect(),
            plans,
            l1_before: norms(&b.block),
            l1_after: norms(&updated),
            equivalence: report,
        });
    }
    if !failures.is_empty() {
        return Err(CliError::Equivalence(format!(
            "equivalence check failed; no output written\n{}",
            failures.join("\n")
        )));
    }
    Ok(ApplyResult {
        output,
        input_sha256: sha256_hex(&input_bytes),
        layout_sha256: sha256_hex(&layout_bytes),
        strategies,
        blocks: summaries,
    })
}

pub fn default_manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn cmd_apply(p: &ApplyParams, out: &Path, manifest_path: Option<&Path>) -> Result<()> {
    let result = run_apply(p)?;
    write_bytes(out, &result.output)?;
    let manifest = RunManifest {
        tool: "wisca".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        input: p.input.display().to_string(),
        input_sha256: result.input_sha256,
        output: out.display().to_string(),
        output_sha256: sha256_hex(&result.output),
        layout: p.layout.display().to_string(),
        layout_sha256: result.layout_sha256,
        strategies: result.strategies,
        verify: p.verify,
        tolerance: p.tolerance,
        battery: p.battery,
        seed: p.seed,
        blocks: result.blocks,
    };
    let manifest_path = manifest_path.map_or_else(|| default_manifest_path(out), Path::to_path_buf);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_bytes(&manifest_path, format!("{json}\n").as_bytes())?;

    for b in &manifest.blocks {
        let plans: Vec<String> = b.plans.iter().map(plan_brief).collect();
        let check = b
            .equivalence
            .as_ref()
            .map_or(String::from("unverified"), |r| format!("max rel dev {:.3e}", r.max_rel_dev));
        println!("{}: {} ({check})", b.label, plans.join(", "));
        for w in &b.warnings {
            eprintln!("warning: {}: {w}", b.label);
        }
    }
    println!("wrote {} and {}", out.display(), manifest_path.display());
    Ok(())
}

/// One-line description of a plan: the left-side factor for tensor plans,
/// the largest `|log α|` for channel plans.
fn plan_brief(p: &ScalePlan) -> String {
    let name = strategy_name(p.strategy);
    let left = [Role::Q, Role::V, Role::LoraA].into_iter().find_map(|r| p.scalar(r));
    match left {
        Some(a) => format!("{name} {a:.6}"),
        None => format!("{name} max|log a| {:.3e}", p.max_log_deviation()),
    }
}

/// Re-runs a manifest and checks the output hash matches.
pub fn cmd_replay(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = read_bytes(manifest_path)?;
    let m: RunManifest = serde_json::from_slice(&text)
        .map_err(|e| CliError::Parse(format!("{}: {e}", manifest_path.display())))?;
    let params = ApplyParams {
        input: PathBuf::from(&m.input),
        layout: PathBuf::from(&m.layout),
        strategies: m.strategies.clone(),
        verify: m.verify,
        tolerance: m.tolerance,
        battery: m.battery,
        seed: m.seed,
    };
    let current_input = sha256_hex(&read_bytes(&params.input)?);
    if current_input != m.input_sha256 {
        return Err(CliError::Parse(format!(
            "{} changed since the manifest was written (sha256 {current_input}, recorded {})",
            m.input, m.input_sha256
        )));
    }
    let current_layout = sha256_hex(&read_bytes(&params.layout)?);
    if current_layout != m.layout_sha256 {
        return Err(CliError::Parse(format!("{} changed since the manifest was written", m.layout)));
    }
    let result = run_apply(&params)?;
    let digest = sha256_hex(&result.output);
    let target = out.map_or_else(|| PathBuf::from(&m.output), Path::to_path_buf);
    if digest != m.output_sha256 {
        return Err(CliError::Equivalence(format!(
            "replay produced sha256 {digest}, manifest records {}",
            m.output_sha256
        )));
    }
    write_bytes(&target, &result.output)?;
    println!("replayed {} -> {} (sha256 {digest})", m.input, target.display());
    Ok(())
}
