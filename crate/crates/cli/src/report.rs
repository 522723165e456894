//! Read-only norm diagnostics per resolved pair.

use std::path::Path;

use wisca_core::checkpoint::layout::Block;
use wisca_core::tensor::{l1_norm, l2_norm};
use wisca_core::Matrix;

use crate::common::{load_checkpoint, load_layout, resolve};
use crate::error::Result;

pub const REPORT_HEADER: &str =
    "block,pair,left_l1,right_l1,left_l2,right_l2,l1_ratio,group_factor,implied_factor,group_implied_factor";

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub block: String,
    pub pair: &'static str,
    pub left_l1: f64,
    pub right_l1: f64,
    pub left_l2: f64,
    pub right_l2: f64,
    pub group_factor: usize,
}

impl PairRow {
    fn new(block: &str, pair: &'static str, left: &Matrix, right: &Matrix, group_factor: usize) -> Self {
        Self {
            block: block.to_string(),
            pair,
            left_l1: l1_norm(left).unwrap_or(0.0),
            right_l1: l1_norm(right).unwrap_or(0.0),
            left_l2: l2_norm(left).unwrap_or(0.0),
            right_l2: l2_norm(right).unwrap_or(0.0),
            group_factor,
        }
    }

    pub fn l1_ratio(&self) -> f64 {
        self.left_l1 / self.right_l1
    }

    /// Tensor-wise factor on the left side that equalizes the two L1 norms.
    pub fn implied_factor(&self) -> f64 {
        (self.right_l1 / self.left_l1).sqrt()
    }

    /// Factor reaching `|left| == g·|right|`.
    pub fn group_implied_factor(&self) -> f64 {
        (self.group_factor as f64 * self.right_l1 / self.left_l1).sqrt()
    }
}

pub fn pair_rows(blocks: &[wisca_core::checkpoint::layout::ResolvedBlock]) -> Vec<PairRow> {
    let mut rows = Vec::new();
    for b in blocks {
        match &b.block {
            Block::Attention { weights, layout } => {
                rows.push(PairRow::new(&b.label, "qk", &weights.w_q, &weights.w_k, layout.group_factor()));
                rows.push(PairRow::new(&b.label, "vo", &weights.w_v, &weights.w_o, 1));
            }
            Block::Lora(p) => rows.push(PairRow::new(&b.label, "lora", &p.a, &p.b, 1)),
        }
    }
    rows
}

pub fn render_csv(rows: &[PairRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e}\n",
            r.block,
            r.pair,
            r.left_l1,
            r.right_l1,
            r.left_l2,
            r.right_l2,
            r.l1_ratio(),
            r.group_factor,
            r.implied_factor(),
            r.group_implied_factor()
        ));
    }
    out
}

pub fn render_table(rows: &[PairRow]) -> String {
    let header: Vec<&str> = REPORT_HEADER.split(',').collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.block.clone(),
                r.pair.to_string(),
                format!("{:.4}", r.left_l1),
                format!("{:.4}", r.right_l1),
                format!("{:.4}", r.left_l2),
                format!("{:.4}", r.right_l2),
                format!("{:.4}", r.l1_ratio()),
                r.group_factor.to_string(),
                format!("{:.4}", r.implied_factor()),
                format!("{:.4}", r.group_implied_factor()),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.clone());
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn cmd_report(input: &Path, layout: &Path, csv: bool) -> Result<()> {
    let (cp, _) = load_checkpoint(input)?;
    let (ld, _) = load_layout(layout)?;
    let rows = pair_rows(&resolve(&cp, &ld)?);
    print!("{}", if csv { render_csv(&rows) } else { render_table(&rows) });
    Ok(())
}
