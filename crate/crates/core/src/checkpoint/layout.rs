//! Binding checkpoint tensor names to attention and LoRA roles.
//!
//! Descriptors are TOML. Name patterns may contain `{layer}` (matches a
//! decimal layer index) and, for LoRA pairs, `{module}` (matches one
//! dot-free name segment). Example:
//!
//! ```toml
//! preset = "llama"        # optional: llama, qwen, lora
//! n_q_heads = 8
//! n_kv_heads = 2
//! head_dim = 64
//! storage = "out_in"      # stored as [out, in] (PyTorch) or "in_out"
//!
//! [attention]
//! q = "model.layers.{layer}.self_attn.q_proj.weight"
//! # or: fused_qkv = "...qkv.weight", fused_offsets = [0, 512, 640]
//!
//! [[lora]]
//! a = "layers.{layer}.{module}.lora_A.weight"
//! b = "layers.{layer}.{module}.lora_B.weight"
//!
//! [strategy]
//! qk = "tensor"           # none, tensor, channel
//! vo = "channel"
//! lora = "tensor"         # none, tensor
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CheckpointError, CheckpointFile};
use crate::attention::{AttentionLayout, AttentionWeights, LoraPair, ModelError};
use crate::tensor::Matrix;
use crate::transform::Strategy;

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("descriptor parse error: {0}")]
    Parse(String),
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("unmatched patterns: {}", .0.join(", "))]
    Unmatched(Vec<String>),
    #[error("{block}: geometry mismatch: {}", .details.join("; "))]
    Geometry { block: String, details: Vec<String> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error reading descriptor: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LayoutError>;

/// How 2-D tensors are stored relative to the `x·W` compute convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    /// `[in, out]`, used as-is.
    InOut,
    /// `[out, in]`, transposed on load and store.
    OutIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    None,
    Tensor,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyTable {
    #[serde(default)]
    pub qk: Granularity,
    #[serde(default)]
    pub vo: Granularity,
    #[serde(default)]
    pub lora: Granularity,
}

impl StrategyTable {
    /// Strategies in application order: qk, then vo, then lora.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = Vec::new();
        match self.qk {
            Granularity::Tensor => out.push(Strategy::QkTensor),
            Granularity::Channel => out.push(Strategy::QkChannel),
            Granularity::None => {}
        }
        match self.vo {
            Granularity::Tensor => out.push(Strategy::VoTensor),
            Granularity::Channel => out.push(Strategy::VoChannel),
            Granularity::None => {}
        }
        if self.lora != Granularity::None {
            out.push(Strategy::Lora);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionPatterns {
    pub q: Option<String>,
    pub k: Option<String>,
    pub v: Option<String>,
    pub o: Option<String>,
    pub q_bias: Option<String>,
    pub k_bias: Option<String>,
    pub v_bias: Option<String>,
    pub o_bias: Option<String>,
    pub fused_qkv: Option<String>,
    pub fused_qkv_bias: Option<String>,
    /// Output-feature offsets of the q, k and v blocks inside the fused tensor.
    pub fused_offsets: Option<[usize; 3]>,
}

impl AttentionPatterns {
    fn merged_over(self, base: AttentionPatterns) -> AttentionPatterns {
        AttentionPatterns {
            q: self.q.or(base.q),
            k: self.k.or(base.k),
            v: self.v.or(base.v),
            o: self.o.or(base.o),
            q_bias: self.q_bias.or(base.q_bias),
            k_bias: self.k_bias.or(base.k_bias),
            v_bias: self.v_bias.or(base.v_bias),
            o_bias: self.o_bias.or(base.o_bias),
            fused_qkv: self.fused_qkv.or(base.fused_qkv),
            fused_qkv_bias: self.fused_qkv_bias.or(base.fused_qkv_bias),
            fused_offsets: self.fused_offsets.or(base.fused_offsets),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.o.is_none() {
            return Err(LayoutError::Invalid("attention.o is required".into()));
        }
        let separate = [&self.q, &self.k, &self.v].iter().filter(|p| p.is_some()).count();
        match (&self.fused_qkv, separate) {
            (Some(_), 0) => {
                if self.q_bias.is_some() || self.k_bias.is_some() || self.v_bias.is_some() {
                    return Err(LayoutError::Invalid(
                        "separate q/k/v biases cannot accompany fused_qkv; use fused_qkv_bias".into(),
                    ));
                }
                Ok(())
            }
            (None, 3) => {
                if self.fused_qkv_bias.is_some() || self.fused_offsets.is_some() {
                    return Err(LayoutError::Invalid("fused_qkv_bias/fused_offsets need fused_qkv".into()));
                }
                Ok(())
            }
            (Some(_), _) => Err(LayoutError::Invalid("give either fused_qkv or q/k/v, not both".into())),
            (None, _) => Err(LayoutError::Invalid("attention needs all of q, k, v or fused_qkv".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraPatterns {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub geometry: Option<HeadGeometry>,
    pub storage: Storage,
    pub causal: bool,
    pub attention: Option<AttentionPatterns>,
    pub lora: Vec<LoraPatterns>,
    pub strategy: StrategyTable,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorFile {
    preset: Option<String>,
    n_q_heads: Option<usize>,
    n_kv_heads: Option<usize>,
    head_dim: Option<usize>,
    d_model: Option<usize>,
    storage: Option<Storage>,
    causal: Option<bool>,
    attention: Option<AttentionPatterns>,
    lora: Option<Vec<LoraPatterns>>,
    strategy: Option<StrategyTable>,
}

fn named_attention(prefix: &str, bias: bool) -> AttentionPatterns {
    let p = |role: &str, kind: &str| Some(format!("{prefix}.{role}_proj.{kind}"));
    AttentionPatterns {
        q: p("q", "weight"),
        k: p("k", "weight"),
        v: p("v", "weight"),
        o: p("o", "weight"),
        q_bias: if bias { p("q", "bias") } else { None },
        k_bias: if bias { p("k", "bias") } else { None },
        v_bias: if bias { p("v", "bias") } else { None },
        ..Default::default()
    }
}

/// Names of the built-in presets.
pub const PRESETS: [&str; 3] = ["llama", "qwen", "lora"];

fn preset_base(name: &str) -> Result<LayoutDescriptor> {
    let attn_prefix = "model.layers.{layer}.self_attn";
    let tensor = StrategyTable {
        qk: Granularity::Tensor,
        vo: Granularity::Tensor,
        lora: Granularity::None,
    };
    let base = |attention, lora, strategy| LayoutDescriptor {
        geometry: None,
        storage: Storage::OutIn,
        causal: true,
        attention,
        lora,
        strategy,
    };
    match name {
        "llama" => Ok(base(Some(named_attention(attn_prefix, false)), vec![], tensor)),
        "qwen" => Ok(base(Some(named_attention(attn_prefix, true)), vec![], tensor)),
        // PEFT adapters store lora_A as [r, in] and lora_B as [out, r].
        "lora" => Ok(base(
            None,
            vec![LoraPatterns {
                a: "base_model.model.model.layers.{layer}.self_attn.{module}.lora_A.weight".into(),
                b: "base_model.model.model.layers.{layer}.self_attn.{module}.lora_B.weight".into(),
            }],
            StrategyTable {
                lora: Granularity::Tensor,
                ..Default::default()
            },
        )),
        other => Err(LayoutError::Invalid(format!(
            "unknown preset '{other}' (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

impl LayoutDescriptor {
    /// A built-in preset with the given head geometry.
    pub fn preset(name: &str, geometry: Option<HeadGeometry>) -> Result<Self> {
        let mut d = preset_base(name)?;
        d.geometry = geometry;
        d.validate()?;
        Ok(d)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: DescriptorFile = toml::from_str(text).map_err(|e| LayoutError::Parse(e.to_string()))?;
        let base = match &raw.preset {
            Some(p) => Some(preset_base(p)?),
            None => None,
        };
        let geometry = match (raw.n_q_heads, raw.n_kv_heads, raw.head_dim) {
            (Some(n_q_heads), Some(n_kv_heads), Some(head_dim)) => Some(HeadGeometry {
                n_q_heads,
                n_kv_heads,
                head_dim,
                d_model: raw.d_model,
            }),
            (None, None, None) => None,
            _ => {
                return Err(LayoutError::Invalid(
                    "n_q_heads, n_kv_heads and head_dim must be given together".into(),
                ))
            }
        };
        let storage = raw
            .storage
            .or(base.as_ref().map(|b| b.storage))
            .ok_or_else(|| LayoutError::Invalid("storage must be declared (in_out or out_in)".into()))?;
        let attention = match (raw.attention, base.as_ref().and_then(|b| b.attention.clone())) {
            (Some(a), Some(b)) => Some(a.merged_over(b)),
            (a, b) => a.or(b),
        };
        let d = LayoutDescriptor {
            geometry,
            storage,
            causal: raw.causal.or(base.as_ref().map(|b| b.causal)).unwrap_or(false),
            attention,
            lora: raw
                .lora
                .or(base.as_ref().map(|b| b.lora.clone()))
                .unwrap_or_default(),
            strategy: raw.strategy.or(base.as_ref().map(|b| b.strategy)).unwrap_or_default(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.attention {
            a.validate()?;
            let g = self
                .geometry
                .ok_or_else(|| LayoutError::Invalid("attention patterns need n_q_heads, n_kv_heads, head_dim".into()))?;
            if g.n_q_heads == 0 || g.n_kv_heads == 0 || g.head_dim == 0 || g.n_q_heads % g.n_kv_heads != 0 {
                return Err(LayoutError::Invalid(format!(
                    "head geometry {}q/{}kv/{}d is invalid; n_q_heads must be a positive multiple of n_kv_heads",
                    g.n_q_heads, g.n_kv_heads, g.head_dim
                )));
            }
        }
        if self.strategy.lora == Granularity::Channel {
            return Err(LayoutError::Invalid("lora supports only tensor granularity".into()));
        }
        if self.attention.is_none() && self.lora.is_empty() {
            return Err(LayoutError::Invalid("descriptor binds no tensors".into()));
        }
        for p in &self.lora {
            let (a, b) = (Template::new(&p.a)?, Template::new(&p.b)?);
            if a.has_module != b.has_module || a.has_layer != b.has_layer {
                return Err(LayoutError::Invalid(format!(
                    "lora patterns '{}' and '{}' use different placeholders",
                    p.a, p.b
                )));
            }
        }
        Ok(())
    }
}

/// A name pattern compiled to an anchored regex.
struct Template {
    source: String,
    regex: Regex,
    has_layer: bool,
    has_module: bool,
}

impl Template {
    fn new(source: &str) -> Result<Self> {
        let escaped = regex::escape(source)
            .replace(r"\{layer\}", r"(?P<layer>\d+)")
            .replace(r"\{module\}", r"(?P<module>[^.]+)");
        let regex = Regex::new(&format!("^{escaped}$")).map_err(|e| LayoutError::Invalid(e.to_string()))?;
        Ok(Self {
            source: source.to_string(),
            regex,
            has_layer: source.contains("{layer}"),
            has_module: source.contains("{module}"),
        })
    }

    /// `(layer, module)` keys of every matching tensor name.
    fn matches<'a>(&self, names: impl Iterator<Item = &'a str>) -> BTreeSet<(usize, String)> {
        names
            .filter_map(|n| {
                let caps = self.regex.captures(n)?;
                let layer = match caps.name("layer") {
                    Some(m) => m.as_str().parse().ok()?,
                    None => 0,
                };
                let module = caps.name("module").map_or(String::new(), |m| m.as_str().to_string());
                Some((layer, module))
            })
            .collect()
    }

    fn render(&self, layer: usize, module: &str) -> String {
        self.source
            .replace("{layer}", &layer.to_string())
            .replace("{module}", module)
    }
}

fn render(pattern: &str, layer: usize) -> String {
    pattern.replace("{layer}", &layer.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QkvSource {
    Separate {
        q: String,
        k: String,
        v: String,
        q_bias: Option<String>,
        k_bias: Option<String>,
        v_bias: Option<String>,
    },
    Fused {
        name: String,
        bias: Option<String>,
        offsets: [usize; 3],
    },
}

/// Tensor names a resolved block was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sources {
    Attention {
        qkv: QkvSource,
        o: String,
        o_bias: Option<String>,
    },
    Lora {
        a: String,
        b: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Attention {
        weights: AttentionWeights,
        layout: AttentionLayout,
    },
    Lora(LoraPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBlock {
    pub layer: usize,
    /// `"layer 3"` or `"layer 3 q_proj"` style label, unique per block.
    pub label: String,
    pub block: Block,
    pub sources: Sources,
}

fn oriented(cp: &CheckpointFile, name: &str, storage: Storage) -> Result<Matrix> {
    let m = cp.matrix(name)?;
    let rank = cp.entry(name)?.shape.len();
    Ok(if rank == 2 && storage == Storage::OutIn {
        m.transpose()
    } else {
        m
    })
}

fn store(cp: &mut CheckpointFile, name: &str, m: &Matrix, storage: Storage) -> Result<()> {
    let rank = cp.entry(name)?.shape.len();
    let stored = if rank == 2 && storage == Storage::OutIn {
        m.transpose()
    } else {
        m.clone()
    };
    cp.set_matrix(name, &stored)?;
    Ok(())
}

/// Splits `m` into column blocks `[offset, offset + width)`.
pub fn split_fused(m: &Matrix, offsets: [usize; 3], widths: [usize; 3]) -> Result<[Matrix; 3]> {
    let mut spans: Vec<(usize, usize)> = offsets.iter().copied().zip(widths).collect();
    spans.sort_unstable();
    let mut cursor = 0;
    for (start, width) in spans {
        if start != cursor {
            return Err(LayoutError::Invalid(format!(
                "fused offsets {offsets:?} with widths {widths:?} leave a gap or overlap at column {cursor}"
            )));
        }
        cursor = start + width;
    }
    if cursor != m.cols() {
        return Err(LayoutError::Invalid(format!(
            "fused blocks cover {cursor} columns but the tensor has {}",
            m.cols()
        )));
    }
    let block = |i: usize| m.column_block(offsets[i], widths[i]).map_err(ModelError::from);
    Ok([block(0)?, block(1)?, block(2)?])
}

/// Inverse of [`split_fused`].
pub fn merge_fused(blocks: [&Matrix; 3], offsets: [usize; 3]) -> Result<Matrix> {
    let rows = blocks[0].rows();
    let total: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, total);
    for (b, &off) in blocks.iter().zip(&offsets) {
        if b.rows() != rows || off + b.cols() > total {
            return Err(LayoutError::Invalid("fused blocks do not fit together".into()));
        }
        for r in 0..rows {
            for c in 0..b.cols() {
                out.set(r, off + c, b.get(r, c));
            }
        }
    }
    Ok(out)
}

fn shape_note(role: &str, expected: (usize, usize), found: (usize, usize)) -> Option<String> {
    (expected != found).then(|| {
        format!(
            "{role}: expected {}x{}, found {}x{}",
            expected.0, expected.1, found.0, found.1
        )
    })
}

impl LayoutDescriptor {
    fn resolve_attention(&self, cp: &CheckpointFile, pats: &AttentionPatterns) -> Result<Vec<ResolvedBlock>> {
        let geo = self.geometry.expect("validated");
        let q_width = geo.n_q_heads * geo.head_dim;
        let kv_width = geo.n_kv_heads * geo.head_dim;
        let anchor_src = pats.fused_qkv.as_ref().or(pats.q.as_ref()).expect("validated");
        let anchor = Template::new(anchor_src)?;
        let layers: Vec<usize> = anchor.matches(cp.names()).into_iter().map(|(l, _)| l).collect();
        if layers.is_empty() {
            return Err(LayoutError::Unmatched(vec![anchor_src.clone()]));
        }
        let optional = [
            &pats.q, &pats.k, &pats.v, &pats.o, &pats.q_bias, &pats.k_bias, &pats.v_bias, &pats.o_bias,
            &pats.fused_qkv, &pats.fused_qkv_bias,
        ];
        let mut unmatched = BTreeSet::new();
        for &layer in &layers {
            for p in optional.iter().filter_map(|p| p.as_ref()) {
                let name = render(p, layer);
                if !cp.contains(&name) {
                    unmatched.insert(format!("{p} (layer {layer}: '{name}')"));
                }
            }
        }
        if !unmatched.is_empty() {
            return Err(LayoutError::Unmatched(unmatched.into_iter().collect()));
        }

        let mut out = Vec::new();
        for layer in layers {
            let label = format!("layer {layer}");
            let get = |p: &Option<String>| -> Result<Option<(String, Matrix)>> {
                match p {
                    Some(p) => {
                        let name = render(p, layer);
                        let m = oriented(cp, &name, self.storage)?;
                        Ok(Some((name, m)))
                    }
                    None => Ok(None),
                }
            };
            let (o_name, w_o) = get(&pats.o)?.expect("validated");
            let o_bias = get(&pats.o_bias)?;
            let d_model = geo.d_model.unwrap_or(w_o.cols());
            let mut notes = Vec::new();

            let (qkv, w_q, w_k, w_v, b_q, b_k, b_v) = if let Some(fused) = &pats.fused_qkv {
                let name = render(fused, layer);
                let m = oriented(cp, &name, self.storage)?;
                let offsets = pats.fused_offsets.unwrap_or([0, q_width, q_width + kv_width]);
                let widths = [q_width, kv_width, kv_width];
                if m.cols() != q_width + 2 * kv_width || m.rows() != d_model {
                    return Err(LayoutError::Geometry {
                        block: label,
                        details: vec![format!(
                            "fused_qkv: expected {}x{}, found {}x{}",
                            d_model,
                            q_width + 2 * kv_width,
                            m.rows(),
                            m.cols()
                        )],
                    });
                }
                let [q, k, v] = split_fused(&m, offsets, widths)?;
                let bias = get(&pats.fused_qkv_bias)?;
                let (bq, bk, bv) = match &bias {
                    Some((_, b)) => {
                        if b.shape() != (1, q_width + 2 * kv_width) {
                            return Err(LayoutError::Geometry {
                                block: label,
                                details: vec![format!(
                                    "fused_qkv_bias: expected {} elements, found {}",
                                    q_width + 2 * kv_width,
                                    b.cols()
                                )],
                            });
                        }
                        let [bq, bk, bv] = split_fused(b, offsets, widths)?;
                        (Some(bq), Some(bk), Some(bv))
                    }
                    None => (None, None, None),
                };
                let source = QkvSource::Fused {
                    name,
                    bias: bias.map(|(n, _)| n),
                    offsets,
                };
                (source, q, k, v, bq, bk, bv)
            } else {
                let (qn, q) = get(&pats.q)?.expect("validated");
                let (kn, k) = get(&pats.k)?.expect("validated");
                let (vn, v) = get(&pats.v)?.expect("validated");
                let (bq, bk, bv) = (get(&pats.q_bias)?, get(&pats.k_bias)?, get(&pats.v_bias)?);
                let source = QkvSource::Separate {
                    q: qn,
                    k: kn,
                    v: vn,
                    q_bias: bq.as_ref().map(|(n, _)| n.clone()),
                    k_bias: bk.as_ref().map(|(n, _)| n.clone()),
                    v_bias: bv.as_ref().map(|(n, _)| n.clone()),
                };
                (source, q, k, v, bq.map(|b| b.1), bk.map(|b| b.1), bv.map(|b| b.1))
            };

            notes.extend(shape_note("q", (d_model, q_width), w_q.shape()));
            notes.extend(shape_note("k", (d_model, kv_width), w_k.shape()));
            notes.extend(shape_note("v", (d_model, kv_width), w_v.shape()));
            notes.extend(shape_note("o", (q_width, d_model), w_o.shape()));
            let bias_checks = [
                ("q_bias", &b_q, q_width),
                ("k_bias", &b_k, kv_width),
                ("v_bias", &b_v, kv_width),
                ("o_bias", &o_bias.as_ref().map(|b| b.1.clone()), d_model),
            ];
            for (role, b, width) in bias_checks {
                if let Some(b) = b {
                    notes.extend(shape_note(role, (1, width), b.shape()));
                }
            }
            if !notes.is_empty() {
                return Err(LayoutError::Geometry { block: label, details: notes });
            }

            let has_bias = b_q.is_some() || b_k.is_some() || b_v.is_some() || o_bias.is_some();
            let layout = AttentionLayout::new(d_model, geo.n_q_heads, geo.n_kv_heads, geo.head_dim)?
                .with_bias(has_bias)
                .with_causal(self.causal);
            let weights = AttentionWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                b_q,
                b_k,
                b_v,
                b_o: o_bias.as_ref().map(|b| b.1.clone()),
            };
            weights.check(&layout)?;
            out.push(ResolvedBlock {
                layer,
                label,
                block: Block::Attention { weights, layout },
                sources: Sources::Attention {
                    qkv,
                    o: o_name,
                    o_bias: o_bias.map(|b| b.0),
                },
            });
        }
        Ok(out)
    }

    fn resolve_lora(&self, cp: &CheckpointFile, pats: &LoraPatterns) -> Result<Vec<ResolvedBlock>> {
        let a_tpl = Template::new(&pats.a)?;
        let b_tpl = Template::new(&pats.b)?;
        let keys = a_tpl.matches(cp.names());
        if keys.is_empty() {
            return Err(LayoutError::Unmatched(vec![pats.a.clone()]));
        }
        let mut missing = Vec::new();
        for (layer, module) in &keys {
            let name = b_tpl.render(*layer, module);
            if !cp.contains(&name) {
                missing.push(format!("{} ('{name}')", pats.b));
            }
        }
        if !missing.is_empty() {
            return Err(LayoutError::Unmatched(missing));
        }
        let mut out = Vec::new();
        for (layer, module) in keys {
            let a_name = a_tpl.render(layer, &module);
            let b_name = b_tpl.render(layer, &module);
            let a = oriented(cp, &a_name, self.storage)?;
            let b = oriented(cp, &b_name, self.storage)?;
            let label = if module.is_empty() {
                format!("layer {layer} lora")
            } else {
                format!("layer {layer} {module}")
            };
            if a.cols() != b.rows() {
                return Err(LayoutError::Geometry {
                    block: label,
                    details: vec![format!(
                        "lora rank: a gives {}x{}, b gives {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )],
                });
            }
            out.push(ResolvedBlock {
                layer,
                label,
                block: Block::Lora(LoraPair::new(a, b)?),
                sources: Sources::Lora { a: a_name, b: b_name },
            });
        }
        Ok(out)
    }

    /// Writes a block's (possibly rescaled) tensors back to their sources.
    /// Tensors whose values did not change keep their original bytes.
    pub fn write_back(&self, cp: &mut CheckpointFile, resolved: &ResolvedBlock, updated: &Block) -> Result<()> {
        let mut put = |name: &str, old: &Matrix, new: &Matrix| -> Result<()> {
            if old != new {
                store(cp, name, new, self.storage)?;
            }
            Ok(())
        };
        match (&resolved.sources, &resolved.block, updated) {
            (Sources::Lora { a, b }, Block::Lora(old), Block::Lora(new)) => {
                put(a, &old.a, &new.a)?;
                put(b, &old.b, &new.b)?;
            }
            (
                Sources::Attention { qkv, o, o_bias },
                Block::Attention { weights: old, .. },
                Block::Attention { weights: new, .. },
            ) => {
                put(o, &old.w_o, &new.w_o)?;
                if let (Some(n), Some(ob), Some(nb)) = (o_bias, &old.b_o, &new.b_o) {
                    put(n, ob, nb)?;
                }
                match qkv {
                    QkvSource::Separate {
                        q,
                        k,
                        v,
                        q_bias,
                        k_bias,
                        v_bias,
                    } => {
                        put(q, &old.w_q, &new.w_q)?;
                        put(k, &old.w_k, &new.w_k)?;
                        put(v, &old.w_v, &new.w_v)?;
                        let biases = [
                            (q_bias, &old.b_q, &new.b_q),
                            (k_bias, &old.b_k, &new.b_k),
                            (v_bias, &old.b_v, &new.b_v),
                        ];
                        for (name, ob, nb) in biases {
                            if let (Some(n), Some(ob), Some(nb)) = (name, ob, nb) {
                                put(n, ob, nb)?;
                            }
                        }
                    }
                    QkvSource::Fused { name, bias, offsets } => {
                        let old_m = merge_fused([&old.w_q, &old.w_k, &old.w_v], *offsets)?;
                        let new_m = merge_fused([&new.w_q, &new.w_k, &new.w_v], *offsets)?;
                        put(name, &old_m, &new_m)?;
                        if let Some(bn) = bias {
                            let pick = |w: &AttentionWeights| -> Option<Result<Matrix>> {
                                Some(merge_fused([w.b_q.as_ref()?, w.b_k.as_ref()?, w.b_v.as_ref()?], *offsets))
                            };
                            if let (Some(ob), Some(nb)) = (pick(old), pick(new)) {
                                put(bn, &ob?, &nb?)?;
                            }
                        }
                    }
                }
            }
            _ => {
                return Err(LayoutError::Invalid(format!(
                    "{}: updated block kind does not match the resolved block",
                    resolved.label
                )))
            }
        }
        Ok(())
    }
}

/// Resolves every attention block and LoRA pair the descriptor binds,
/// ordered by layer then label.
pub fn resolve_layout(cp: &CheckpointFile, ld: &LayoutDescriptor) -> Result<Vec<ResolvedBlock>> {
    ld.validate()?;
    let mut blocks = Vec::new();
    if let Some(a) = &ld.attention {
        blocks.extend(ld.resolve_attention(cp, a)?);
    }
    for p in &ld.lora {
        blocks.extend(ld.resolve_lora(cp, p)?);
    }
    let mut seen = BTreeMap::new();
    for b in &blocks {
        if seen.insert(b.label.clone(), ()).is_some() {
            return Err(LayoutError::Invalid(format!("two patterns resolve to block '{}'", b.label)));
        }
    }
    blocks.sort_by(|x, y| (x.layer, &x.label).cmp(&(y.layer, &y.label)));
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;
    use crate::rng::Rng;
    use crate::tensor::gaussian_fill;

    fn push(cp: &mut CheckpointFile, name: &str, dtype: DType, shape: &[usize], rng: &mut Rng) {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.normal(0.2)).collect();
        cp.insert(name, dtype, shape, &v).unwrap();
    }

    /// Llama-style: out_in storage, q [nq·hd, d], k/v [nkv·hd, d], o [d, nq·hd].
    fn llama_checkpoint(layers: usize, nq: usize, nkv: usize, hd: usize, d: usize, bias: bool) -> CheckpointFile {
        let mut rng = Rng::new(11);
        let mut cp = CheckpointFile::new();
        for l in 0..layers {
            let p = format!("model.layers.{l}.self_attn");
            push(&mut cp, &format!("{p}.q_proj.weight"), DType::F32, &[nq * hd, d], &mut rng);
            push(&mut cp, &format!("{p}.k_proj.weight"), DType::F32, &[nkv * hd, d], &mut rng);
            push(&mut cp, &format!("{p}.v_proj.weight"), DType::F32, &[nkv * hd, d], &mut rng);
            push(&mut cp, &format!("{p}.o_proj.weight"), DType::F32, &[d, nq * hd], &mut rng);
            if bias {
                push(&mut cp, &format!("{p}.q_proj.bias"), DType::F32, &[nq * hd], &mut rng);
                push(&mut cp, &format!("{p}.k_proj.bias"), DType::F32, &[nkv * hd], &mut rng);
                push(&mut cp, &format!("{p}.v_proj.bias"), DType::F32, &[nkv * hd], &mut rng);
            }
            push(&mut cp, &format!("model.layers.{l}.mlp.up_proj.weight"), DType::BF16, &[8, d], &mut rng);
        }
        cp
    }

    fn geometry(nq: usize, nkv: usize, hd: usize) -> Option<HeadGeometry> {
        Some(HeadGeometry {
            n_q_heads: nq,
            n_kv_heads: nkv,
            head_dim: hd,
            d_model: None,
        })
    }

    #[test]
    fn mha_layers_resolve_one_block_each() {
        let cp = llama_checkpoint(3, 4, 4, 2, 8, false);
        let ld = LayoutDescriptor::preset("llama", geometry(4, 4, 2)).unwrap();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks.iter().map(|b| b.layer).collect::<Vec<_>>(), vec![0, 1, 2]);
        match &blocks[1].block {
            Block::Attention { weights, layout } => {
                assert_eq!(layout.group_factor(), 1);
                assert_eq!(weights.w_q.shape(), (8, 8));
                let stored = cp.matrix("model.layers.1.self_attn.q_proj.weight").unwrap();
                assert_eq!(weights.w_q, stored.transpose());
            }
            Block::Lora(_) => panic!("expected attention"),
        }
    }

    #[test]
    fn gqa_geometry_gives_group_factor_four() {
        let cp = llama_checkpoint(1, 8, 2, 4, 16, false);
        let ld = LayoutDescriptor::preset("llama", geometry(8, 2, 4)).unwrap();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        match &blocks[0].block {
            Block::Attention { weights, layout } => {
                assert_eq!(layout.group_factor(), 4);
                assert_eq!(weights.w_k.cols(), 2 * 4);
                assert_eq!(layout.d_model, 16);
            }
            Block::Lora(_) => panic!(),
        }
    }

    #[test]
    fn qwen_biases_resolve() {
        let cp = llama_checkpoint(2, 4, 2, 2, 8, true);
        let ld = LayoutDescriptor::preset("qwen", geometry(4, 2, 2)).unwrap();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        match &blocks[0].block {
            Block::Attention { weights, layout } => {
                assert!(layout.has_bias);
                assert_eq!(weights.b_k.as_ref().unwrap().shape(), (1, 4));
                assert!(weights.b_o.is_none());
            }
            Block::Lora(_) => panic!(),
        }
    }

    #[test]
    fn unmatched_patterns_are_listed() {
        let cp = llama_checkpoint(2, 4, 2, 2, 8, false);
        let ld = LayoutDescriptor::preset("qwen", geometry(4, 2, 2)).unwrap();
        match resolve_layout(&cp, &ld) {
            Err(LayoutError::Unmatched(list)) => {
                assert_eq!(list.len(), 6, "{list:?}");
                assert!(list.iter().any(|s| s.contains("q_proj.bias") && s.contains("layer 1")));
            }
            other => panic!("{other:?}"),
        }
        let empty = CheckpointFile::new();
        assert!(matches!(resolve_layout(&empty, &ld), Err(LayoutError::Unmatched(_))));
    }

    #[test]
    fn geometry_mismatch_lists_expectations() {
        let cp = llama_checkpoint(1, 4, 2, 2, 8, false);
        let ld = LayoutDescriptor::preset("llama", geometry(4, 4, 2)).unwrap();
        match resolve_layout(&cp, &ld) {
            Err(LayoutError::Geometry { block, details }) => {
                assert_eq!(block, "layer 0");
                assert!(details.iter().any(|d| d == "k: expected 8x8, found 8x4"), "{details:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    fn fused_checkpoint() -> (CheckpointFile, LayoutDescriptor) {
        let (nq, nkv, hd, d) = (4, 2, 3, 12);
        let mut rng = Rng::new(5);
        let mut cp = CheckpointFile::new();
        let width = (nq + 2 * nkv) * hd;
        push(&mut cp, "blk.0.attn.qkv.weight", DType::F16, &[d, width], &mut rng);
        push(&mut cp, "blk.0.attn.qkv.bias", DType::F16, &[width], &mut rng);
        push(&mut cp, "blk.0.attn.out.weight", DType::F16, &[nq * hd, d], &mut rng);
        let toml = r#"
            n_q_heads = 4
            n_kv_heads = 2
            head_dim = 3
            storage = "in_out"
            [attention]
            fused_qkv = "blk.{layer}.attn.qkv.weight"
            fused_qkv_bias = "blk.{layer}.attn.qkv.bias"
            fused_offsets = [0, 12, 18]
            o = "blk.{layer}.attn.out.weight"
            [strategy]
            qk = "channel"
            vo = "tensor"
        "#;
        (cp, LayoutDescriptor::from_toml_str(toml).unwrap())
    }

    #[test]
    fn fused_split_merge_is_identity() {
        let (cp, ld) = fused_checkpoint();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        let Block::Attention { weights, .. } = &blocks[0].block else { panic!() };
        let stored = cp.matrix("blk.0.attn.qkv.weight").unwrap();
        assert_eq!(weights.w_q, stored.column_block(0, 12).unwrap());
        assert_eq!(weights.w_v, stored.column_block(18, 6).unwrap());
        let merged = merge_fused([&weights.w_q, &weights.w_k, &weights.w_v], [0, 12, 18]).unwrap();
        assert_eq!(merged, stored);

        // Rewriting the merged block leaves the file byte-identical.
        let before = cp.to_bytes();
        let mut cp2 = cp.clone();
        cp2.set_matrix("blk.0.attn.qkv.weight", &merged).unwrap();
        assert_eq!(cp2.to_bytes(), before);
        assert_eq!(ld.strategy.strategies(), vec![Strategy::QkChannel, Strategy::VoTensor]);
    }

    #[test]
    fn fused_permuted_offsets() {
        let m = Matrix::from_vec(1, 6, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // v first, then q, then k.
        let [q, k, v] = split_fused(&m, [2, 4, 0], [2, 2, 2]).unwrap();
        assert_eq!(v.data(), &[1.0, 2.0]);
        assert_eq!(q.data(), &[3.0, 4.0]);
        assert_eq!(k.data(), &[5.0, 6.0]);
        assert_eq!(merge_fused([&q, &k, &v], [2, 4, 0]).unwrap(), m);
        assert!(split_fused(&m, [0, 1, 4], [2, 2, 2]).is_err());
    }

    #[test]
    fn write_back_moves_only_changed_tensors() {
        let (cp, ld) = fused_checkpoint();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        let Block::Attention { weights, layout } = &blocks[0].block else { panic!() };
        let mut scaled = weights.clone();
        scaled.w_o = scaled.w_o.scale(2.0);
        let mut out = cp.clone();
        ld.write_back(
            &mut out,
            &blocks[0],
            &Block::Attention {
                weights: scaled,
                layout: *layout,
            },
        )
        .unwrap();
        assert_eq!(out.raw_bytes("blk.0.attn.qkv.weight").unwrap(), cp.raw_bytes("blk.0.attn.qkv.weight").unwrap());
        let doubled: Vec<f64> = cp.values("blk.0.attn.out.weight").unwrap().iter().map(|x| 2.0 * x).collect();
        assert_eq!(out.values("blk.0.attn.out.weight").unwrap(), doubled);
    }

    #[test]
    fn lora_preset_transposes_peft_storage() {
        let mut rng = Rng::new(3);
        let mut cp = CheckpointFile::new();
        let p = "base_model.model.model.layers";
        for l in 0..2 {
            for m in ["q_proj", "v_proj"] {
                push(&mut cp, &format!("{p}.{l}.self_attn.{m}.lora_A.weight"), DType::F32, &[4, 16], &mut rng);
                push(&mut cp, &format!("{p}.{l}.self_attn.{m}.lora_B.weight"), DType::F32, &[16, 4], &mut rng);
            }
        }
        let ld = LayoutDescriptor::from_toml_str("preset = \"lora\"").unwrap();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[0].label, "layer 0 q_proj");
        let Block::Lora(pair) = &blocks[0].block else { panic!() };
        assert_eq!(pair.rank(), 4);
        let stored_a = cp.matrix(&format!("{p}.0.self_attn.q_proj.lora_A.weight")).unwrap();
        assert_eq!(pair.a, stored_a.transpose());
    }

    #[test]
    fn descriptor_errors() {
        assert!(matches!(LayoutDescriptor::from_toml_str("preset = 3"), Err(LayoutError::Parse(_))));
        assert!(matches!(
            LayoutDescriptor::from_toml_str("preset = \"gpt\""),
            Err(LayoutError::Invalid(_))
        ));
        assert!(matches!(
            LayoutDescriptor::from_toml_str("preset = \"llama\""),
            Err(LayoutError::Invalid(_))
        ));
        let no_storage = "n_q_heads = 2\nn_kv_heads = 2\nhead_dim = 2\n[attention]\nq=\"q\"\nk=\"k\"\nv=\"v\"\no=\"o\"";
        assert!(matches!(LayoutDescriptor::from_toml_str(no_storage), Err(LayoutError::Invalid(_))));
        let bad_geo = "preset = \"llama\"\nn_q_heads = 3\nn_kv_heads = 2\nhead_dim = 2";
        assert!(matches!(LayoutDescriptor::from_toml_str(bad_geo), Err(LayoutError::Invalid(_))));
        let typo = "preset = \"llama\"\nn_q_heads = 2\nn_kv_heads = 2\nhead_dim = 2\nstorgae = \"in_out\"";
        assert!(matches!(LayoutDescriptor::from_toml_str(typo), Err(LayoutError::Parse(_))));
    }

    #[test]
    fn preset_fields_can_be_overridden() {
        let text = "preset = \"llama\"\nn_q_heads = 2\nn_kv_heads = 1\nhead_dim = 2\nstorage = \"in_out\"\n[attention]\no = \"custom.{layer}.o\"";
        let ld = LayoutDescriptor::from_toml_str(text).unwrap();
        let a = ld.attention.unwrap();
        assert_eq!(a.o.as_deref(), Some("custom.{layer}.o"));
        assert_eq!(a.q.as_deref(), Some("model.layers.{layer}.self_attn.q_proj.weight"));
        assert_eq!(ld.storage, Storage::InOut);
    }

    #[test]
    fn exact_names_resolve_as_layer_zero() {
        let mut rng = Rng::new(1);
        let mut cp = CheckpointFile::new();
        let w = gaussian_fill(4, 4, 1.0, &mut rng).unwrap();
        for n in ["q", "k", "v", "o"] {
            cp.insert(n, DType::F64, &[4, 4], w.data()).unwrap();
        }
        let text = "n_q_heads = 2\nn_kv_heads = 2\nhead_dim = 2\nstorage = \"in_out\"\n[attention]\nq=\"q\"\nk=\"k\"\nv=\"v\"\no=\"o\"";
        let ld = LayoutDescriptor::from_toml_str(text).unwrap();
        let blocks = resolve_layout(&cp, &ld).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].layer, 0);
    }
}
