//! Synthetic checkpoints in the preset naming schemes, for demos and tests.

use serde::{Deserialize, Serialize};

use super::{CheckpointFile, DType, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Llama,
    Qwen,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    /// Adapter rank for `Lora`.
    pub rank: usize,
    pub dtype: DType,
    pub sigma: f64,
    pub seed: u64,
    /// Zero-initialized `lora_B`, as in a freshly created adapter.
    pub zero_lora_b: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Llama,
            layers: 2,
            n_q_heads: 8,
            n_kv_heads: 2,
            head_dim: 4,
            d_model: 32,
            rank: 4,
            dtype: DType::F32,
            sigma: 0.02,
            seed: 0,
            zero_lora_b: false,
        }
    }
}

fn push(cp: &mut CheckpointFile, name: &str, spec: &SynthSpec, shape: &[usize], sigma: f64, rng: &mut Rng) -> Result<()> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| sigma * rng.standard_normal()).collect();
    cp.insert(name, spec.dtype, shape, &v)
}

/// Builds the checkpoint and a matching layout descriptor (TOML).
pub fn synthesize(spec: &SynthSpec) -> Result<(CheckpointFile, String)> {
    let mut rng = Rng::new(spec.seed);
    let mut cp = CheckpointFile::new();
    let (d, q_w, kv_w) = (spec.d_model, spec.n_q_heads * spec.head_dim, spec.n_kv_heads * spec.head_dim);
    let s = spec.sigma;
    match spec.kind {
        SynthKind::Llama | SynthKind::Qwen => {
            push(&mut cp, "model.embed_tokens.weight", spec, &[16, d], s, &mut rng)?;
            for l in 0..spec.layers {
                let p = format!("model.layers.{l}");
                // Stored [out, in].
                push(&mut cp, &format!("{p}.self_attn.q_proj.weight"), spec, &[q_w, d], s, &mut rng)?;
                push(&mut cp, &format!("{p}.self_attn.k_proj.weight"), spec, &[kv_w, d], s, &mut rng)?;
                push(&mut cp, &format!("{p}.self_attn.v_proj.weight"), spec, &[kv_w, d], s, &mut rng)?;
                push(&mut cp, &format!("{p}.self_attn.o_proj.weight"), spec, &[d, q_w], s, &mut rng)?;
                if spec.kind == SynthKind::Qwen {
                    push(&mut cp, &format!("{p}.self_attn.q_proj.bias"), spec, &[q_w], s, &mut rng)?;
                    push(&mut cp, &format!("{p}.self_attn.k_proj.bias"), spec, &[kv_w], s, &mut rng)?;
                    push(&mut cp, &format!("{p}.self_attn.v_proj.bias"), spec, &[kv_w], s, &mut rng)?;
                }
                push(&mut cp, &format!("{p}.mlp.up_proj.weight"), spec, &[2 * d, d], s, &mut rng)?;
                push(&mut cp, &format!("{p}.input_layernorm.weight"), spec, &[d], 1.0, &mut rng)?;
            }
        }
        SynthKind::Lora => {
            for l in 0..spec.layers {
                for (module, out) in [("q_proj", q_w), ("v_proj", kv_w)] {
                    let p = format!("base_model.model.model.layers.{l}.self_attn.{module}");
                    push(&mut cp, &format!("{p}.lora_A.weight"), spec, &[spec.rank, d], s, &mut rng)?;
                    let b_sigma = if spec.zero_lora_b { 0.0 } else { s };
                    push(&mut cp, &format!("{p}.lora_B.weight"), spec, &[out, spec.rank], b_sigma, &mut rng)?;
                }
            }
        }
    }
    let preset = match spec.kind {
        SynthKind::Llama => "llama",
        SynthKind::Qwen => "qwen",
        SynthKind::Lora => "lora",
    };
    let descriptor = format!(
        "preset = \"{preset}\"\nn_q_heads = {}\nn_kv_heads = {}\nhead_dim = {}\nd_model = {}\n",
        spec.n_q_heads, spec.n_kv_heads, spec.head_dim, d
    );
    Ok((cp, descriptor))
}
