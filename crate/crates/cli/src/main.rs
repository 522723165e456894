//! `wisca`: rescale attention and LoRA weights without changing outputs.
//!
//! Exit codes: 0 ok, 1 I/O, 2 parse/resolve, 3 equivalence, 4 structural,
//! 5 statistical check failed.

mod apply;
mod common;
mod error;
mod norm;
mod report;
mod simulate;
mod verify_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wisca_core::checkpoint::synth::{synthesize, SynthKind, SynthSpec};
use wisca_core::checkpoint::DType;
use wisca_core::landscape::SimConfig;
use wisca_core::verify::{DEFAULT_BATTERY, DEFAULT_BATTERY_SEED};
use wisca_core::Strategy;

use crate::apply::ApplyParams;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "wisca", version, about = "Output-preserving weight rescaling for attention and LoRA checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    QkTensor,
    QkChannel,
    VoTensor,
    VoChannel,
    Lora,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::QkTensor => Strategy::QkTensor,
            StrategyArg::QkChannel => Strategy::QkChannel,
            StrategyArg::VoTensor => Strategy::VoTensor,
            StrategyArg::VoChannel => Strategy::VoChannel,
            StrategyArg::Lora => Strategy::Lora,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Llama,
    Qwen,
    Lora,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F64,
    F32,
    F16,
    Bf16,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale a checkpoint and write it with a replay manifest.
    Apply {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Repeatable; defaults to the descriptor's [strategy] table.
        #[arg(long, value_enum)]
        strategy: Vec<StrategyArg>,
        #[arg(long, overrides_with = "no_verify")]
        verify: bool,
        #[arg(long = "no-verify")]
        no_verify: bool,
        /// Relative tolerance; defaults by stored dtype (f64 1e-10, f32 1e-6).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_BATTERY)]
        battery: usize,
        #[arg(long, default_value_t = DEFAULT_BATTERY_SEED)]
        seed: u64,
        /// Defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Check two checkpoints compute the same function block by block.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BATTERY)]
        battery: usize,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_BATTERY_SEED)]
        seed: u64,
    },
    /// Per-pair norms, ratios and implied factors (read-only).
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Momentum SGD on the loss (QK - C)^2.
    Simulate {
        #[arg(long, allow_hyphen_values = true)]
        q0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        k0: Option<f64>,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        c: f64,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        /// Start from the balanced point with the same product.
        #[arg(long)]
        wisca_init: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Compare raw and balanced starts over this many random inits.
        #[arg(long)]
        sweep: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo concentration of Gaussian norm ratios.
    NormTheorem {
        #[arg(long, default_value = norm::DEFAULT_SIZES)]
        sizes: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run an apply manifest and confirm the output hash.
    Replay {
        manifest: PathBuf,
        /// Defaults to the manifest's output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic checkpoint and its layout descriptor.
    Fixture {
        #[arg(long, value_enum, default_value = "llama")]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layout_out: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        n_q_heads: usize,
        #[arg(long, default_value_t = 2)]
        n_kv_heads: usize,
        #[arg(long, default_value_t = 4)]
        head_dim: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DTypeArg,
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        zero_lora_b: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Apply {
            input,
            out,
            layout,
            strategy,
            verify: _,
            no_verify,
            tol,
            battery,
            seed,
            manifest,
        } => {
            let params = ApplyParams {
                input,
                layout,
                strategies: strategy.into_iter().map(Strategy::from).collect(),
                verify: !no_verify,
                tolerance: tol,
                battery,
                seed,
            };
            apply::cmd_apply(&params, &out, manifest.as_deref())
        }
        Command::Verify {
            a,
            b,
            layout,
            battery,
            tol,
            seed,
        } => verify_cmd::cmd_verify(&verify_cmd::VerifyParams {
            a,
            b,
            layout,
            battery,
            tolerance: tol,
            seed,
        }),
        Command::Report { input, layout, format } => {
            report::cmd_report(&input, &layout, matches!(format, ReportFormat::Csv))
        }
        Command::Simulate {
            q0,
            k0,
            c,
            eta,
            beta,
            eps,
            max_iters,
            wisca_init,
            csv,
            svg,
            sweep,
            seed,
        } => simulate::cmd_simulate(&simulate::SimulateParams {
            q0,
            k0,
            cfg: SimConfig {
                c,
                eta,
                beta,
                epsilon: eps,
                max_iters,
            },
            wisca_init,
            csv,
            svg,
            sweep,
            seed,
        }),
        Command::NormTheorem {
            sizes,
            trials,
            sigma,
            seed,
            out,
        } => norm::cmd_norm_theorem(&norm::NormParams {
            sizes,
            trials,
            sigma,
            seed,
            out,
        }),
        Command::Replay { manifest, out } => apply::cmd_replay(&manifest, out.as_deref()),
        Command::Fixture {
            kind,
            out,
            layout_out,
            layers,
            n_q_heads,
            n_kv_heads,
            head_dim,
            d_model,
            rank,
            dtype,
            sigma,
            seed,
            zero_lora_b,
        } => {
            let spec = SynthSpec {
                kind: match kind {
                    KindArg::Llama => SynthKind::Llama,
                    KindArg::Qwen => SynthKind::Qwen,
                    KindArg::Lora => SynthKind::Lora,
                },
                layers,
                n_q_heads,
                n_kv_heads,
                head_dim,
                d_model,
                rank,
                dtype: match dtype {
                    DTypeArg::F64 => DType::F64,
                    DTypeArg::F32 => DType::F32,
                    DTypeArg::F16 => DType::F16,
                    DTypeArg::Bf16 => DType::BF16,
                },
                sigma,
                seed,
                zero_lora_b,
            };
            if n_kv_heads == 0 || n_q_heads % n_kv_heads != 0 {
                return Err(CliError::Parse("n_q_heads must be a positive multiple of n_kv_heads".into()));
            }
            let (cp, descriptor) = synthesize(&spec)?;
            common::write_bytes(&out, &cp.to_bytes())?;
            common::write_bytes(&layout_out, descriptor.as_bytes())?;
            println!("wrote {} and {}", out.display(), layout_out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    common::init_workers();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
