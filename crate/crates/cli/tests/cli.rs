use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use wisca_core::checkpoint::synth::{synthesize, SynthKind, SynthSpec};
use wisca_core::checkpoint::DType;
use wisca_core::CheckpointFile;

const BIN: &str = env!("CARGO_BIN_EXE_wisca");

fn wisca(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap()
}

/// Writes `ckpt.safetensors` and `layout.toml` into `dir`.
fn fixture(dir: &Path, spec: SynthSpec) {
    let (cp, toml) = synthesize(&spec).unwrap();
    std::fs::write(dir.join("ckpt.safetensors"), cp.to_bytes()).unwrap();
    std::fs::write(dir.join("layout.toml"), toml).unwrap();
}

fn mha_f64() -> SynthSpec {
    SynthSpec {
        n_q_heads: 4,
        n_kv_heads: 4,
        head_dim: 4,
        d_model: 16,
        dtype: DType::F64,
        sigma: 0.3,
        ..Default::default()
    }
}

fn manifest(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn apply_args<'a>(input: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["apply", "--in", input, "--out", out, "--layout", "layout.toml"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn apply_balances_norms_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), mha_f64());
    let o = wisca(
        &apply_args("ckpt.safetensors", "out.safetensors", &["--strategy", "qk-tensor", "--strategy", "vo-tensor"]),
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&dir.path().join("out.safetensors.manifest.json"));
    let blocks = m["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    for b in blocks {
        let after = &b["l1_after"];
        let f = |k: &str| after[k].as_f64().unwrap();
        assert!(rel(f("q"), f("k")) < 1e-10, "{b}");
        assert!(rel(f("v"), f("o")) < 1e-10, "{b}");
        assert!(b["equivalence"]["passed"].as_bool().unwrap());
    }
    assert_eq!(m["strategies"], serde_json::json!(["qk_tensor", "vo_tensor"]));
}

fn all_factors_one(m: &Value) -> bool {
    m["blocks"].as_array().unwrap().iter().all(|b| {
        b["plans"].as_array().unwrap().iter().all(|p| {
            p["factors"].as_object().unwrap().values().all(|f| match &f["tensor"] {
                Value::Number(n) => n.as_f64() == Some(1.0),
                _ => f["channel"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(1.0)),
            })
        })
    })
}

#[test]
fn applying_twice_gives_unit_factors() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), mha_f64());
    for strategy in ["qk-tensor", "qk-channel", "vo-tensor", "vo-channel"] {
        let first = wisca(&apply_args("ckpt.safetensors", "once.safetensors", &["--strategy", strategy]), dir.path());
        assert!(first.status.success(), "{}", stderr(&first));
        assert!(!all_factors_one(&manifest(&dir.path().join("once.safetensors.manifest.json"))));
        let second = wisca(&apply_args("once.safetensors", "twice.safetensors", &["--strategy", strategy]), dir.path());
        assert!(second.status.success(), "{}", stderr(&second));
        let m = manifest(&dir.path().join("twice.safetensors.manifest.json"));
        assert!(all_factors_one(&m), "{strategy}: {m}");
        assert_eq!(
            std::fs::read(dir.path().join("once.safetensors")).unwrap(),
            std::fs::read(dir.path().join("twice.safetensors")).unwrap()
        );
    }
}

#[test]
fn zero_lora_b_is_skipped_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    fixture(
        dir.path(),
        SynthSpec {
            kind: SynthKind::Lora,
            zero_lora_b: true,
            ..Default::default()
        },
    );
    let o = wisca(&apply_args("ckpt.safetensors", "out.safetensors", &["--strategy", "lora"]), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out.safetensors.manifest.json")).unwrap();
    assert!(text.contains("zero-norm pair skipped"));
    assert!(stderr(&o).contains("zero-norm pair skipped"));
    assert_eq!(
        std::fs::read(dir.path().join("ckpt.safetensors")).unwrap(),
        std::fs::read(dir.path().join("out.safetensors")).unwrap()
    );
}

#[test]
fn lora_adapter_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    fixture(
        dir.path(),
        SynthSpec {
            kind: SynthKind::Lora,
            dtype: DType::F64,
            sigma: 0.1,
            ..Default::default()
        },
    );
    // The descriptor's strategy table (lora = tensor) is used without --strategy.
    let o = wisca(&apply_args("ckpt.safetensors", "out.safetensors", &[]), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&dir.path().join("out.safetensors.manifest.json"));
    for b in m["blocks"].as_array().unwrap() {
        let a = b["l1_after"]["a"].as_f64().unwrap();
        let bb = b["l1_after"]["b"].as_f64().unwrap();
        assert!(rel(a, bb) < 1e-10);
    }
}

#[test]
fn verify_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), mha_f64());
    let same = wisca(&["verify", "--a", "ckpt.safetensors", "--b", "ckpt.safetensors", "--layout", "layout.toml"], dir.path());
    assert!(same.status.success());
    assert!(stdout(&same).contains("max abs dev 0.000e0"), "{}", stdout(&same));

    let o = wisca(
        &apply_args("ckpt.safetensors", "w.safetensors", &["--strategy", "qk-channel", "--strategy", "vo-tensor"]),
        dir.path(),
    );
    assert!(o.status.success());
    let ok = wisca(&["verify", "--a", "ckpt.safetensors", "--b", "w.safetensors", "--layout", "layout.toml"], dir.path());
    assert!(ok.status.success(), "{}", stdout(&ok));

    // Perturb one weight by 1e-3.
    let mut cp = CheckpointFile::from_bytes(&std::fs::read(dir.path().join("ckpt.safetensors")).unwrap()).unwrap();
    let name = "model.layers.1.self_attn.v_proj.weight";
    let mut v = cp.values(name).unwrap();
    v[3] += 1e-3;
    cp.set_values(name, &v).unwrap();
    std::fs::write(dir.path().join("bad.safetensors"), cp.to_bytes()).unwrap();
    let bad = wisca(&["verify", "--a", "ckpt.safetensors", "--b", "bad.safetensors", "--layout", "layout.toml"], dir.path());
    assert_eq!(bad.status.code(), Some(3), "{}", stdout(&bad));
    assert!(stdout(&bad).contains("layer 1") && stdout(&bad).contains("FAIL"));

    // Different head geometry: same names, different shapes.
    let other = tempfile::tempdir().unwrap();
    fixture(other.path(), SynthSpec { d_model: 8, ..mha_f64() });
    std::fs::copy(other.path().join("ckpt.safetensors"), dir.path().join("small.safetensors")).unwrap();
    let shape = wisca(&["verify", "--a", "ckpt.safetensors", "--b", "small.safetensors", "--layout", "layout.toml"], dir.path());
    assert_eq!(shape.status.code(), Some(4), "{}", stderr(&shape));
}

#[test]
fn failed_verification_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), SynthSpec::default());
    // f32 rounding of rescaled weights cannot meet 1e-15.
    let o = wisca(
        &apply_args("ckpt.safetensors", "out.safetensors", &["--strategy", "qk-tensor", "--tol", "1e-15"]),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join("out.safetensors").exists());
    assert!(!dir.path().join("out.safetensors.manifest.json").exists());

    let unverified = wisca(
        &apply_args("ckpt.safetensors", "out.safetensors", &["--strategy", "qk-tensor", "--tol", "1e-15", "--no-verify"]),
        dir.path(),
    );
    assert!(unverified.status.success());
}

#[test]
fn exit_codes_for_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), SynthSpec::default());
    let missing = wisca(&apply_args("nope.safetensors", "out.safetensors", &["--strategy", "qk-tensor"]), dir.path());
    assert_eq!(missing.status.code(), Some(1));

    std::fs::write(dir.path().join("junk.safetensors"), b"\xff\xff\xff\xff\xff\xff\xff\xffjunk").unwrap();
    let junk = wisca(&apply_args("junk.safetensors", "out.safetensors", &["--strategy", "qk-tensor"]), dir.path());
    assert_eq!(junk.status.code(), Some(2));

    std::fs::write(dir.path().join("layout.toml"), "preset = \"qwen\"\nn_q_heads = 8\nn_kv_heads = 2\nhead_dim = 4\n").unwrap();
    let unmatched = wisca(&apply_args("ckpt.safetensors", "out.safetensors", &["--strategy", "qk-tensor"]), dir.path());
    assert_eq!(unmatched.status.code(), Some(2));
    assert!(stderr(&unmatched).contains("q_proj.bias"), "{}", stderr(&unmatched));

    let bad_flag = wisca(&["simulate", "--q0", "x"], dir.path());
    assert_eq!(bad_flag.status.code(), Some(2));
    let bad_beta = wisca(&["simulate", "--q0", "1", "--k0", "2", "--beta", "1.5"], dir.path());
    assert_eq!(bad_beta.status.code(), Some(2));
}

#[test]
fn replay_reproduces_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), SynthSpec::default());
    let o = wisca(
        &apply_args(
            "ckpt.safetensors",
            "out.safetensors",
            &["--strategy", "vo-channel", "--strategy", "qk-tensor", "--manifest", "run.json"],
        ),
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = wisca(&["replay", "run.json", "--out", "again.safetensors"], dir.path());
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(
        std::fs::read(dir.path().join("out.safetensors")).unwrap(),
        std::fs::read(dir.path().join("again.safetensors")).unwrap()
    );

    // A changed input is refused.
    std::fs::copy(dir.path().join("out.safetensors"), dir.path().join("ckpt.safetensors")).unwrap();
    let stale = wisca(&["replay", "run.json", "--out", "x.safetensors"], dir.path());
    assert_eq!(stale.status.code(), Some(2));
}

#[test]
fn output_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), SynthSpec { layers: 4, ..Default::default() });
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = format!("out{workers}.safetensors");
        let o = Command::new(BIN)
            .args(apply_args("ckpt.safetensors", &out, &["--strategy", "qk-channel", "--strategy", "vo-tensor"]))
            .env("WISCA_WORKERS", workers)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push((
            std::fs::read(dir.path().join(&out)).unwrap(),
            std::fs::read_to_string(dir.path().join(format!("{out}.manifest.json")))
                .unwrap()
                .replace(&out, "OUT"),
            stdout(&o).replace(&out, "OUT"),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn csv_column(text: &str, col: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == col).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn report_formats_and_factors() {
    let dir = tempfile::tempdir().unwrap();
    fixture(
        dir.path(),
        SynthSpec {
            d_model: 64,
            head_dim: 8,
            ..Default::default()
        },
    );
    let csv = wisca(&["report", "--in", "ckpt.safetensors", "--layout", "layout.toml", "--format", "csv"], dir.path());
    assert!(csv.status.success());
    let text = stdout(&csv);
    assert_eq!(format!("{}\n", text.lines().next().unwrap()), golden("report_header.csv"));
    let cols = golden("report_header.csv").trim().split(',').count();
    assert!(text.lines().all(|l| l.split(',').count() == cols));
    // Equal per-element statistics: |W_q| ≈ g·|W_k| with g = 4.
    let pairs = csv_column(&text, "pair");
    let implied = csv_column(&text, "implied_factor");
    for (p, f) in pairs.iter().zip(&implied) {
        if p == "qk" {
            let f: f64 = f.parse().unwrap();
            assert!((f - 0.5).abs() < 0.02, "{f}");
        }
    }

    let table = wisca(&["report", "--in", "ckpt.safetensors", "--layout", "layout.toml"], dir.path());
    assert!(stdout(&table).starts_with("block"));
    assert_eq!(stdout(&table).lines().count(), 1 + 4);
}

#[test]
fn balanced_checkpoint_reports_unit_factors() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), mha_f64());
    let o = wisca(
        &apply_args("ckpt.safetensors", "bal.safetensors", &["--strategy", "qk-tensor", "--strategy", "vo-tensor"]),
        dir.path(),
    );
    assert!(o.status.success());
    let r = wisca(&["report", "--in", "bal.safetensors", "--layout", "layout.toml", "--format", "csv"], dir.path());
    for f in csv_column(&stdout(&r), "implied_factor") {
        let f: f64 = f.parse().unwrap();
        assert!((f - 1.0).abs() < 1e-12, "{f}");
    }
}

#[test]
fn simulate_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = wisca(&["simulate", "--q0", "1", "--k0", "1"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("converged at iter 0"), "{}", stdout(&o));

    let o = wisca(
        &["simulate", "--q0", "3", "--k0", "0.1", "--wisca-init", "--csv", "t.csv", "--svg", "t.svg"],
        dir.path(),
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(csv.starts_with(&golden("trajectory_header.csv")));
    let svg = std::fs::read_to_string(dir.path().join("t.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    // Start is projected onto Q == K with the same product.
    let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((first[1] - 0.3f64.sqrt()).abs() < 1e-12 && (first[2] - 0.3f64.sqrt()).abs() < 1e-12);

    let negative = wisca(&["simulate", "--q0", "-2", "--k0", "-0.5", "--c", "1"], dir.path());
    assert!(negative.status.success(), "{}", stderr(&negative));
}

#[test]
fn simulate_defaults_match_reference_parameters() {
    let help = wisca(&["simulate", "--help"], Path::new("."));
    let text = stdout(&help);
    for default in ["[default: 1]", "[default: 0.01]", "[default: 0.9]", "[default: 10000]"] {
        assert!(text.contains(default), "missing {default}");
    }
}

fn sweep_summary(dir: &Path) -> (String, String) {
    let o = wisca(&["simulate", "--sweep", "1000", "--seed", "7"], dir);
    assert!(o.status.success());
    (stdout(&o), stderr(&o))
}

#[test]
fn sweep_emits_paired_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, summary) = sweep_summary(dir.path());
    assert!(csv.starts_with(&golden("sweep_header.csv")));
    assert_eq!(csv.lines().count(), 1001);
    assert!(summary.contains("median raw"), "{summary}");
    assert_eq!(sweep_summary(dir.path()).0, csv);
}

#[test]
fn sweep_median_raw_not_below_wisca() {
    let dir = tempfile::tempdir().unwrap();
    let (_, summary) = sweep_summary(dir.path());
    assert!(summary.contains("median raw") && summary.contains(">= median wisca"), "{summary}");
}

#[test]
fn norm_theorem_skips_assertions_with_one_trial() {
    let dir = tempfile::tempdir().unwrap();
    let o = wisca(&["norm-theorem", "--trials", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("assertions skipped"));
    assert!(stdout(&o).starts_with(&golden("norm_theorem_header.csv")));
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn norm_theorem_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["norm-theorem", "--sizes", "8x8,32x32", "--trials", "200", "--seed", "42"];
    let a = wisca(&args, dir.path());
    let b = wisca(&args, dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn norm_theorem_default_run_shrinks_std() {
    let dir = tempfile::tempdir().unwrap();
    let o = wisca(&["norm-theorem"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let std: Vec<f64> = csv_column(&text, "std_ratio_l1").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(std.len(), 4);
    assert!(std.windows(2).all(|w| w[1] < w[0]), "{std:?}");
}
