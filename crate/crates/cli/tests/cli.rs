//! The `scmc` binary: flags, exit codes, error lines and artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scmc_core::harness::Mode;
use scmc_core::pipeline::PipelineConfig;

fn scmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scmc")).args(args).env("RUST_LOG", "error").output().expect("spawn scmc")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let out = dir.join("out");
    let text = format!(
        "seed = 1\n[paths]\nout_dir = {:?}\n[world]\ntasks_per_house = 3\n[data]\nepisodes_per_task = 2\n[sft]\nepochs = 1\n[eval]\nepisodes_per_mode = 4\n{extra}",
        out.display().to_string()
    );
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).expect("write config");
    p
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).expect("json error line")
}

#[test]
fn dry_run_prints_plan_without_side_effects() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), "");
    for cmd in ["gen-data", "sft", "grpo", "eval", "compare"] {
        let o = scmc(&[cmd, "--config", cfg.to_str().expect("utf8"), "--dry-run", "--seed", "9"]);
        assert!(o.status.success(), "{cmd}");
        let plan = String::from_utf8_lossy(&o.stdout);
        assert!(plan.contains(&format!("command {cmd}, seed 9")), "{plan}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn eval_without_checkpoint_fails_with_the_path() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), "");
    let o = scmc(&["eval", "--config", cfg.to_str().expect("utf8")]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().expect("message").contains("checkpoints/sft.json"));
}

#[test]
fn bad_inputs_are_config_errors() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), "");
    let o = scmc(&["compare", "--config", cfg.to_str().expect("utf8"), "--mode", "scmc,telepathy"]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "config");

    let o = scmc(&["eval", "--config", dir.path().join("absent.toml").to_str().expect("utf8")]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "config");

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "seed = \"many\"\n").expect("write");
    let o = scmc(&["eval", "--config", broken.to_str().expect("utf8")]);
    assert_eq!(error_line(&o)["error"], "config");

    let o = scmc(&["eval", "--config", cfg.to_str().expect("utf8"), "--workers", "0"]);
    assert_eq!(error_line(&o)["error"], "config");
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), "[grpo]\nupdates = 2\n");
    let c = cfg.to_str().expect("utf8");
    for cmd in ["gen-data", "sft", "grpo"] {
        let o = scmc(&[cmd, "--config", c, "--workers", "2"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = scmc(&["compare", "--config", c, "--mode", "no_mem,scmc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).expect("report json");
    assert_eq!(report["rows"].as_array().expect("rows").len(), 2);
    let out = dir.path().join("out");
    for f in [
        "sft_data.jsonl",
        "sft_loss.csv",
        "grpo_reward.csv",
        "checkpoints/grpo.json",
        "checkpoints/grpo.bin",
        "report.json",
        "report.csv",
        "attention.csv",
        "report.timing.json",
        "traces/scmc/0000.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("traces/ammi").exists());
}

#[test]
fn shipped_config_parses() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg: PipelineConfig = toml::from_str(&std::fs::read_to_string(p).expect("read")).expect("parse");
    assert_eq!(cfg.eval.modes, Mode::ALL);
    assert_eq!(cfg.sft.orth_weight, 0.1);
    assert_eq!(cfg.remote.token_env.as_deref(), Some("SCMC_API_TOKEN"));
}

#[test]
fn toml_defaults_fill_missing_fields_and_typos_fail() {
    let cfg: PipelineConfig = toml::from_str("seed = 5\n[eval]\nmodes = [\"scmc\"]\n").expect("toml");
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.eval.modes, [Mode::Scmc]);
    assert_eq!(cfg.model.n_soft, 16);
    assert!(toml::from_str::<PipelineConfig>("sede = 5\n").is_err());
}
