use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.json");

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn exec(&self, args: &[&str]) -> (i32, String) {
        self.exec_env(args, &[])
    }

    fn exec_env(&self, args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
        let root = self.dir.path();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxdiff"));
        cmd.current_dir(root)
            .arg("--data-dir")
            .arg(root.join("data"))
            .arg("--checkpoint-dir")
            .arg(root.join("checkpoints"))
            .arg("--report-dir")
            .arg(root.join("reports"))
            .args(args)
            .env_remove("HB_THREADS");
        for (k, v) in env {
            cmd.env(k, v);
        }
        let out = cmd.output().unwrap();
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    }

    fn tiny(&self, args: &[&str]) -> i32 {
        let mut all = vec!["--config", TINY];
        all.extend_from_slice(args);
        let (code, err) = self.exec(&all);
        assert!(code == 0 || !err.is_empty());
        code
    }
}

fn files(dir: &Path) -> usize {
    if !dir.exists() {
        return 0;
    }
    std::fs::read_dir(dir).unwrap().count()
}

#[test]
fn usage_errors() {
    let run = Run::new();
    assert_eq!(run.exec(&[]).0, 2);
    assert_eq!(run.exec(&["train-everything"]).0, 2);
    assert_eq!(run.exec(&["--help"]).0, 0);
}

#[test]
fn unknown_flag_writes_nothing() {
    let run = Run::new();
    assert_eq!(run.exec(&["gen-data", "--frobnicate"]).0, 4);
    assert_eq!(files(run.dir.path()), 0);
}

#[test]
fn bad_config_and_thread_count() {
    let run = Run::new();
    std::fs::write(run.path("bad.json"), r#"{"finetune": {"lambda1": -1}}"#).unwrap();
    let bad = run.path("bad.json");
    assert_eq!(run.exec(&["--config", bad.to_str().unwrap(), "gen-data"]).0, 4);
    assert_eq!(run.exec(&["--config", "absent.json", "gen-data"]).0, 4);
    assert_eq!(run.exec_env(&["--config", TINY, "gen-data"], &[("HB_THREADS", "x")]).0, 4);
    assert_eq!(files(&run.path("data")), 0);
}

#[test]
fn missing_inputs_exit_3() {
    let run = Run::new();
    assert_eq!(run.tiny(&["pretrain-evaluator"]), 3);
    assert_eq!(run.tiny(&["gen-data"]), 0);
    assert_eq!(run.tiny(&["pretrain-diffusion"]), 3);
    assert_eq!(run.tiny(&["finetune"]), 3);
    assert_eq!(run.tiny(&["bench"]), 3);
}

#[test]
fn stages_run_in_sequence() {
    let run = Run::new();
    for stage in ["gen-data", "pretrain-evaluator", "pretrain-diffusion"] {
        assert_eq!(run.tiny(&[stage]), 0, "{stage}");
    }
    assert_eq!(run.tiny(&["bench", "--baseline", "no-finetune"]), 0);
    assert!(run.path("reports/bench_no-finetune.json").is_file());
    assert_eq!(run.tiny(&["bench"]), 3);

    assert_eq!(run.tiny(&["finetune"]), 0);
    for args in [
        &["bench"][..],
        &["bench", "--baseline", "pixel-jitter"],
        &["bench", "--baseline", "identity"],
        &["generate", "--count", "2"],
        &["sweep-seeds"],
        &["ablate"],
    ] {
        assert_eq!(run.tiny(args), 0, "{args:?}");
    }
    for f in [
        "bench_finetuned.json",
        "bench_pixel-jitter.csv",
        "bench_identity.json",
        "ablation.csv",
        "finetune_convergence.csv",
        "gen-data.manifest.json",
        "ablate.manifest.json",
    ] {
        assert!(run.path("reports").join(f).is_file(), "{f}");
    }
    let identity: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.path("reports/bench_identity.json")).unwrap()).unwrap();
    assert_eq!(identity["overall"]["consistency"], 100.0);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.path("reports/finetune.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());
}
