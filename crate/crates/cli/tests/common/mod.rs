#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// A scratch copy of the fixture config, rules, store and history files.
pub fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixtures()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            std::fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
        }
    }
    dir
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn scopex(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_scopex"))
        .args(args)
        .env_clear()
        .envs(envs.iter().copied())
        .output()
        .unwrap();
    Run {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8(output.stdout).unwrap(),
        stderr: String::from_utf8(output.stderr).unwrap(),
    }
}

/// Compare against a committed golden file; `UPDATE_GOLDENS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from golden output"))
    }
}

pub const INTUITION_Q: &str = "What is the capital of France?";
pub const REUSE_Q: &str = "How do I damp oscillation in a footbridge?";
pub const EXHAUSTION_Q: &str = "Why do commuters keep missing the 7:40 ferry?";

/// Run the three golden commands; returns `(golden name, run)` pairs.
pub fn golden_runs() -> Vec<(&'static str, Run)> {
    let ws = workspace();
    let config = ws.path().join("config.json");
    let config = config.to_str().unwrap();
    let traces = fixtures().join("traces");
    let coverage = fixtures().join("coverage.json");
    vec![
        ("ask_intuition.json", scopex(&["--config", config, "ask", "--question", INTUITION_Q], &[])),
        ("ask_reuse.json", scopex(&["--config", config, "ask", "--question", REUSE_Q], &[])),
        ("ask_exhaustion.json", scopex(&["--config", config, "ask", "--question", EXHAUSTION_Q], &[])),
        ("network.json", scopex(&["network", "build", "--traces", traces.to_str().unwrap()], &[])),
        (
            "network.dot",
            scopex(&["network", "build", "--traces", traces.to_str().unwrap(), "--format", "dot"], &[]),
        ),
        ("entropy.json", scopex(&["entropy", "--coverage", coverage.to_str().unwrap()], &[])),
    ]
}
