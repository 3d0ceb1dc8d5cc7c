//! Helpers for driving the `sdtm` binary from integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_sdtm");

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn sdtm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SDTM_CATEGORIZER_URL")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ten-step toy config, cheap enough to run many times.
pub fn short_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("short.json");
    let body = format!(
        r#"{{"shape": "toy", "schedule": {{"total_steps": 10}}, "trajectory": {{"steps": 10}}{extra}}}"#
    );
    std::fs::write(&p, body).unwrap();
    p
}

fn collect_files(dir: &Path, prefix: &str, out: &mut Vec<(String, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = format!("{prefix}{}", e.file_name().to_string_lossy());
        if e.path().is_dir() {
            collect_files(&e.path(), &format!("{name}/"), out);
        } else {
            out.push((name, std::fs::read(e.path()).unwrap()));
        }
    }
}

/// Runs every subcommand on `cfg` into a fresh `dir` and returns each
/// output file and captured stdout, sorted by name.
pub fn snapshot(
    cfg: &Path,
    dir: &Path,
    sequential: bool,
) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::create_dir_all(dir).unwrap();
    let map = dir.join("map.json");
    let run = dir.join("run");
    let analysis = dir.join("analysis");
    let mut stdout = Vec::new();
    let commands = [
        vec![
            "calibrate",
            "--config",
            s(cfg),
            "--samples",
            "2",
            "--out",
            s(&map),
        ],
        vec!["run", "--config", s(cfg), "--out", s(&run)],
        vec!["analyze", "--config", s(cfg), "--out", s(&analysis)],
        vec!["report", "--run", s(&run)],
        vec!["macs", "--shape", "toy", "--schedule", "default", "--json"],
    ];
    for cmd in commands {
        let mut args = cmd.clone();
        if sequential && ["calibrate", "run", "analyze"].contains(&cmd[0]) {
            args.push("--sequential");
        }
        let o = sdtm(&args);
        if code(&o) != 0 {
            return Err(format!("{args:?} exited {}: {}", code(&o), stderr(&o)));
        }
        // paths differ between snapshot directories
        let text = String::from_utf8_lossy(&o.stdout).replace(s(dir), "<dir>");
        stdout.push((format!("stdout of {}", cmd[0]), text.into_bytes()));
    }
    let mut files = Vec::new();
    collect_files(dir, "", &mut files);
    files.extend(stdout);
    files.sort();
    Ok(files)
}

/// Name of the first output that differs between two snapshots.
pub fn first_difference(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{} outputs vs {}", a.len(), b.len()));
    }
    a.iter().zip(b).find(|(x, y)| x != y).map(|(x, y)| {
        if x.0 == y.0 {
            x.0.clone()
        } else {
            format!("{} vs {}", x.0, y.0)
        }
    })
}
