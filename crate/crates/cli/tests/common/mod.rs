#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn noah(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noah"))
        .args(args)
        .env("NOAH_LOG", "error")
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its trimmed stdout.
pub fn ok(args: &[&str]) -> String {
    let out = noah(args);
    assert!(
        out.status.success(),
        "noah {} failed with {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Desk-scale run config with data paths pointing at `dataset` and
/// `backbone`, and seeds shifted by `seed`.
pub fn write_config(path: &Path, dataset: &Path, backbone: Option<&Path>, pretrain: Option<&Path>, seed: u64) -> PathBuf {
    let mut text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap();
    let replace_line = |text: &mut String, key: &str, value: Option<String>| {
        let lines: Vec<String> = text
            .lines()
            .filter_map(|l| {
                if l.starts_with(&format!("{key} =")) {
                    value.as_ref().map(|v| format!("{key} = {v}"))
                } else {
                    Some(l.to_string())
                }
            })
            .collect();
        *text = lines.join("\n") + "\n";
    };
    let quoted = |q: &Path| format!("{:?}", q.to_str().unwrap());
    replace_line(&mut text, "dataset", Some(quoted(dataset)));
    replace_line(&mut text, "backbone", backbone.map(quoted));
    replace_line(&mut text, "pretrain_dataset", pretrain.map(quoted));
    for (key, base) in [("backbone_init", 0), ("pretrain", 1), ("supernet", 2), ("evolve", 3), ("retrain", 4)] {
        replace_line(&mut text, key, Some((base + 10 * seed).to_string()));
    }
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn dir_bytes(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}
