#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsalign::commands::text_embedding;
use rsalign::io::write_grid;
use rsalign::FeatureGrid;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rsalign"));
    for (k, _) in std::env::vars() {
        if k.starts_with("RSALIGN_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn rsalign")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Single-channel `h x w` grid that is zero except for `value` at `at`.
pub fn spike_grid(h: usize, w: usize, at: (usize, usize), value: f64) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, 1, |r, c, _| if (r, c) == at { value } else { 0.0 }).unwrap()
}

pub fn write_fixture_grid(dir: &Path, name: &str, grid: &FeatureGrid) -> PathBuf {
    let p = dir.join(name);
    write_grid(&p, grid).unwrap();
    p
}

/// Grid whose every cell is the hashed embedding of `word`, so boxes,
/// masks and the pooled global vector all agree with that word's text side.
pub fn aligned_grid(word: &str, h: usize, w: usize, dim: usize) -> FeatureGrid {
    let e = text_embedding(word, dim).unwrap();
    let v = e.values().to_vec();
    FeatureGrid::from_fn(h, w, dim, |_, _, ch| v[ch] as f32 as f64).unwrap()
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}
