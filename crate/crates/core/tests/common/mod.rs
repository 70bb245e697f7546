#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fars::pipeline::PipelineConfig;
use fars::synthetic::overlapping_dgp;

/// Writes a two-block synthetic panel and a matching config into `dir`.
pub fn fixture(dir: &Path, extra: &str) -> PathBuf {
    let panel = overlapping_dgp(80, &[10, 12], 0.5, 7);
    panel.write_csv(&dir.join("panel.csv"), "GDP").unwrap();
    let text = format!(
        r#"{extra}
data = "panel.csv"
dep_variable = "GDP"
blocks = [10, 12]
structure = [
  {{ blocks = [1, 2], count = 1 }},
  {{ blocks = [1], count = 1 }},
  {{ blocks = [2], count = 1 }},
]
"#
    );
    let path = dir.join("fars.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn config(dir: &Path, extra: &str) -> PipelineConfig {
    PipelineConfig::load(fixture(dir, extra)).unwrap()
}

/// Every regular file below `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
