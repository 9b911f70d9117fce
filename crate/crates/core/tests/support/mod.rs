//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use arkg_core::pipeline::{Pipeline, PipelineConfig};
use arkg_core::synth::World;

pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-200")
}

const BUNDLED_FILES: [&str; 6] = [
    "kg.nt",
    "train.jsonl",
    "test.jsonl",
    "entity_map.tsv",
    "categories.tsv",
    "pipeline.conf",
];

/// Copies the bundled fixture into `dir` and loads its config from there, so
/// outputs land under `dir/out`.
pub fn copy_bundled(dir: &Path) -> PipelineConfig {
    fs::create_dir_all(dir).unwrap();
    for f in BUNDLED_FILES {
        fs::copy(bundled_dir().join(f), dir.join(f)).unwrap();
    }
    PipelineConfig::load(&dir.join("pipeline.conf")).unwrap()
}

/// Writes `world` into `dir` and returns the bundled config pointed at it.
pub fn world_config(dir: &Path, world: &World, seed: u64, overrides: &[(&str, &str)]) -> PipelineConfig {
    world.write_dir(dir).unwrap();
    let mut cfg = PipelineConfig::load(&bundled_dir().join("pipeline.conf")).unwrap();
    cfg.seed = seed;
    cfg.paths.kg = dir.join("kg.nt");
    cfg.paths.train = dir.join("train.jsonl");
    cfg.paths.test = dir.join("test.jsonl");
    cfg.paths.entity_map = Some(dir.join("entity_map.tsv"));
    cfg.paths.categories = Some(dir.join("categories.tsv"));
    cfg.paths.out = dir.join("out");
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn run_all(cfg: &PipelineConfig) -> PathBuf {
    let p = Pipeline::new(cfg.clone()).unwrap();
    p.run(false).unwrap();
    p.out_dir().to_path_buf()
}

/// Tab-separated rows, `#` lines skipped.
pub fn tsv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

/// Header-keyed rows of a TSV file with a header line.
pub fn tsv_records(path: &Path) -> Vec<HashMap<String, String>> {
    let rows = tsv(path);
    let (head, body) = rows.split_first().expect("header");
    body.iter()
        .map(|r| {
            assert_eq!(r.len(), head.len(), "{}: ragged row {r:?}", path.display());
            head.iter().cloned().zip(r.iter().cloned()).collect()
        })
        .collect()
}

/// Every file under `root`, relative path → bytes.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut todo = vec![root.to_path_buf()];
    while let Some(d) = todo.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                todo.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
