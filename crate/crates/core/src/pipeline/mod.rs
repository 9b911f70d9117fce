//! Stage orchestration. Every stage reads its upstream artifacts from the
//! output directory, writes its own, and records a manifest with the config
//! hash, the seed and the content hash of every file it read or wrote.

mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{ExplainSettings, IddSettings, Level, LouvainSettings, Paths, PipelineConfig, Provider, TextSettings};
pub use report::check_provenance;

use crate::error::{Error, Result};
use crate::persist::{read_json, sha256_file, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Cluster,
    ClusterGraph,
    EmbedClusters,
    EmbedSubgraph,
    TrainStatic,
    TrainJoint,
    Idd,
    Explain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Cluster,
        Stage::ClusterGraph,
        Stage::EmbedClusters,
        Stage::EmbedSubgraph,
        Stage::TrainStatic,
        Stage::TrainJoint,
        Stage::Idd,
        Stage::Explain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::ClusterGraph => "cluster-graph",
            Stage::EmbedClusters => "embed-clusters",
            Stage::EmbedSubgraph => "embed-subgraph",
            Stage::TrainStatic => "train-static",
            Stage::TrainJoint => "train-joint",
            Stage::Idd => "idd",
            Stage::Explain => "explain",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Direct upstream stages under `cfg`.
    pub fn requires(self, cfg: &PipelineConfig) -> Vec<Stage> {
        use Stage::*;
        let mut v = match self {
            Ingest => vec![],
            Cluster => vec![Ingest],
            ClusterGraph => vec![Ingest, Cluster],
            EmbedClusters => vec![ClusterGraph],
            EmbedSubgraph => vec![Ingest, Cluster, EmbedClusters],
            TrainStatic => vec![EmbedSubgraph],
            TrainJoint | Idd => vec![Cluster, EmbedClusters, EmbedSubgraph, TrainStatic],
            Explain | Evaluate => vec![Cluster, EmbedClusters, EmbedSubgraph, TrainStatic, TrainJoint],
            Report => vec![EmbedSubgraph, Evaluate],
        };
        if cfg.idd.enabled && matches!(self, Explain | Evaluate | Report) {
            v.push(Idd);
        }
        if cfg.explain.enabled && self == Report {
            v.push(Explain);
        }
        v
    }

    /// Config keys this stage reads; the manifest hash covers only these.
    fn config_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest | Stage::ClusterGraph => &[],
            Stage::Cluster => &["louvain."],
            Stage::EmbedClusters | Stage::EmbedSubgraph => &["sage."],
            Stage::TrainStatic => &["text.", "alsc."],
            Stage::TrainJoint => &["alsc.", "sage."],
            Stage::Idd => &["idd.", "alsc.", "sage."],
            Stage::Explain => &["explain.", "text."],
            Stage::Evaluate | Stage::Report => &["eval."],
        }
    }

    pub fn enabled(self, cfg: &PipelineConfig) -> bool {
        match self {
            Stage::Idd => cfg.idd.enabled,
            Stage::Explain => cfg.explain.enabled,
            _ => true,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Provenance record written next to a stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Artifact or config-key name → sha256 of the file read.
    pub inputs: BTreeMap<String, String>,
    /// Artifact name → sha256 of the file written.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Up to date; skipped during a resumed run.
    Reused,
    Disabled,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
}

/// Per-stage bookkeeping of what was read and written.
pub(crate) struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub out: &'a Path,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    /// A file named by the config, hashed under its key.
    pub fn external(&mut self, key: &str, path: &Path) -> Result<PathBuf> {
        self.inputs.insert(key.to_string(), sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    /// An upstream artifact in the output directory.
    pub fn artifact(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        self.inputs.insert(name.to_string(), sha256_file(&p)?);
        Ok(p)
    }

    pub fn open(&mut self, name: &str) -> Result<BufReader<File>> {
        let p = self.artifact(name)?;
        Ok(BufReader::new(File::open(&p).map_err(Error::io_at(&p))?))
    }

    pub fn read_string(&mut self, name: &str) -> Result<String> {
        let p = self.artifact(name)?;
        std::fs::read_to_string(&p).map_err(Error::io_at(&p))
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&mut self, name: &str) -> Result<T> {
        let p = self.artifact(name)?;
        read_json(&p)
    }

    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.output(name);
        Ok(BufWriter::new(File::create(&p).map_err(Error::io_at(&p))?))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.output(name);
        write_json(&p, value)
    }

    pub fn write_string(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.output(name);
        std::fs::write(&p, text).map_err(Error::io_at(&p))
    }
}

fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("manifests").join(format!("{}.json", stage.name()))
}

pub fn read_manifest(out: &Path, stage: Stage) -> Result<Option<Manifest>> {
    let p = manifest_path(out, stage);
    if !p.exists() {
        return Ok(None);
    }
    read_json(&p).map(Some)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.paths.out
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        self.cfg.hash_of(stage.config_prefixes())
    }

    /// Every stage `stage` depends on, transitively, in pipeline order.
    pub fn ancestors(&self, stage: Stage) -> Vec<Stage> {
        let mut seen = std::collections::BTreeSet::new();
        let mut todo = stage.requires(&self.cfg);
        while let Some(s) = todo.pop() {
            if seen.insert(s) {
                todo.extend(s.requires(&self.cfg));
            }
        }
        seen.into_iter().collect()
    }

    /// Why a completed stage no longer matches its inputs, if it does not.
    fn staleness(&self, stage: Stage, m: &Manifest) -> Result<Option<String>> {
        if m.seed != self.cfg.seed {
            return Ok(Some(format!("seed {} -> {}", m.seed, self.cfg.seed)));
        }
        let want = self.stage_hash(stage);
        if m.config_hash != want {
            return Ok(Some(format!(
                "config hash {} -> {}",
                short(&m.config_hash),
                short(&want)
            )));
        }
        let mut diffs = Vec::new();
        for (name, sha) in m.inputs.iter().chain(&m.outputs) {
            let path = match self.external_path(name) {
                Some(p) => p,
                None => self.out_dir().join(name),
            };
            let now = if path.exists() {
                sha256_file(&path)?
            } else {
                "missing".into()
            };
            if &now != sha {
                diffs.push(format!("{name}: {} -> {}", short(sha), short(&now)));
            }
        }
        Ok((!diffs.is_empty()).then(|| diffs.join("; ")))
    }

    fn external_path(&self, key: &str) -> Option<PathBuf> {
        let p = &self.cfg.paths;
        match key {
            "paths.kg" => Some(p.kg.clone()),
            "paths.train" => Some(p.train.clone()),
            "paths.test" => Some(p.test.clone()),
            "paths.entity_map" => p.entity_map.clone(),
            "paths.categories" => p.categories.clone(),
            "paths.features" => p.features.clone(),
            _ => None,
        }
    }

    /// Refuses to run `stage` unless every upstream stage completed under the
    /// current config and its files are unchanged.
    pub fn check_upstream(&self, stage: Stage) -> Result<()> {
        for up in self.ancestors(stage) {
            let Some(m) = read_manifest(self.out_dir(), up)? else {
                return Err(Error::MissingStage {
                    stage: stage.name(),
                    requires: up.name(),
                });
            };
            if let Some(diff) = self.staleness(up, &m)? {
                return Err(Error::StaleUpstream {
                    stage: stage.name(),
                    upstream: up.name(),
                    diff,
                });
            }
        }
        Ok(())
    }

    /// Runs one stage after checking its upstream.
    pub fn run_stage(&self, stage: Stage) -> Result<Manifest> {
        if !stage.enabled(&self.cfg) {
            return Err(Error::Config {
                key: format!("{}.enabled", stage.name()),
                message: "stage is disabled".into(),
            });
        }
        self.check_upstream(stage)?;
        let out = self.out_dir();
        std::fs::create_dir_all(out.join("manifests")).map_err(Error::io_at(out))?;
        let mut cx = Ctx {
            cfg: &self.cfg,
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        };
        log::info!("stage {stage}");
        stages::run(stage, &mut cx)?;
        let mut outputs = BTreeMap::new();
        for name in &cx.outputs {
            outputs.insert(name.clone(), sha256_file(&out.join(name))?);
        }
        let m = Manifest {
            stage: stage.name().to_string(),
            config_hash: self.stage_hash(stage),
            seed: self.cfg.seed,
            deterministic: self.cfg.deterministic,
            inputs: cx.inputs,
            outputs,
        };
        write_json(&manifest_path(out, stage), &m)?;
        Ok(m)
    }

    /// All enabled stages in order. With `resume`, stages whose manifest
    /// still matches are kept.
    pub fn run(&self, resume: bool) -> Result<Vec<(Stage, Outcome)>> {
        let mut done = Vec::new();
        let mut rerun = false;
        for stage in Stage::ALL {
            if !stage.enabled(&self.cfg) {
                done.push((stage, Outcome::Disabled));
                continue;
            }
            if resume && !rerun {
                if let Some(m) = read_manifest(self.out_dir(), stage)? {
                    if self.staleness(stage, &m)?.is_none() {
                        done.push((stage, Outcome::Reused));
                        continue;
                    }
                }
            }
            rerun = true;
            self.run_stage(stage)?;
            done.push((stage, Outcome::Ran));
        }
        Ok(done)
    }
}

fn short(sha: &str) -> &str {
    &sha[..sha.len().min(12)]
}
