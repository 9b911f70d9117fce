use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alsc::{Buckets, JointConfig};
use crate::error::{Error, Result};
use crate::explain::{ConceptConfig, GraphExplainerConfig, RefineConfig, SignificanceConfig};
use crate::idd::{DetectConfig, ProbeConfig, ZeroRule};
use crate::persist::sha256_hex;
use crate::sage::{SageConfig, TrainConfig, WalkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Provider {
    /// Seeded token-hashing encoder.
    #[default]
    Toy,
    /// Precomputed vectors from `paths.features` or the dataset's `features` fields.
    File,
}

/// Which Louvain level feeds the cluster graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Level {
    #[default]
    Coarsest,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub kg: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub entity_map: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            kg: "kg.nt".into(),
            train: "train.jsonl".into(),
            test: "test.jsonl".into(),
            entity_map: None,
            categories: None,
            features: None,
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextSettings {
    pub provider: Provider,
    pub dim: usize,
}

impl Default for TextSettings {
    fn default() -> Self {
        TextSettings {
            provider: Provider::Toy,
            dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LouvainSettings {
    pub level: Level,
    pub min_gain: f64,
    pub max_levels: usize,
}

impl Default for LouvainSettings {
    fn default() -> Self {
        LouvainSettings {
            level: Level::Coarsest,
            min_gain: 1e-6,
            max_levels: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IddSettings {
    pub enabled: bool,
    pub probe: ProbeConfig,
    pub detect: DetectConfig,
    /// Triplets drawn per aspect entity.
    pub per_aspect: usize,
}

impl Default for IddSettings {
    fn default() -> Self {
        IddSettings {
            enabled: true,
            probe: ProbeConfig::default(),
            detect: DetectConfig::default(),
            per_aspect: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainSettings {
    pub enabled: bool,
    /// Row label in the mode table.
    pub dataset: String,
    pub top_m: usize,
    pub concepts: ConceptConfig,
    pub graph: GraphExplainerConfig,
    pub significance: SignificanceConfig,
    pub refine: RefineConfig,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            enabled: true,
            dataset: "dataset".into(),
            top_m: 3,
            concepts: ConceptConfig::default(),
            graph: GraphExplainerConfig::default(),
            significance: SignificanceConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

/// Everything a pipeline run depends on. Seeds inside the nested configs are
/// ignored; each stage derives its own from `seed`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub paths: Paths,
    pub text: TextSettings,
    pub louvain: LouvainSettings,
    pub sage: SageConfig,
    pub walks: WalkConfig,
    pub sage_train: TrainConfig,
    pub alsc: JointConfig,
    pub buckets: Buckets,
    pub idd: IddSettings,
    pub explain: ExplainSettings,
}

trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Option<Self>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

plain_value!(u64, usize, f64, bool);

impl Value for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
    fn read(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
}

impl Value for String {
    fn show(&self) -> String {
        self.clone()
    }
    fn read(s: &str) -> Option<Self> {
        (!s.is_empty() && !s.contains(char::is_whitespace)).then(|| s.to_string())
    }
}

impl Value for Option<PathBuf> {
    fn show(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
    fn read(s: &str) -> Option<Self> {
        Some((!s.is_empty()).then(|| PathBuf::from(s)))
    }
}

impl Value for Provider {
    fn show(&self) -> String {
        match self {
            Provider::Toy => "toy",
            Provider::File => "file",
        }
        .into()
    }
    fn read(s: &str) -> Option<Self> {
        match s {
            "toy" => Some(Provider::Toy),
            "file" => Some(Provider::File),
            _ => None,
        }
    }
}

impl Value for Level {
    fn show(&self) -> String {
        match self {
            Level::Coarsest => "coarsest".into(),
            Level::Index(l) => l.to_string(),
        }
    }
    fn read(s: &str) -> Option<Self> {
        match s {
            "coarsest" => Some(Level::Coarsest),
            _ => s.parse().ok().map(Level::Index),
        }
    }
}

impl Value for ZeroRule {
    fn show(&self) -> String {
        match self {
            ZeroRule::NegativeMargin => "negative",
            ZeroRule::NonNegativeMargin => "non-negative",
        }
        .into()
    }
    fn read(s: &str) -> Option<Self> {
        match s {
            "negative" => Some(ZeroRule::NegativeMargin),
            "non-negative" => Some(ZeroRule::NonNegativeMargin),
            _ => None,
        }
    }
}

impl Value for [usize; 2] {
    fn show(&self) -> String {
        format!("{},{}", self[0], self[1])
    }
    fn read(s: &str) -> Option<Self> {
        let (a, b) = s.split_once(',')?;
        Some([a.trim().parse().ok()?, b.trim().parse().ok()?])
    }
}

impl Value for Buckets {
    fn show(&self) -> String {
        self.edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> Option<Self> {
        let edges: Vec<usize> = s.split(',').map(|e| e.trim().parse().ok()).collect::<Option<_>>()?;
        edges.windows(2).all(|w| w[0] < w[1]).then_some(Buckets { edges })
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl PipelineConfig {
            /// Every key in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// `(key, value)` pairs in file order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, Value::show(&self.$($field).+))),*]
            }

            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($field).+ = Value::read(value).ok_or_else(|| Error::Config {
                            key: key.to_string(),
                            message: format!("cannot parse {value:?}"),
                        })?;
                    })*
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            message: "unknown key".into(),
                        })
                    }
                }
                Ok(())
            }
        }
    };
}

keys! {
    "seed" => seed;
    "deterministic" => deterministic;
    "paths.kg" => paths.kg;
    "paths.train" => paths.train;
    "paths.test" => paths.test;
    "paths.entity_map" => paths.entity_map;
    "paths.categories" => paths.categories;
    "paths.features" => paths.features;
    "paths.out" => paths.out;
    "text.provider" => text.provider;
    "text.dim" => text.dim;
    "louvain.level" => louvain.level;
    "louvain.min_gain" => louvain.min_gain;
    "louvain.max_levels" => louvain.max_levels;
    "sage.input_dim" => sage.input_dim;
    "sage.hidden_dim" => sage.hidden_dim;
    "sage.output_dim" => sage.output_dim;
    "sage.fanouts" => sage.fanouts;
    "sage.negatives" => sage.negatives;
    "sage.walk_length" => walks.walk_length;
    "sage.walks_per_node" => walks.walks_per_node;
    "sage.window" => walks.window;
    "sage.lr" => sage_train.lr;
    "sage.batch_size" => sage_train.batch_size;
    "sage.epochs" => sage_train.epochs;
    "alsc.lr" => alsc.head.lr;
    "alsc.batch_size" => alsc.head.batch_size;
    "alsc.epochs" => alsc.head.epochs;
    "alsc.alpha1" => alsc.alpha1;
    "alsc.alpha2" => alsc.alpha2;
    "alsc.graph_batch" => alsc.graph_batch;
    "eval.buckets" => buckets;
    "idd.enabled" => idd.enabled;
    "idd.dim_b" => idd.probe.dim_b;
    "idd.lambda" => idd.probe.lambda;
    "idd.lr" => idd.probe.lr;
    "idd.batch_size" => idd.probe.batch_size;
    "idd.epochs" => idd.probe.epochs;
    "idd.n" => idd.detect.n;
    "idd.samples" => idd.detect.samples;
    "idd.zero_rule" => idd.detect.rule;
    "idd.per_aspect" => idd.per_aspect;
    "explain.enabled" => explain.enabled;
    "explain.dataset" => explain.dataset;
    "explain.top_m" => explain.top_m;
    "explain.concepts" => explain.concepts.k;
    "explain.lambda_div" => explain.concepts.lambda_div;
    "explain.concept_lr" => explain.concepts.lr;
    "explain.concept_batch" => explain.concepts.batch_size;
    "explain.concept_epochs" => explain.concepts.epochs;
    "explain.hidden" => explain.graph.hidden;
    "explain.graph_lr" => explain.graph.lr;
    "explain.graph_batch" => explain.graph.batch_size;
    "explain.graph_epochs" => explain.graph.epochs;
    "explain.samples" => explain.graph.samples;
    "explain.temp_start" => explain.graph.temp_start;
    "explain.temp_end" => explain.graph.temp_end;
    "explain.sparsity" => explain.graph.sparsity;
    "explain.budget" => explain.graph.budget;
    "explain.sig_lr" => explain.significance.lr;
    "explain.sig_batch" => explain.significance.batch_size;
    "explain.sig_epochs" => explain.significance.epochs;
    "explain.lambda" => explain.refine.lambda;
    "explain.refine_lr" => explain.refine.lr;
    "explain.refine_batch" => explain.refine.batch_size;
    "explain.refine_epochs" => explain.refine.epochs;
}

impl PipelineConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// repeated keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected key = value".into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "given more than once".into(),
                });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Makes every relative path relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.kg);
        fix(&mut self.paths.train);
        fix(&mut self.paths.test);
        fix(&mut self.paths.out);
        for p in [
            &mut self.paths.entity_map,
            &mut self.paths.categories,
            &mut self.paths.features,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash over the keys whose names start with one of `prefixes`, plus the
    /// seed. Paths enter only through the content hashes recorded in the
    /// manifests, so moving a run does not change it.
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        for (k, v) in self.pairs() {
            if !k.starts_with("paths.") && prefixes.iter().any(|p| k.starts_with(p)) {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        sha256_hex(s.as_bytes())
    }

    /// Hash of every key except the paths.
    pub fn hash(&self) -> String {
        self.hash_of(&[""])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.text.dim == 0 {
            return bad("text.dim", "must be positive");
        }
        self.sage.validate().map_err(|e| Error::Config {
            key: "sage".into(),
            message: e.to_string(),
        })?;
        self.walks.validate().map_err(|e| Error::Config {
            key: "sage".into(),
            message: e.to_string(),
        })?;
        self.alsc.validate().map_err(|e| Error::Config {
            key: "alsc".into(),
            message: e.to_string(),
        })?;
        if self.sage_train.batch_size == 0 {
            return bad("sage.batch_size", "must be positive");
        }
        if !(self.sage_train.lr > 0.0 && self.alsc.head.lr > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if self.idd.enabled && (self.idd.detect.n == 0 || self.idd.detect.samples == 0 || self.idd.per_aspect == 0) {
            return bad("idd", "n, samples and per_aspect must be positive");
        }
        if self.explain.enabled && self.explain.concepts.k < 2 {
            return bad("explain.concepts", "at least two concepts are required");
        }
        if self.explain.graph.temp_start <= 0.0 || self.explain.graph.temp_end <= 0.0 {
            return bad("explain.temp_start", "temperatures must be positive");
        }
        for (key, p) in [
            ("paths.kg", &self.paths.kg),
            ("paths.train", &self.paths.train),
            ("paths.test", &self.paths.test),
        ] {
            if !p.is_file() {
                return bad(key, &format!("{} does not exist", p.display()));
            }
        }
        for (key, p) in [
            ("paths.entity_map", &self.paths.entity_map),
            ("paths.categories", &self.paths.categories),
            ("paths.features", &self.paths.features),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(key, &format!("{} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}
