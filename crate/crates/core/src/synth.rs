//! Random graph generators used by fixtures, tests and benchmarks.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::alsc::{write_jsonl, AlscInstance, Label};
use crate::error::Result;
use crate::graph::{EntityGraph, NodeId};
use crate::rng::{self, Rng};

/// Stochastic block model; returns the graph and each node's block.
pub fn sbm(sizes: &[usize], p_in: f64, p_out: f64, rng: &mut Rng) -> Result<(EntityGraph, Vec<usize>)> {
    let blocks: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = blocks.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if blocks[u] == blocks[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u as NodeId, v as NodeId));
            }
        }
    }
    Ok((EntityGraph::from_edges(n, &edges)?, blocks))
}

/// `k` cliques of `size` nodes joined by `noise` random inter-clique edges.
pub fn planted_cliques(k: usize, size: usize, noise: usize, rng: &mut Rng) -> Result<(EntityGraph, Vec<usize>)> {
    let n = k * size;
    let labels: Vec<usize> = (0..n).map(|u| u / size).collect();
    let mut edges = BTreeSet::new();
    for c in 0..k {
        for a in 0..size {
            for b in a + 1..size {
                edges.insert(((c * size + a) as NodeId, (c * size + b) as NodeId));
            }
        }
    }
    let mut added = 0;
    while added < noise && k > 1 {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if labels[u] != labels[v] && edges.insert((u.min(v) as NodeId, u.max(v) as NodeId)) {
            added += 1;
        }
    }
    let edges: Vec<_> = edges.into_iter().collect();
    Ok((EntityGraph::from_edges(n, &edges)?, labels))
}

pub fn erdos_renyi(n: usize, p: f64, rng: &mut Rng) -> Result<EntityGraph> {
    Ok(sbm(&[n], p, 0.0, rng)?.0)
}

/// A random spanning tree plus `extra` random edges; always connected.
pub fn random_connected(n: usize, extra: usize, rng: &mut Rng) -> Result<EntityGraph> {
    let mut order: Vec<NodeId> = (0..n as NodeId).collect();
    order.shuffle(rng);
    let mut edges = BTreeSet::new();
    for i in 1..n {
        let parent = order[rng.random_range(0..i)];
        let u = order[i];
        edges.insert((u.min(parent), u.max(parent)));
    }
    let max_edges = n * n.saturating_sub(1) / 2;
    while edges.len() < (n.saturating_sub(1) + extra).min(max_edges) {
        let u = rng.random_range(0..n) as NodeId;
        let v = rng.random_range(0..n) as NodeId;
        if u != v {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let edges: Vec<_> = edges.into_iter().collect();
    EntityGraph::from_edges(n, &edges)
}

/// Held-out link prediction split: a fraction of edges removed from the
/// training graph, plus as many sampled non-edges of the full graph.
pub struct LinkSplit {
    pub train: EntityGraph,
    pub held_out: Vec<(NodeId, NodeId)>,
    pub non_edges: Vec<(NodeId, NodeId)>,
}

pub fn link_split(g: &EntityGraph, fraction: f64, rng: &mut Rng) -> Result<LinkSplit> {
    let mut edges: Vec<_> = g.edges().collect();
    edges.shuffle(rng);
    let k = ((edges.len() as f64) * fraction).round() as usize;
    let held_out = edges[..k].to_vec();
    let train = EntityGraph::from_edges(g.node_count(), &edges[k..])?;
    let n = g.node_count();
    let mut non_edges = BTreeSet::new();
    let max_non = n * n.saturating_sub(1) / 2 - g.edge_count();
    while non_edges.len() < k.min(max_non) {
        let u = rng.random_range(0..n) as NodeId;
        let v = rng.random_range(0..n) as NodeId;
        if u != v && !g.has_edge(u, v) {
            non_edges.insert((u.min(v), u.max(v)));
        }
    }
    Ok(LinkSplit {
        train,
        held_out,
        non_edges: non_edges.into_iter().collect(),
    })
}

/// Settings for a synthetic aspect-sentiment world over a community graph.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub communities: usize,
    pub community_size: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub aspects_per_community: usize,
    pub train_instances: usize,
    pub test_instances: usize,
    /// Zipf exponent of aspect frequencies.
    pub zipf: f64,
    /// Fraction of instances whose label comes from a sentiment word.
    pub text_signal: f64,
    /// Community topic words per sentence.
    pub topic_words: usize,
    pub filler_words: usize,
    /// Fraction of aspects mapped to an entity in another community.
    pub corrupted: f64,
    /// Fraction of aspects mapped to UNK.
    pub unk: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            communities: 3,
            community_size: 66,
            p_in: 0.3,
            p_out: 0.005,
            aspects_per_community: 40,
            train_instances: 2000,
            test_instances: 600,
            zipf: 1.1,
            text_signal: 0.3,
            topic_words: 0,
            filler_words: 5,
            corrupted: 0.0,
            unk: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectInfo {
    pub name: String,
    pub true_entity: NodeId,
    /// Entity the dataset claims, `None` for UNK.
    pub mapped: Option<NodeId>,
    pub corrupted: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub kg: EntityGraph,
    pub community: Vec<usize>,
    pub polarity: Vec<Label>,
    pub aspects: Vec<AspectInfo>,
    pub train: Vec<AlscInstance>,
    pub test: Vec<AlscInstance>,
}

pub const IRI_PREFIX: &str = "http://arkg.example/resource/";

pub fn entity_iri(u: NodeId) -> String {
    format!("{IRI_PREFIX}e{u}")
}

const FILLER: [&str; 16] = [
    "the", "a", "was", "is", "this", "that", "it", "really", "with", "and", "for", "of", "so", "very", "my", "we",
];

pub fn sentiment_word(l: Label) -> &'static str {
    match l {
        Label::P => "great",
        Label::N => "awful",
        Label::O => "okay",
    }
}

const TOPIC_VOCAB: usize = 5;

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<World> {
        let mut r = rng::stream(cfg.seed, "world.graph");
        let sizes = vec![cfg.community_size; cfg.communities];
        let (g, community) = sbm(&sizes, cfg.p_in, cfg.p_out, &mut r)?;
        let labels: Vec<String> = (0..g.node_count() as NodeId).map(entity_iri).collect();
        let kg = g.with_labels(labels)?;
        let polarity: Vec<Label> = (0..cfg.communities).map(|c| Label::ALL[c % 3]).collect();

        let mut r = rng::stream(cfg.seed, "world.aspects");
        let mut chosen: Vec<NodeId> = Vec::new();
        let mut unused: Vec<Vec<NodeId>> = Vec::new();
        for c in 0..cfg.communities {
            let mut members: Vec<NodeId> = (0..kg.node_count() as NodeId)
                .filter(|&u| community[u as usize] == c)
                .collect();
            members.shuffle(&mut r);
            let k = cfg.aspects_per_community.min(members.len());
            chosen.extend_from_slice(&members[..k]);
            unused.push(members[k..].to_vec());
        }
        // Frequency rank is independent of community.
        chosen.shuffle(&mut r);
        let n_aspects = chosen.len();
        let n_corrupt = (cfg.corrupted * n_aspects as f64).round() as usize;
        let n_unk = (cfg.unk * n_aspects as f64).round() as usize;
        let mut roles: Vec<usize> = (0..n_aspects).collect();
        roles.shuffle(&mut r);
        let mut aspects: Vec<AspectInfo> = chosen
            .iter()
            .enumerate()
            .map(|(i, &u)| AspectInfo {
                name: format!("asp{i}"),
                true_entity: u,
                mapped: Some(u),
                corrupted: false,
            })
            .collect();
        for &i in &roles[..n_corrupt.min(n_aspects)] {
            let home = community[aspects[i].true_entity as usize];
            let others: Vec<usize> = (0..cfg.communities)
                .filter(|&c| c != home && !unused[c].is_empty())
                .collect();
            if let Some(&c) = others.choose(&mut r) {
                let v = *unused[c].choose(&mut r).unwrap();
                aspects[i].mapped = Some(v);
                aspects[i].corrupted = true;
            }
        }
        for &i in roles.iter().skip(n_corrupt).take(n_unk) {
            aspects[i].mapped = None;
        }

        let weights: Vec<f64> = (0..n_aspects).map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf)).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| crate::Error::Invalid(e.to_string()))?;
        let make = |prefix: &str, count: usize, stream: &str| -> Vec<AlscInstance> {
            let mut r = rng::stream(cfg.seed, stream);
            (0..count)
                .map(|k| {
                    let a = &aspects[dist.sample(&mut r)];
                    let home = community[a.true_entity as usize];
                    let mut words: Vec<String> = (0..cfg.filler_words)
                        .map(|_| FILLER[r.random_range(0..FILLER.len())].to_string())
                        .collect();
                    for _ in 0..cfg.topic_words {
                        words.push(format!("topic{home}w{}", r.random_range(0..TOPIC_VOCAB)));
                    }
                    let label = if r.random::<f64>() < cfg.text_signal {
                        let l = Label::ALL[r.random_range(0..3)];
                        words.push(sentiment_word(l).to_string());
                        l
                    } else {
                        polarity[home]
                    };
                    words.shuffle(&mut r);
                    let pos = r.random_range(0..=words.len());
                    words.insert(pos, a.name.clone());
                    AlscInstance {
                        id: format!("{prefix}-{k}"),
                        tokens: words,
                        aspect_span: (pos, pos + 1),
                        entity: a.mapped.map_or_else(|| "UNK".to_string(), entity_iri),
                        label,
                        features: None,
                    }
                })
                .collect()
        };
        let train = make("train", cfg.train_instances, "world.train");
        let test = make("test", cfg.test_instances, "world.test");
        Ok(World {
            config: cfg.clone(),
            kg,
            community,
            polarity,
            aspects,
            train,
            test,
        })
    }

    pub fn aspect(&self, name: &str) -> Option<&AspectInfo> {
        name.strip_prefix("asp")
            .and_then(|i| i.parse::<usize>().ok())
            .and_then(|i| self.aspects.get(i))
            .filter(|a| a.name == name)
    }

    pub fn entity_map_tsv(&self) -> String {
        self.aspects
            .iter()
            .map(|a| {
                format!(
                    "{}\t{}\n",
                    a.name,
                    a.mapped.map_or_else(|| "UNK".to_string(), entity_iri)
                )
            })
            .collect()
    }

    pub fn categories_tsv(&self) -> String {
        self.aspects
            .iter()
            .filter(|a| a.mapped.is_some())
            .map(|a| format!("{}\t{}\n", a.name, if a.corrupted { "id" } else { "cd" }))
            .collect()
    }

    pub fn ntriples(&self) -> String {
        let mut s = String::new();
        for (u, v) in self.kg.edges() {
            s.push_str(&format!(
                "<{}> <{IRI_PREFIX}link> <{}> .\n",
                entity_iri(u),
                entity_iri(v)
            ));
        }
        s
    }

    /// Writes `kg.nt`, `train.jsonl`, `test.jsonl`, `entity_map.tsv` and
    /// `categories.tsv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(crate::Error::io_at(dir))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(crate::Error::io_at(&p))
        };
        put("kg.nt", self.ntriples().as_bytes())?;
        let mut buf = Vec::new();
        write_jsonl(&self.train, &mut buf)?;
        put("train.jsonl", &buf)?;
        buf.clear();
        write_jsonl(&self.test, &mut buf)?;
        put("test.jsonl", &buf)?;
        put("entity_map.tsv", self.entity_map_tsv().as_bytes())?;
        put("categories.tsv", self.categories_tsv().as_bytes())?;
        Ok(())
    }
}
