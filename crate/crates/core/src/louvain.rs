//! Hierarchical Louvain modularity clustering.
//!
//! Level 0 of a [`ClusterHierarchy`] is the singleton partition of the input
//! graph; every later level is one local-move + aggregation round of the
//! classic two-phase algorithm (resolution 1).

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};
use crate::rng;

/// Node → cluster id, total over `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    clusters: Vec<usize>,
}

impl Assignment {
    pub fn new(clusters: Vec<usize>) -> Self {
        Assignment { clusters }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.clusters
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_of(&self, u: NodeId) -> Result<usize> {
        self.clusters.get(u as usize).copied().ok_or(Error::Unassigned(u))
    }

    /// Apply a coarser map on top of this one: `node → self[node] → upper[..]`.
    pub fn compose(&self, upper: &Assignment) -> Result<Assignment> {
        self.clusters
            .iter()
            .map(|&c| upper.cluster_of(c as NodeId))
            .collect::<Result<Vec<_>>>()
            .map(Assignment::new)
    }

    /// `# level=.. modularity=..` header then `node_id<TAB>cluster_id`.
    pub fn write_tsv<W: Write>(&self, level: usize, modularity: f64, mut out: W) -> Result<()> {
        writeln!(out, "# level={level} modularity={modularity}")?;
        for (u, c) in self.clusters.iter().enumerate() {
            writeln!(out, "{u}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv(text: &str) -> Result<(Assignment, Option<usize>, Option<f64>)> {
        let mut clusters = Vec::new();
        let (mut level, mut modularity) = (None, None);
        for (i, line) in text.lines().enumerate() {
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("level", v)) => level = v.parse().ok(),
                        Some(("modularity", v)) => modularity = v.parse().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = || Error::Parse {
                line: i + 1,
                message: format!("expected node_id<TAB>cluster_id, got {line:?}"),
            };
            let (u, c) = line.split_once('\t').ok_or_else(parse_err)?;
            let u: usize = u.parse().map_err(|_| parse_err())?;
            let c: usize = c.parse().map_err(|_| parse_err())?;
            if u != clusters.len() {
                return Err(parse_err());
            }
            clusters.push(c);
        }
        Ok((Assignment::new(clusters), level, modularity))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    /// Previous level's cluster id (or node id at level 0) → cluster id here.
    pub assignment: Assignment,
    pub modularity: f64,
    /// Modularity after each local-move sweep that produced this level.
    pub pass_modularity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHierarchy {
    pub levels: Vec<Level>,
}

impl ClusterHierarchy {
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.assignment.cluster_count()).collect()
    }

    /// Composed node → cluster map at `level`.
    pub fn assignment_at(&self, level: usize) -> Result<Assignment> {
        let first = self
            .levels
            .first()
            .ok_or_else(|| Error::Invalid("empty hierarchy".into()))?;
        if level >= self.levels.len() {
            return Err(Error::Invalid(format!(
                "level {level} requested from a {}-level hierarchy",
                self.levels.len()
            )));
        }
        let mut acc = first.assignment.clone();
        for l in &self.levels[1..=level] {
            acc = acc.compose(&l.assignment)?;
        }
        Ok(acc)
    }

    pub fn coarsest_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }
}

/// Node → cluster map for the coarsest level.
pub fn coarsest_assignment(h: &ClusterHierarchy) -> Result<Assignment> {
    h.assignment_at(h.coarsest_level())
}

/// Classic modularity `Q = Σ_c [e_c/m − (d_c/2m)²]` of an unweighted graph.
pub fn modularity(g: &EntityGraph, partition: &[usize]) -> Result<f64> {
    if partition.len() != g.node_count() {
        return Err(Error::DimMismatch {
            context: "modularity partition",
            expected: g.node_count(),
            got: partition.len(),
        });
    }
    let m = g.edge_count() as f64;
    if m == 0.0 {
        return Err(Error::Edgeless("modularity"));
    }
    let k = partition.iter().max().map_or(0, |c| c + 1);
    let mut internal = vec![0u64; k];
    let mut degree = vec![0u64; k];
    for u in 0..g.node_count() as NodeId {
        degree[partition[u as usize]] += g.degree(u) as u64;
    }
    for (u, v) in g.edges() {
        let c = partition[u as usize];
        if c == partition[v as usize] {
            internal[c] += 1;
        }
    }
    Ok(internal
        .iter()
        .zip(&degree)
        .map(|(&e, &d)| e as f64 / m - (d as f64 / (2.0 * m)).powi(2))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LouvainConfig {
    pub min_gain: f64,
    pub max_levels: usize,
    pub seed: u64,
}

impl Default for LouvainConfig {
    fn default() -> Self {
        LouvainConfig {
            min_gain: 1e-6,
            max_levels: 10,
            seed: 0,
        }
    }
}

/// Weighted working graph used between aggregation rounds.
struct WorkGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    strength: Vec<f64>,
    two_m: f64,
}

impl WorkGraph {
    fn from_entity(g: &EntityGraph) -> Self {
        let adj: Vec<Vec<(usize, f64)>> = (0..g.node_count() as NodeId)
            .map(|u| g.neighbors(u).iter().map(|&v| (v as usize, 1.0)).collect())
            .collect();
        Self::finish(adj, vec![0.0; g.node_count()])
    }

    fn finish(adj: Vec<Vec<(usize, f64)>>, self_loops: Vec<f64>) -> Self {
        let strength: Vec<f64> = adj
            .iter()
            .zip(&self_loops)
            .map(|(row, &l)| row.iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * l)
            .collect();
        let two_m = strength.iter().sum();
        WorkGraph {
            adj,
            self_loops,
            strength,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, community: &[usize]) -> f64 {
        let k = community.iter().max().map_or(0, |c| c + 1);
        let mut inside = vec![0.0; k];
        let mut total = vec![0.0; k];
        for i in 0..self.len() {
            let c = community[i];
            total[c] += self.strength[i];
            inside[c] += 2.0 * self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if community[j] == c {
                    inside[c] += w;
                }
            }
        }
        inside
            .iter()
            .zip(&total)
            .map(|(&i, &t)| i / self.two_m - (t / self.two_m).powi(2))
            .sum()
    }

    /// Local-move phase. Returns the community vector and the per-sweep
    /// modularity trace.
    fn local_moves(&self, min_gain: f64, rng: &mut rng::Rng) -> (Vec<usize>, Vec<f64>) {
        let n = self.len();
        let mut community: Vec<usize> = (0..n).collect();
        let mut total = self.strength.clone();
        let mut neigh_weight = vec![0.0f64; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        let mut q = self.modularity(&community);
        let mut trace = Vec::new();

        loop {
            order.shuffle(rng);
            let mut moved = false;
            for &i in &order {
                let ci = community[i];
                let ki = self.strength[i];
                for &(j, w) in &self.adj[i] {
                    let cj = community[j];
                    if neigh_weight[cj] == 0.0 {
                        touched.push(cj);
                    }
                    neigh_weight[cj] += w;
                }
                total[ci] -= ki;
                let gain = |c: usize, kin: f64| kin - total[c] * ki / self.two_m;
                let mut best = ci;
                let mut best_gain = gain(ci, neigh_weight[ci]);
                for &c in &touched {
                    let g = gain(c, neigh_weight[c]);
                    if g > best_gain {
                        best_gain = g;
                        best = c;
                    }
                }
                total[best] += ki;
                if best != ci {
                    community[i] = best;
                    moved = true;
                }
                for &c in &touched {
                    neigh_weight[c] = 0.0;
                }
                touched.clear();
            }
            let new_q = self.modularity(&community);
            debug_assert!(new_q >= q - 1e-12, "modularity fell from {q} to {new_q}");
            trace.push(new_q);
            let improvement = new_q - q;
            q = new_q;
            if !moved || improvement < min_gain {
                break;
            }
        }
        (renumber(&community), trace)
    }

    fn aggregate(&self, community: &[usize]) -> WorkGraph {
        let k = community.iter().max().map_or(0, |c| c + 1);
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        let mut loops = vec![0.0; k];
        for i in 0..self.len() {
            let ci = community[i];
            loops[ci] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                let cj = community[j];
                if ci == cj {
                    // each undirected edge is visited from both ends
                    loops[ci] += w / 2.0;
                } else {
                    *rows[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        let adj = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        WorkGraph::finish(adj, loops)
    }
}

/// Dense ids in order of first appearance.
fn renumber(community: &[usize]) -> Vec<usize> {
    let mut map = vec![usize::MAX; community.len().max(1)];
    let mut next = 0;
    community
        .iter()
        .map(|&c| {
            if map[c] == usize::MAX {
                map[c] = next;
                next += 1;
            }
            map[c]
        })
        .collect()
}

pub fn louvain_cluster(g: &EntityGraph, cfg: &LouvainConfig) -> Result<ClusterHierarchy> {
    if g.edge_count() == 0 {
        return Err(Error::Edgeless("Louvain clustering"));
    }
    let mut rng = rng::stream(cfg.seed, "louvain");
    let mut work = WorkGraph::from_entity(g);
    let identity: Vec<usize> = (0..g.node_count()).collect();
    let mut levels = vec![Level {
        modularity: work.modularity(&identity),
        assignment: Assignment::new(identity),
        pass_modularity: Vec::new(),
    }];
    for _ in 0..cfg.max_levels {
        let (community, trace) = work.local_moves(cfg.min_gain, &mut rng);
        let k = community.iter().max().map_or(0, |c| c + 1);
        if k == work.len() {
            break;
        }
        let next = work.aggregate(&community);
        let singletons: Vec<usize> = (0..next.len()).collect();
        let q = next.modularity(&singletons);
        levels.push(Level {
            assignment: Assignment::new(community),
            modularity: q,
            pass_modularity: trace,
        });
        work = next;
        if k == 1 {
            break;
        }
    }
    Ok(ClusterHierarchy { levels })
}
