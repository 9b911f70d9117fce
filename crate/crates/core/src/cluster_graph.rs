//! Weighted cluster graph: one vertex per cluster, an edge wherever at least
//! one KG edge crosses two clusters, weighted by cross-edge density
//! `count(i, j) / (|i| · |j|)`.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};
use crate::louvain::Assignment;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGraph {
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
    weights: Vec<f64>,
    cross_counts: Vec<u64>,
    sizes: Vec<u64>,
}

impl ClusterGraph {
    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn neighbors(&self, c: NodeId) -> &[NodeId] {
        let c = c as usize;
        &self.neighbors[self.offsets[c]..self.offsets[c + 1]]
    }

    pub fn weights(&self, c: NodeId) -> &[f64] {
        let c = c as usize;
        &self.weights[self.offsets[c]..self.offsets[c + 1]]
    }

    pub fn cross_counts(&self, c: NodeId) -> &[u64] {
        let c = c as usize;
        &self.cross_counts[self.offsets[c]..self.offsets[c + 1]]
    }

    pub fn degree(&self, c: NodeId) -> usize {
        self.offsets[c as usize + 1] - self.offsets[c as usize]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.cluster_count() as NodeId)
            .map(|c| self.degree(c))
            .max()
            .unwrap_or(0)
    }

    pub fn weight(&self, i: NodeId, j: NodeId) -> Option<f64> {
        self.neighbors(i).binary_search(&j).ok().map(|k| self.weights(i)[k])
    }

    /// Undirected weighted edges `(i, j, count, weight)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, u64, f64)> + '_ {
        (0..self.cluster_count() as NodeId).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .zip(self.weights(i))
                .zip(self.cross_counts(i))
                .filter(move |((&j, _), _)| j > i)
                .map(move |((&j, &w), &c)| (i, j, c, w))
        })
    }

    /// `cluster_i<TAB>cluster_j<TAB>weight` for `i < j`.
    pub fn write_edges_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, j, _, w) in self.edges() {
            writeln!(out, "{i}\t{j}\t{w}")?;
        }
        Ok(())
    }

    /// `cluster_id<TAB>size`.
    pub fn write_sizes_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (c, s) in self.sizes.iter().enumerate() {
            writeln!(out, "{c}\t{s}")?;
        }
        Ok(())
    }

    /// Rebuild from the two TSV exports. Cross counts are recovered from the
    /// weights and sizes.
    pub fn read_tsv(edges: &str, sizes: &str) -> Result<ClusterGraph> {
        let mut size_list = Vec::new();
        for (i, line) in sizes.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = || Error::Parse {
                line: i + 1,
                message: format!("bad cluster size line {line:?}"),
            };
            let (c, s) = line.split_once('\t').ok_or_else(err)?;
            let (c, s): (usize, u64) = (c.parse().map_err(|_| err())?, s.parse().map_err(|_| err())?);
            if c != size_list.len() {
                return Err(err());
            }
            size_list.push(s);
        }
        let mut pairs = BTreeMap::new();
        for (i, line) in edges.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = || Error::Parse {
                line: i + 1,
                message: format!("bad cluster edge line {line:?}"),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err());
            }
            let a: usize = f[0].parse().map_err(|_| err())?;
            let b: usize = f[1].parse().map_err(|_| err())?;
            let w: f64 = f[2].parse().map_err(|_| err())?;
            if a >= size_list.len() || b >= size_list.len() || a >= b {
                return Err(err());
            }
            let count = (w * (size_list[a] * size_list[b]) as f64).round() as u64;
            pairs.insert((a, b), count);
        }
        Ok(Self::from_counts(&pairs, size_list))
    }

    fn from_counts(pairs: &BTreeMap<(usize, usize), u64>, sizes: Vec<u64>) -> ClusterGraph {
        let k = sizes.len();
        let mut rows: Vec<Vec<(NodeId, u64)>> = vec![Vec::new(); k];
        for (&(a, b), &c) in pairs {
            rows[a].push((b as NodeId, c));
            rows[b].push((a as NodeId, c));
        }
        let mut offsets = vec![0usize];
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        let mut cross_counts = Vec::new();
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            for &(j, c) in row.iter() {
                neighbors.push(j);
                cross_counts.push(c);
                // i and j are symmetric in the product, so W(i,j) == W(j,i) bit for bit
                let denom = (sizes[i.min(j as usize)] * sizes[i.max(j as usize)]) as f64;
                weights.push(c as f64 / denom);
            }
            offsets.push(neighbors.len());
        }
        ClusterGraph {
            offsets,
            neighbors,
            weights,
            cross_counts,
            sizes,
        }
    }
}

pub fn build_cluster_graph(g: &EntityGraph, assignment: &Assignment) -> Result<ClusterGraph> {
    if assignment.len() != g.node_count() {
        return Err(Error::DimMismatch {
            context: "cluster assignment",
            expected: g.node_count(),
            got: assignment.len(),
        });
    }
    let k = assignment.cluster_count();
    let mut sizes = vec![0u64; k];
    for &c in assignment.as_slice() {
        sizes[c] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (u, v) in g.edges() {
        let (a, b) = (assignment.as_slice()[u as usize], assignment.as_slice()[v as usize]);
        if a != b {
            *pairs.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    Ok(ClusterGraph::from_counts(&pairs, sizes))
}

/// Cluster of entity `u` under `assignment`.
pub fn cluster_of(assignment: &Assignment, u: NodeId) -> Result<usize> {
    assignment.cluster_of(u)
}
