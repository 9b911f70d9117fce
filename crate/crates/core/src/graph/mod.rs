//! Immutable CSR storage for the page-links knowledge graph and the
//! subgraphs induced from it.

mod io;
mod ntriples;

pub use io::{read_edge_tsv, read_snapshot, write_edge_tsv, write_snapshot, TsvEdges};
pub use ntriples::{parse_ntriples, NTriplesReader, ParseStats};

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Undirected, unweighted graph in compressed sparse row form.
///
/// Neighbour lists are sorted strictly ascending, symmetric, and free of
/// self-loops. Node ids are dense in `0..node_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityGraph {
    offsets: Vec<u64>,
    neighbors: Vec<NodeId>,
    labels: Option<Vec<String>>,
}

impl Default for EntityGraph {
    fn default() -> Self {
        Self::empty()
    }
}

impl EntityGraph {
    pub fn empty() -> Self {
        EntityGraph {
            offsets: vec![0],
            neighbors: Vec::new(),
            labels: None,
        }
    }

    /// Build from an arbitrary list of undirected edges over `node_count`
    /// dense ids. Self-loops and duplicates are dropped.
    pub fn from_edges(node_count: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        if node_count > NodeId::MAX as usize {
            return Err(Error::Capacity(format!("{node_count} nodes exceed the u32 id space")));
        }
        let mut canon: Vec<(NodeId, NodeId)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a as usize >= node_count || b as usize >= node_count {
                let bad = [a, b].into_iter().filter(|&x| x as usize >= node_count).collect();
                return Err(Error::UnknownNodes(bad));
            }
            if a != b {
                canon.push((a.min(b), a.max(b)));
            }
        }
        canon.sort_unstable();
        canon.dedup();

        let mut degree = vec![0u64; node_count];
        for &(a, b) in &canon {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(node_count + 1);
        offsets.push(0u64);
        for d in &degree {
            let last = *offsets.last().unwrap();
            offsets.push(last + d);
        }
        let mut cursor: Vec<u64> = offsets[..node_count].to_vec();
        let mut neighbors = vec![0 as NodeId; canon.len() * 2];
        // canon is sorted by (a, b); filling a->b first then b->a keeps rows
        // sorted only for one direction, so sort rows afterwards.
        for &(a, b) in &canon {
            neighbors[cursor[a as usize] as usize] = b;
            cursor[a as usize] += 1;
            neighbors[cursor[b as usize] as usize] = a;
            cursor[b as usize] += 1;
        }
        for u in 0..node_count {
            let (s, e) = (offsets[u] as usize, offsets[u + 1] as usize);
            neighbors[s..e].sort_unstable();
        }
        Ok(EntityGraph {
            offsets,
            neighbors,
            labels: None,
        })
    }

    /// Assemble from raw CSR parts, validating every structural invariant.
    pub fn from_csr(offsets: Vec<u64>, neighbors: Vec<NodeId>, labels: Option<Vec<String>>) -> Result<Self> {
        let g = EntityGraph {
            offsets,
            neighbors,
            labels,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.node_count() {
            return Err(Error::DimMismatch {
                context: "graph labels",
                expected: self.node_count(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, u: NodeId) -> &[NodeId] {
        let u = u as usize;
        &self.neighbors[self.offsets[u] as usize..self.offsets[u + 1] as usize]
    }

    pub fn degree(&self, u: NodeId) -> usize {
        let u = u as usize;
        (self.offsets[u + 1] - self.offsets[u]) as usize
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count() as NodeId)
            .map(|u| self.degree(u))
            .max()
            .unwrap_or(0)
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn raw_neighbors(&self) -> &[NodeId] {
        &self.neighbors
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, u: NodeId) -> Option<&str> {
        self.labels.as_ref().map(|l| l[u as usize].as_str())
    }

    /// Label → id lookup table. Built on demand; the graph itself stays lean.
    pub fn label_index(&self) -> HashMap<&str, NodeId> {
        self.labels
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as NodeId))
            .collect()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in id order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.node_count() as NodeId).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if self.offsets.first() != Some(&0) || *self.offsets.last().unwrap() as usize != self.neighbors.len() {
            return Err(Error::format("CSR graph", "offsets do not span the neighbour array"));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::format("CSR graph", "offsets are not monotone"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::format("CSR graph", "label count differs from node count"));
            }
        }
        for u in 0..n as NodeId {
            let row = self.neighbors(u);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format("CSR graph", format!("row {u} not strictly ascending")));
            }
            for &v in row {
                if v as usize >= n {
                    return Err(Error::UnknownNodes(vec![v]));
                }
                if v == u {
                    return Err(Error::format("CSR graph", format!("self-loop on {u}")));
                }
                if !self.has_edge(v, u) {
                    return Err(Error::format("CSR graph", format!("edge {u}-{v} is not symmetric")));
                }
            }
        }
        Ok(())
    }
}

/// Incremental builder that interns IRIs into dense ids.
///
/// Peak memory is O(nodes + edges): one interned string and one map slot per
/// node, one `(u32, u32)` pair per input edge (before dedup), then the CSR.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    index: HashMap<String, u64>,
    labels: Vec<String>,
    edges: Vec<(NodeId, NodeId)>,
    label_bytes: usize,
    budget_bytes: Option<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refuse to grow past an estimated memory footprint.
    pub fn with_budget(budget_bytes: usize) -> Self {
        GraphBuilder {
            budget_bytes: Some(budget_bytes),
            ..Self::default()
        }
    }

    /// Estimated bytes held by the builder right now.
    pub fn estimated_bytes(&self) -> usize {
        // two copies of each label (map key + label vector) plus per-node
        // overhead, one pair per buffered edge
        let nodes = self.labels.len();
        2 * self.label_bytes + nodes * 64 + self.edges.len() * 8
    }

    pub fn intern(&mut self, iri: &str) -> Result<NodeId> {
        if let Some(&id) = self.index.get(iri) {
            return Ok(id as NodeId);
        }
        let id = self.labels.len() as u64;
        if id > NodeId::MAX as u64 {
            return Err(Error::Capacity("more nodes than fit in a u32 id".into()));
        }
        self.index.insert(iri.to_owned(), id);
        self.labels.push(iri.to_owned());
        self.label_bytes += iri.len();
        self.check_budget()?;
        Ok(id as NodeId)
    }

    pub fn add_edge(&mut self, subject: &str, object: &str) -> Result<()> {
        let a = self.intern(subject)?;
        let b = self.intern(object)?;
        if a != b {
            self.edges.push((a.min(b), a.max(b)));
            self.check_budget()?;
        }
        Ok(())
    }

    fn check_budget(&self) -> Result<()> {
        match self.budget_bytes {
            Some(budget) if self.estimated_bytes() > budget => Err(Error::Capacity(format!(
                "graph builder needs ~{} bytes, budget is {budget}",
                self.estimated_bytes()
            ))),
            _ => Ok(()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn build(self) -> Result<EntityGraph> {
        let n = self.labels.len();
        let g = EntityGraph::from_edges(n, &self.edges)?;
        g.with_labels(self.labels)
    }
}

/// Build a labelled graph from `(subject, object)` IRI pairs.
pub fn build_graph<I, S>(edges: I) -> Result<EntityGraph>
where
    I: IntoIterator<Item = Result<(S, S)>>,
    S: AsRef<str>,
{
    let mut builder = GraphBuilder::new();
    for pair in edges {
        let (s, o) = pair?;
        builder.add_edge(s.as_ref(), o.as_ref())?;
    }
    builder.build()
}

/// A graph induced on a subset of a parent graph's nodes, plus the id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub graph: EntityGraph,
    /// `original_ids[local]` is the parent id; sorted ascending.
    pub original_ids: Vec<NodeId>,
}

impl Subgraph {
    pub fn to_original(&self, local: NodeId) -> NodeId {
        self.original_ids[local as usize]
    }

    pub fn to_local(&self, original: NodeId) -> Option<NodeId> {
        self.original_ids.binary_search(&original).ok().map(|i| i as NodeId)
    }
}

/// Induced subgraph on `seeds`. Local ids follow ascending parent id order.
pub fn induce_subgraph(g: &EntityGraph, seeds: &[NodeId]) -> Result<Subgraph> {
    let n = g.node_count();
    let unknown: Vec<NodeId> = seeds.iter().copied().filter(|&s| s as usize >= n).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownNodes(unknown));
    }
    let mut original_ids = seeds.to_vec();
    original_ids.sort_unstable();
    original_ids.dedup();

    let mut local = vec![NodeId::MAX; n];
    for (i, &o) in original_ids.iter().enumerate() {
        local[o as usize] = i as NodeId;
    }
    let mut offsets = Vec::with_capacity(original_ids.len() + 1);
    offsets.push(0u64);
    let mut neighbors = Vec::new();
    for &o in &original_ids {
        // parent rows are ascending and the local map is monotone, so the
        // induced rows come out ascending too
        neighbors.extend(
            g.neighbors(o)
                .iter()
                .map(|&v| local[v as usize])
                .filter(|&v| v != NodeId::MAX),
        );
        offsets.push(neighbors.len() as u64);
    }
    let labels = g
        .labels()
        .map(|l| original_ids.iter().map(|&o| l[o as usize].clone()).collect());
    Ok(Subgraph {
        graph: EntityGraph {
            offsets,
            neighbors,
            labels,
        },
        original_ids,
    })
}

/// Connected component label for every node, numbered in order of each
/// component's smallest node id.
pub fn connected_components(g: &EntityGraph) -> (Vec<u32>, Vec<usize>) {
    let n = g.node_count();
    let mut comp = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let c = sizes.len() as u32;
        comp[start] = c;
        queue.push_back(start as NodeId);
        let mut size = 0usize;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &v in g.neighbors(u) {
                if comp[v as usize] == u32::MAX {
                    comp[v as usize] = c;
                    queue.push_back(v);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Largest connected component (the graph is undirected, so weak and strong
/// connectivity coincide). Ties go to the component holding the smallest id.
pub fn largest_wcc(g: &EntityGraph) -> Subgraph {
    if g.node_count() == 0 {
        return Subgraph {
            graph: EntityGraph::empty(),
            original_ids: Vec::new(),
        };
    }
    let (comp, sizes) = connected_components(g);
    let mut best = 0usize;
    for (c, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = c;
        }
    }
    let seeds: Vec<NodeId> = (0..g.node_count() as NodeId)
        .filter(|&u| comp[u as usize] == best as u32)
        .collect();
    induce_subgraph(g, &seeds).expect("component ids are in range")
}
