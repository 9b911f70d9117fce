//! Two-level aspect embeddings `z(u) = [z_C(cluster(u)); z_s(u)]` and the
//! aspect → entity mapping that feeds them.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::{induce_subgraph, EntityGraph, NodeId, Subgraph};
use crate::louvain::Assignment;
use crate::persist::sha256_hex;
use crate::sage::EmbeddingTable;

/// Row id reserved for the shared all-zero UNK vector.
pub const UNK_ID: NodeId = NodeId::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRef {
    Node(NodeId),
    Unk,
}

impl EntityRef {
    pub fn node(self) -> Option<NodeId> {
        match self {
            EntityRef::Node(u) => Some(u),
            EntityRef::Unk => None,
        }
    }
}

/// Lowercase and collapse runs of whitespace.
pub fn normalize_aspect(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Aspect surface string → entity IRI, or `None` for an explicit UNK.
#[derive(Debug, Default)]
pub struct AspectEntityMap {
    entries: BTreeMap<String, Option<String>>,
    misses: AtomicUsize,
}

impl AspectEntityMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, aspect: &str, entity: Option<&str>) -> Result<()> {
        let key = normalize_aspect(aspect);
        let value = entity.map(str::to_string);
        match self.entries.get(&key) {
            Some(existing) if *existing != value => Err(Error::ConflictingAspect {
                aspect: key,
                first: existing.clone().unwrap_or_else(|| "UNK".into()),
                second: value.unwrap_or_else(|| "UNK".into()),
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, value);
                Ok(())
            }
        }
    }

    /// `Some(None)` for an explicit UNK, `None` when the aspect is absent.
    pub fn get(&self, aspect: &str) -> Option<Option<&str>> {
        self.entries.get(&normalize_aspect(aspect)).map(|v| v.as_deref())
    }

    /// Resolve against a label index. Absent aspects and IRIs outside the
    /// graph both come back as UNK; absent aspects bump the miss counter.
    pub fn resolve(&self, aspect: &str, index: &HashMap<&str, NodeId>) -> EntityRef {
        match self.get(aspect) {
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                EntityRef::Unk
            }
            Some(None) => EntityRef::Unk,
            Some(Some(iri)) => index.get(iri).map_or(EntityRef::Unk, |&u| EntityRef::Node(u)),
        }
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_deref()))
    }
}

/// Parse `aspect<TAB>entity_iri_or_UNK` lines.
pub fn load_entity_map<R: BufRead>(input: R) -> Result<AspectEntityMap> {
    let mut map = AspectEntityMap::default();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (aspect, entity) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected aspect<TAB>entity".into(),
        })?;
        let entity = entity.trim();
        map.insert(aspect, (entity != "UNK").then_some(entity))?;
    }
    Ok(map)
}

/// Subgraph induced by the resolved aspect entities; UNK entries are skipped.
pub fn build_aspect_subgraph(kg: &EntityGraph, aspects: &[EntityRef]) -> Result<Subgraph> {
    let seeds: Vec<NodeId> = aspects.iter().filter_map(|e| e.node()).collect();
    if seeds.is_empty() {
        log::warn!("no aspect resolved to a graph entity; aspect subgraph is empty");
    }
    induce_subgraph(kg, &seeds)
}

/// Re-key a table computed on a subgraph by the parent graph's ids.
pub fn subgraph_table(sub: &Subgraph, local: &EmbeddingTable) -> Result<EmbeddingTable> {
    if local.len() != sub.original_ids.len() {
        return Err(Error::DimMismatch {
            context: "subgraph table rows",
            expected: sub.original_ids.len(),
            got: local.len(),
        });
    }
    EmbeddingTable::from_parts(local.dim(), sub.original_ids.clone(), local.data().to_vec())
}

/// `[z_C(cluster_of(u)); z_s(u)]`, or zeros for UNK.
pub fn assemble(zc: &EmbeddingTable, zs: &EmbeddingTable, assignment: &Assignment, u: EntityRef) -> Result<Vec<f32>> {
    let Some(u) = u.node() else {
        return Ok(vec![0.0; zc.dim() + zs.dim()]);
    };
    let c = assignment.cluster_of(u)?;
    let zc_row = zc
        .get(c as NodeId)
        .ok_or_else(|| Error::Invalid(format!("cluster {c} has no embedding")))?;
    let zs_row = zs.get(u).ok_or(Error::MissingSubgraphEntity(u))?;
    let mut out = Vec::with_capacity(zc.dim() + zs.dim());
    out.extend_from_slice(zc_row);
    out.extend_from_slice(zs_row);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Ok,
    Unk,
    Zeroed,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Ok => "OK",
            Flag::Unk => "UNK",
            Flag::Zeroed => "ZEROED",
        }
    }

    pub fn parse(s: &str) -> Option<Flag> {
        match s {
            "OK" => Some(Flag::Ok),
            "UNK" => Some(Flag::Unk),
            "ZEROED" => Some(Flag::Zeroed),
            _ => None,
        }
    }
}

/// Entity id → z(u), with an UNK row and per-row provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLevelTable {
    dim_c: usize,
    dim_s: usize,
    table: EmbeddingTable,
    flags: Vec<Flag>,
}

impl TwoLevelTable {
    pub fn build(
        zc: &EmbeddingTable,
        zs: &EmbeddingTable,
        assignment: &Assignment,
        entities: &[NodeId],
    ) -> Result<Self> {
        let mut ids: Vec<NodeId> = entities.iter().copied().filter(|&u| u != UNK_ID).collect();
        ids.sort_unstable();
        ids.dedup();
        let dim = zc.dim() + zs.dim();
        let mut data = Vec::with_capacity((ids.len() + 1) * dim);
        for &u in &ids {
            data.extend(assemble(zc, zs, assignment, EntityRef::Node(u))?);
        }
        data.extend(std::iter::repeat_n(0.0, dim));
        let mut flags = vec![Flag::Ok; ids.len()];
        flags.push(Flag::Unk);
        ids.push(UNK_ID);
        Ok(TwoLevelTable {
            dim_c: zc.dim(),
            dim_s: zs.dim(),
            table: EmbeddingTable::from_parts(dim, ids, data)?,
            flags,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim_c + self.dim_s
    }

    pub fn dim_c(&self) -> usize {
        self.dim_c
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn flags(&self) -> &[Flag] {
        &self.flags
    }

    pub fn flag(&self, e: EntityRef) -> Option<Flag> {
        let id = e.node().unwrap_or(UNK_ID);
        self.table.position(id).map(|i| self.flags[i])
    }

    pub fn lookup(&self, e: EntityRef) -> Result<&[f32]> {
        let id = e.node().unwrap_or(UNK_ID);
        self.table.get(id).ok_or(Error::MissingSubgraphEntity(id))
    }

    /// Copy with `ids` replaced by zero vectors and flagged `ZEROED`.
    pub fn zeroed(&self, ids: &[NodeId]) -> Self {
        let mut out = self.clone();
        out.table = self.table.with_zeroed(ids);
        for &id in ids {
            if let Some(i) = self.table.position(id) {
                if out.flags[i] == Flag::Ok {
                    out.flags[i] = Flag::Zeroed;
                }
            }
        }
        out
    }

    pub fn write<W1: Write, W2: Write>(&self, snapshot: W1, mut flags: W2) -> Result<()> {
        self.table.write_snapshot(snapshot)?;
        writeln!(flags, "# dim_c={} dim_s={}", self.dim_c, self.dim_s)?;
        for (&id, flag) in self.table.ids().iter().zip(&self.flags) {
            if id == UNK_ID {
                writeln!(flags, "UNK\t{}", flag.as_str())?;
            } else {
                writeln!(flags, "{id}\t{}", flag.as_str())?;
            }
        }
        Ok(())
    }

    pub fn read<R1: Read, R2: BufRead>(snapshot: R1, flags: R2) -> Result<Self> {
        let dense = EmbeddingTable::read_snapshot(snapshot)?;
        let mut dims = None;
        let mut ids = Vec::new();
        let mut fl = Vec::new();
        for (n, line) in flags.lines().enumerate() {
            let line = line?;
            let bad = |m: &str| Error::Parse {
                line: n + 1,
                message: m.to_string(),
            };
            if let Some(h) = line.strip_prefix('#') {
                let mut c = None;
                let mut s = None;
                for kv in h.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("dim_c", v)) => c = v.parse().ok(),
                        Some(("dim_s", v)) => s = v.parse().ok(),
                        _ => {}
                    }
                }
                dims = Some((c.ok_or_else(|| bad("bad dim_c"))?, s.ok_or_else(|| bad("bad dim_s"))?));
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, flag) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>flag"))?;
            ids.push(if id == "UNK" {
                UNK_ID
            } else {
                id.parse().map_err(|_| bad("bad entity id"))?
            });
            fl.push(Flag::parse(flag.trim()).ok_or_else(|| bad("bad flag"))?);
        }
        let (dim_c, dim_s) = dims.ok_or_else(|| Error::format("flags sidecar", "missing dim header"))?;
        if dim_c + dim_s != dense.dim() {
            return Err(Error::DimMismatch {
                context: "two-level table width",
                expected: dim_c + dim_s,
                got: dense.dim(),
            });
        }
        if ids.len() != dense.len() {
            return Err(Error::DimMismatch {
                context: "flags sidecar rows",
                expected: dense.len(),
                got: ids.len(),
            });
        }
        Ok(TwoLevelTable {
            dim_c,
            dim_s,
            table: EmbeddingTable::from_parts(dense.dim(), ids, dense.data().to_vec())?,
            flags: fl,
        })
    }

    pub fn sha256(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, Vec::new()).expect("writing to memory");
        let mut flags = Vec::new();
        self.write(std::io::sink(), &mut flags).expect("writing to memory");
        buf.extend(flags);
        sha256_hex(&buf)
    }
}
