//! Edge-list TSV and the `ARKG` binary snapshot.
//!
//! Snapshot layout (all integers little-endian):
//! `b"ARKG"`, version `u32`, node_count `u64`, `node_count + 1` offsets as
//! `u64`, `offsets[n]` neighbour ids as `u64`, then a `u8` label flag; when
//! set, each node's label follows as a `u32` byte length plus UTF-8 bytes.

use std::io::{BufRead, Read, Write};

use super::{EntityGraph, NodeId};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ARKG";
const VERSION: u32 = 1;

/// Reader for `src<TAB>dst` lines. Same skip semantics as the N-Triples
/// reader: comments, blanks and malformed lines are counted, not fatal.
pub struct TsvEdges<R> {
    input: R,
    buf: String,
    pub skipped: usize,
}

pub fn read_edge_tsv<R: BufRead>(input: R) -> TsvEdges<R> {
    TsvEdges {
        input,
        buf: String::new(),
        skipped: 0,
    }
}

impl<R: BufRead> Iterator for TsvEdges<R> {
    type Item = Result<(String, String)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    return Some(Ok((a.to_owned(), b.to_owned())))
                }
                _ => self.skipped += 1,
            }
        }
    }
}

/// Write each undirected edge once. Unlabelled graphs use `n<id>` names.
pub fn write_edge_tsv<W: Write>(g: &EntityGraph, mut out: W) -> Result<()> {
    let name = |u: NodeId| match g.label(u) {
        Some(l) => l.to_owned(),
        None => format!("n{u}"),
    };
    for (u, v) in g.edges() {
        writeln!(out, "{}\t{}", name(u), name(v))?;
    }
    Ok(())
}

pub fn write_snapshot<W: Write>(g: &EntityGraph, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(g.node_count() as u64).to_le_bytes())?;
    for &o in g.offsets() {
        out.write_all(&o.to_le_bytes())?;
    }
    for &v in g.raw_neighbors() {
        out.write_all(&u64::from(v).to_le_bytes())?;
    }
    match g.labels() {
        Some(labels) => {
            out.write_all(&[1])?;
            for l in labels {
                out.write_all(&(l.len() as u32).to_le_bytes())?;
                out.write_all(l.as_bytes())?;
            }
        }
        None => out.write_all(&[0])?,
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<EntityGraph> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("graph snapshot", "bad magic"));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::format(
            "graph snapshot",
            format!("unsupported version {version}"),
        ));
    }
    let n = read_u64(&mut input)? as usize;
    if n > NodeId::MAX as usize {
        return Err(Error::Capacity(format!("snapshot holds {n} nodes")));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        offsets.push(read_u64(&mut input)?);
    }
    let m = *offsets.last().unwrap() as usize;
    let mut neighbors = Vec::with_capacity(m);
    for _ in 0..m {
        let v = read_u64(&mut input)?;
        if v >= n as u64 {
            return Err(Error::format(
                "graph snapshot",
                format!("neighbour id {v} out of range"),
            ));
        }
        neighbors.push(v as NodeId);
    }
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    let labels = match flag[0] {
        0 => None,
        1 => {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let len = read_u32(&mut input)? as usize;
                let mut bytes = vec![0u8; len];
                input.read_exact(&mut bytes)?;
                labels.push(String::from_utf8(bytes).map_err(|e| Error::format("graph snapshot", e.to_string()))?);
            }
            Some(labels)
        }
        f => return Err(Error::format("graph snapshot", format!("bad label flag {f}"))),
    };
    EntityGraph::from_csr(offsets, neighbors, labels)
}
