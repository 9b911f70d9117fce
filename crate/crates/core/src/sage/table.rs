use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::persist::sha256_hex;
use crate::tape::Mat;

const MAGIC: &[u8; 4] = b"AREM";
const VERSION: u32 = 1;

/// Node id → fixed-length `f32` vector, rows kept in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<NodeId>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TableHeader {
    pub dim: usize,
    pub graph: String,
    pub seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Rows of `m` become ids `0..m.nrows()`.
    pub fn dense(m: &Mat) -> Self {
        EmbeddingTable {
            dim: m.ncols(),
            ids: (0..m.nrows() as NodeId).collect(),
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_parts(dim: usize, ids: Vec<NodeId>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                context: "embedding table data",
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("embedding table", "ids must be strictly increasing"));
        }
        Ok(EmbeddingTable { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows as an `f64` matrix, in id order.
    pub fn to_mat(&self) -> Mat {
        Mat::from_shape_fn((self.len(), self.dim), |(r, c)| self.data[r * self.dim + c] as f64)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W, graph: &str, seed: u64) -> Result<()> {
        writeln!(out, "# dim={} graph={} seed={}", self.dim, graph, seed)?;
        for (i, id) in self.ids.iter().enumerate() {
            write!(out, "{id}")?;
            for v in self.row(i) {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<(Self, TableHeader)> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format("embedding tsv", "empty input"))??;
        let header = parse_header(&first)?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let bad = |m: &str| Error::Parse {
                line: n + 2,
                message: m.to_string(),
            };
            let id: NodeId = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("bad node id"))?;
            let before = data.len();
            for f in fields {
                data.push(f.parse::<f32>().map_err(|_| bad("bad value"))?);
            }
            if data.len() - before != header.dim {
                return Err(bad("row width differs from header dim"));
            }
            ids.push(id);
        }
        Ok((Self::from_parts(header.dim, ids, data)?, header))
    }

    /// `AREM` snapshot; ids are implied by row order.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot as a dense table with ids `0..count`.
    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let mut head = [0u8; 20];
        input
            .read_exact(&mut head)
            .map_err(|_| Error::format("AREM snapshot", "truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(Error::format("AREM snapshot", "bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format("AREM snapshot", format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
        let count = usize::try_from(count).map_err(|_| Error::format("AREM snapshot", "count overflows"))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != count * dim * 4 {
            return Err(Error::format(
                "AREM snapshot",
                format!("expected {} payload bytes, found {}", count * dim * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(dim, (0..count as NodeId).collect(), data)
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to memory");
        buf
    }

    /// Content hash over ids and bit patterns.
    pub fn sha256(&self) -> String {
        let mut buf = self.snapshot_bytes();
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        sha256_hex(&buf)
    }

    /// Copy with row `id` replaced by zeros.
    pub fn with_zeroed(&self, ids: &[NodeId]) -> Self {
        let mut out = self.clone();
        for &id in ids {
            if let Some(i) = self.position(id) {
                out.data[i * self.dim..(i + 1) * self.dim].fill(0.0);
            }
        }
        out
    }
}

fn parse_header(line: &str) -> Result<TableHeader> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::format("embedding tsv", "missing '# dim=' header"))?;
    let mut h = TableHeader::default();
    let mut saw_dim = false;
    for kv in body.split_whitespace() {
        match kv.split_once('=') {
            Some(("dim", v)) => {
                h.dim = v.parse().map_err(|_| Error::format("embedding tsv", "bad dim"))?;
                saw_dim = true;
            }
            Some(("graph", v)) => h.graph = v.to_string(),
            Some(("seed", v)) => h.seed = v.parse().map_err(|_| Error::format("embedding tsv", "bad seed"))?,
            _ => {}
        }
    }
    if !saw_dim {
        return Err(Error::format("embedding tsv", "header lacks dim"));
    }
    Ok(h)
}
