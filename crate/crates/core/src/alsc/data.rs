use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::two_level::{normalize_aspect, AspectEntityMap, EntityRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    P,
    N,
    O,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::P, Label::N, Label::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        Label::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::P => "P",
            Label::N => "N",
            Label::O => "O",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlscInstance {
    pub id: String,
    pub tokens: Vec<String>,
    /// Half-open token range `[start, end)`.
    pub aspect_span: (usize, usize),
    /// Entity IRI or `"UNK"`.
    pub entity: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f32>>,
}

impl AlscInstance {
    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.aspect_span;
        if self.tokens.is_empty() {
            return Err(Error::Invalid(format!("instance {} has no tokens", self.id)));
        }
        if s >= e || e > self.tokens.len() {
            return Err(Error::Invalid(format!(
                "instance {} has aspect span [{s}, {e}) outside {} tokens",
                self.id,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    pub fn aspect_text(&self) -> String {
        let (s, e) = self.aspect_span;
        self.tokens[s..e.min(self.tokens.len())].join(" ")
    }

    pub fn aspect_key(&self) -> String {
        normalize_aspect(&self.aspect_text())
    }

    /// Resolve through an entity map when given, otherwise by the instance's
    /// own `entity` field.
    pub fn resolve(&self, labels: &HashMap<&str, NodeId>, map: Option<&AspectEntityMap>) -> EntityRef {
        match map {
            Some(m) => m.resolve(&self.aspect_text(), labels),
            None if self.entity == "UNK" => EntityRef::Unk,
            None => labels
                .get(self.entity.as_str())
                .map_or(EntityRef::Unk, |&u| EntityRef::Node(u)),
        }
    }
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<AlscInstance>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: AlscInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(instances: &[AlscInstance], mut out: W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Training examples per normalised aspect string.
pub fn aspect_counts(train: &[AlscInstance]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for inst in train {
        *counts.entry(inst.aspect_key()).or_insert(0) += 1;
    }
    counts
}

/// Disambiguation categories from `aspect<TAB>{cd|id}` lines.
pub fn read_categories<R: BufRead>(input: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (aspect, cat) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected aspect<TAB>category".into(),
        })?;
        let cat = cat.trim();
        if cat != "cd" && cat != "id" {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("unknown category {cat:?}"),
            });
        }
        out.insert(normalize_aspect(aspect), cat.to_string());
    }
    Ok(out)
}
