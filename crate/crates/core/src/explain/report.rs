use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Text,
    Graph,
    Both,
    None,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Text, Mode::Graph, Mode::Both, Mode::None];

    pub fn from_labels(s_t: bool, s_g: bool) -> Mode {
        match (s_t, s_g) {
            (true, false) => Mode::Text,
            (false, true) => Mode::Graph,
            (true, true) => Mode::Both,
            (false, false) => Mode::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Text => "Text",
            Mode::Graph => "Graph",
            Mode::Both => "Both",
            Mode::None => "None",
        }
    }
}

/// One line of the explanation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub text_tokens: Vec<String>,
    /// `(entity, entity, probability)` with graph ids.
    pub graph_edges: Vec<(u32, u32, f64)>,
    pub top_entity: Option<String>,
    pub s_t: bool,
    pub s_g: bool,
    #[serde(rename = "S_t")]
    pub sig_t: f64,
    #[serde(rename = "S_g")]
    pub sig_g: f64,
    pub mode: Mode,
}

/// Counts per mode in `Mode::ALL` order.
pub fn mode_table(modes: &[Mode]) -> [usize; 4] {
    let mut out = [0; 4];
    for m in modes {
        out[Mode::ALL.iter().position(|x| x == m).expect("listed")] += 1;
    }
    out
}

pub fn write_modes_tsv<W: Write>(dataset: &str, modes: &[Mode], mut out: W) -> Result<()> {
    let t = mode_table(modes);
    writeln!(out, "dataset\tText\tGraph\tBoth\tNone\ttotal")?;
    writeln!(
        out,
        "{dataset}\t{}\t{}\t{}\t{}\t{}",
        t[0],
        t[1],
        t[2],
        t[3],
        modes.len()
    )?;
    Ok(())
}
