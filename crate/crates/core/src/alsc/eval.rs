use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::data::Label;
use crate::error::{Error, Result};

/// Upper edges of the training-count buckets; a final open bucket follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub edges: Vec<usize>,
}

impl Default for Buckets {
    fn default() -> Self {
        Buckets {
            edges: vec![20, 50, 100],
        }
    }
}

impl Buckets {
    pub fn index(&self, count: usize) -> usize {
        self.edges.iter().position(|&e| count <= e).unwrap_or(self.edges.len())
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut lo = 0;
        for &e in &self.edges {
            out.push(format!("{lo}-{e}"));
            lo = e + 1;
        }
        out.push(format!("{lo}+"));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub gold: Label,
    pub pred: Label,
    /// Training examples sharing this instance's aspect.
    pub train_count: usize,
    /// `unk`, `cd` or `id`, when known.
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub label: String,
    pub total: usize,
    pub correct: usize,
}

impl BucketStat {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub category: String,
    pub total: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; 3],
    /// `confusion[gold][pred]`.
    pub confusion: [[usize; 3]; 3],
    pub buckets: Vec<BucketStat>,
    pub categories: Vec<CategoryStat>,
}

/// Per-class F1 with the convention that a class absent from both gold and
/// predictions scores 0.
pub fn per_class_f1(confusion: &[[usize; 3]; 3]) -> [f64; 3] {
    let mut f1 = [0.0; 3];
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let gold: usize = confusion[c].iter().sum();
        let pred: usize = (0..3).map(|g| confusion[g][c]).sum();
        if gold + pred > 0 {
            f1[c] = 2.0 * tp / (gold + pred) as f64;
        }
    }
    f1
}

pub fn evaluate(items: &[EvalItem], buckets: &Buckets) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    let labels = buckets.labels();
    let mut bstats: Vec<BucketStat> = labels
        .into_iter()
        .map(|label| BucketStat {
            label,
            total: 0,
            correct: 0,
        })
        .collect();
    let mut cats: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for it in items {
        confusion[it.gold.index()][it.pred.index()] += 1;
        let ok = it.gold == it.pred;
        let b = &mut bstats[buckets.index(it.train_count)];
        b.total += 1;
        b.correct += ok as usize;
        if let Some(c) = &it.category {
            let e = cats.entry(c.clone()).or_default();
            e.0 += 1;
            e.1 += (!ok) as usize;
        }
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let f1 = per_class_f1(&confusion);
    Ok(MetricsReport {
        total: items.len(),
        accuracy: correct as f64 / items.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / 3.0,
        per_class_f1: f1,
        confusion,
        buckets: bstats,
        categories: cats
            .into_iter()
            .map(|(category, (total, errors))| CategoryStat {
                category,
                total,
                errors,
            })
            .collect(),
    })
}

/// Baseline vs. AR correctness counts: `[baseline correct, incorrect][AR
/// correct, incorrect]`.
pub fn compare(baseline_correct: &[bool], ar_correct: &[bool]) -> Result<[[usize; 2]; 2]> {
    if baseline_correct.len() != ar_correct.len() {
        return Err(Error::DimMismatch {
            context: "prediction comparison",
            expected: baseline_correct.len(),
            got: ar_correct.len(),
        });
    }
    let mut m = [[0usize; 2]; 2];
    for (&b, &a) in baseline_correct.iter().zip(ar_correct) {
        m[(!b) as usize][(!a) as usize] += 1;
    }
    Ok(m)
}

fn fmt_f(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x:.4}")
    }
}

impl MetricsReport {
    /// `section<TAB>key<TAB>value` rows; three columns throughout.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "section\tkey\tvalue")?;
        writeln!(out, "overall\ttotal\t{}", self.total)?;
        writeln!(out, "overall\taccuracy\t{}", fmt_f(self.accuracy))?;
        writeln!(out, "overall\tmacro_f1\t{}", fmt_f(self.macro_f1))?;
        for l in Label::ALL {
            writeln!(out, "f1\t{}\t{}", l.as_str(), fmt_f(self.per_class_f1[l.index()]))?;
        }
        for g in Label::ALL {
            for p in Label::ALL {
                writeln!(
                    out,
                    "confusion\t{}>{}\t{}",
                    g.as_str(),
                    p.as_str(),
                    self.confusion[g.index()][p.index()]
                )?;
            }
        }
        for b in &self.buckets {
            writeln!(out, "bucket\t{}\t{}/{}", b.label, b.correct, b.total)?;
        }
        for c in &self.categories {
            writeln!(out, "category\t{}\t{}/{}", c.category, c.errors, c.total)?;
        }
        Ok(())
    }

    pub fn render(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{name}: accuracy {} macro-F1 {} (n = {})",
            fmt_f(self.accuracy),
            fmt_f(self.macro_f1),
            self.total
        );
        let _ = writeln!(s, "  gold\\pred      P      N      O");
        for g in Label::ALL {
            let r = self.confusion[g.index()];
            let _ = writeln!(s, "  {:<9} {:>6} {:>6} {:>6}", g.as_str(), r[0], r[1], r[2]);
        }
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "  bucket {:<8} acc {} ({} instances)",
                b.label,
                fmt_f(b.accuracy()),
                b.total
            );
        }
        for c in &self.categories {
            let frac = if c.total == 0 {
                f64::NAN
            } else {
                c.errors as f64 / c.total as f64
            };
            let _ = writeln!(
                s,
                "  category {:<4} error fraction {} ({}/{})",
                c.category,
                fmt_f(frac),
                c.errors,
                c.total
            );
        }
        s
    }
}
