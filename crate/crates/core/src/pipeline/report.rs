use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::stages::{dataset, read_entities, tsv_rows, Metrics};
use super::{read_manifest, Ctx, Stage};
use crate::alsc::read_categories;
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::idd::read_flags;
use crate::two_level::{normalize_aspect, Flag};

/// Checks that the manifests of `stages` share one seed and that every
/// artifact a stage read is the one its producer wrote.
pub fn check_provenance(out: &Path, stages: &[Stage]) -> Result<()> {
    let mut manifests = Vec::new();
    for &s in stages {
        let m = read_manifest(out, s)?.ok_or_else(|| Error::Provenance(format!("no manifest for {s}")))?;
        manifests.push(m);
    }
    let mut produced: HashMap<&str, (&str, &str)> = HashMap::new();
    for m in &manifests {
        for (name, sha) in &m.outputs {
            produced.insert(name, (sha, &m.stage));
        }
    }
    if let Some(first) = manifests.first() {
        for m in &manifests {
            if m.seed != first.seed {
                return Err(Error::Provenance(format!(
                    "{} ran with seed {} but {} with seed {}",
                    first.stage, first.seed, m.stage, m.seed
                )));
            }
        }
    }
    for m in &manifests {
        for (name, sha) in &m.inputs {
            if let Some(&(want, by)) = produced.get(name.as_str()) {
                if want != sha {
                    return Err(Error::Provenance(format!(
                        "{} read a {name} that {by} did not write in this run",
                        m.stage
                    )));
                }
            }
        }
    }
    Ok(())
}

fn pct(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{:.2}", 100.0 * x)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

pub(super) fn report(cx: &mut Ctx<'_>) -> Result<()> {
    let done: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|&s| s != Stage::Report && s.enabled(cx.cfg))
        .collect();
    check_provenance(cx.out, &done)?;
    std::fs::create_dir_all(cx.out.join("report")).map_err(Error::io_at(cx.out.join("report")))?;
    let metrics: Metrics = cx.read_json("metrics.json")?;
    let mut text = String::new();

    let explain_rows = if cx.cfg.explain.enabled {
        tsv_rows(cx.open("explain_eval.tsv")?)?
    } else {
        Vec::new()
    };
    let mut t3 = String::from("model\taccuracy\tmacro_f1\n");
    let _ = writeln!(text, "Accuracy and macro-F1 on the test set");
    for (name, m) in &metrics.models {
        let _ = writeln!(t3, "{name}\t{}\t{}", pct(m.accuracy), pct(m.macro_f1));
        let _ = writeln!(
            text,
            "  {name:<12} acc {:>6}  macro-F1 {:>6}",
            pct(m.accuracy),
            pct(m.macro_f1)
        );
    }
    for row in explain_rows.iter().filter(|r| r.len() == 2 && r[0] != "full") {
        let acc: f64 = row[1].parse().unwrap_or(f64::NAN);
        let _ = writeln!(t3, "{}:{}\t{}\tNA", metrics.ar, row[0], pct(acc));
        let _ = writeln!(
            text,
            "  {:<12} acc {:>6}  ({} explanation setting)",
            row[0],
            pct(acc),
            metrics.ar
        );
    }
    cx.write_string("report/table3.tsv", &t3)?;

    let c = metrics.compare;
    let t4 = format!(
        "baseline\t{ar}_correct\t{ar}_incorrect\ncorrect\t{}\t{}\nincorrect\t{}\t{}\n",
        c[0][0],
        c[0][1],
        c[1][0],
        c[1][1],
        ar = metrics.ar
    );
    cx.write_string("report/table4.tsv", &t4)?;
    let _ = writeln!(text, "\nBaseline vs {} correctness", metrics.ar);
    let _ = writeln!(text, "  baseline\\{:<4} correct incorrect", metrics.ar);
    let _ = writeln!(text, "  correct    {:>8} {:>9}", c[0][0], c[0][1]);
    let _ = writeln!(text, "  incorrect  {:>8} {:>9}", c[1][0], c[1][1]);

    let mut t5 = String::from("model\tunk\tcd\tid\n");
    let _ = writeln!(text, "\nError fraction by disambiguation category");
    for (name, m) in &metrics.models {
        let frac = |cat: &str| {
            m.categories
                .iter()
                .find(|s| s.category == cat)
                .map_or(f64::NAN, |s| ratio(s.errors, s.total))
        };
        let (u, d, i) = (frac("unk"), frac("cd"), frac("id"));
        let _ = writeln!(t5, "{name}\t{}\t{}\t{}", pct(u), pct(d), pct(i));
        let _ = writeln!(
            text,
            "  {name:<12} unk {:>6}  cd {:>6}  id {:>6}",
            pct(u),
            pct(d),
            pct(i)
        );
    }
    cx.write_string("report/table5.tsv", &t5)?;

    let mut f2 = String::from("category\taspects\tzeroed\tfraction\n");
    let mut have_fig2 = false;
    if cx.cfg.idd.enabled {
        let verdicts = read_flags(cx.open("idd_flags.tsv")?)?;
        if let Some(p) = cx.cfg.paths.categories.clone() {
            let f = std::fs::File::open(&p).map_err(Error::io_at(&p))?;
            cx.external("paths.categories", &p)?;
            let cats: BTreeMap<String, String> = read_categories(std::io::BufReader::new(f))?
                .into_iter()
                .map(|(k, v)| (normalize_aspect(&k), v))
                .collect();
            let (train, _) = dataset(cx)?;
            let (ents, _) = read_entities(cx)?;
            let mut cat_of: HashMap<NodeId, &str> = HashMap::new();
            for (inst, e) in train.iter().zip(&ents) {
                if let (Some(u), Some(c)) = (e, cats.get(&inst.aspect_key())) {
                    cat_of.insert(*u, c);
                }
            }
            let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for v in &verdicts {
                if let Some(&c) = cat_of.get(&v.entity) {
                    let t = tally.entry(c).or_default();
                    t.0 += 1;
                    t.1 += usize::from(v.flag == Flag::Zeroed);
                }
            }
            let _ = writeln!(
                text,
                "\nZeroed aspects by category (id: recall, cd: false-positive rate)"
            );
            for (cat, (n, z)) in &tally {
                let _ = writeln!(f2, "{cat}\t{n}\t{z}\t{}", ratio(*z, *n));
                let _ = writeln!(text, "  {cat:<3} {z}/{n} = {}", pct(ratio(*z, *n)));
            }
            let (id, cd) = (
                tally.get("id").copied().unwrap_or_default(),
                tally.get("cd").copied().unwrap_or_default(),
            );
            let _ = writeln!(text, "  precision {}", pct(ratio(id.1, id.1 + cd.1)));
            have_fig2 = true;
        }
    }
    if !have_fig2 {
        let _ = writeln!(text, "\nDetection rates omitted: needs idd and a categories file.");
    }
    cx.write_string("report/fig2.tsv", &f2)?;

    let labels: Vec<String> = metrics.models[0].1.buckets.iter().map(|b| b.label.clone()).collect();
    let mut f3 = String::from("bucket\ttotal");
    for (name, _) in &metrics.models {
        let _ = write!(f3, "\t{name}");
    }
    f3.push('\n');
    let _ = writeln!(text, "\nAccuracy by training examples per aspect");
    for (k, label) in labels.iter().enumerate() {
        let total = metrics.models[0].1.buckets[k].total;
        let _ = write!(f3, "{label}\t{total}");
        let _ = write!(text, "  {label:<8} n={total:<5}");
        for (name, m) in &metrics.models {
            let a = m.buckets[k].accuracy();
            let _ = write!(f3, "\t{}", pct(a));
            let _ = write!(text, " {name} {}", pct(a));
        }
        f3.push('\n');
        text.push('\n');
    }
    cx.write_string("report/fig3.tsv", &f3)?;

    let modes = if cx.cfg.explain.enabled {
        tsv_rows(cx.open("modes.tsv")?)?
    } else {
        Vec::new()
    };
    let mut t8 = String::from("dataset\tText\tGraph\tBoth\tNone\ttotal\n");
    match modes.first().filter(|r| r.len() == 6 && r[5] != "0") {
        Some(r) => {
            t8.push_str(&r.join("\t"));
            t8.push('\n');
            let _ = writeln!(text, "\nExplanation modes ({} instances)", r[5]);
            for (name, v) in ["Text", "Graph", "Both", "None"].iter().zip(&r[1..5]) {
                let _ = writeln!(text, "  {name:<5} {v}");
            }
        }
        None => {
            let _ = writeln!(text, "\nMode table omitted: no explanations.");
        }
    }
    cx.write_string("report/table8.tsv", &t8)?;
    let mut out = cx.create("report/report.txt")?;
    out.write_all(text.as_bytes())?;
    Ok(())
}
