use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use super::config::{Level, Provider};
use super::{report, Ctx, Stage};
use crate::alsc::{
    aspect_counts, compare, evaluate, joint_features, read_categories, read_jsonl, train_joint, train_static,
    write_arft, AlscInstance, EvalItem, FileProvider, Head, JointConfig, JointInputs, JointTrace, Label, MetricsReport,
    TextProvider, ToyEncoder,
};
use crate::cluster_graph::{build_cluster_graph, ClusterGraph};
use crate::error::{Error, Result};
use crate::explain::{
    extract_subgraph, extract_text_explanation, joint_refine, perturb_and_label_all, train_concepts,
    train_graph_explainer, train_significance, write_modes_tsv, ExplainData, ExplanationRecord, Frozen, GraphExplainer,
    GraphExplanation, Mode, PerturbInput,
};
use crate::graph::{self, build_graph, largest_wcc, parse_ntriples, EntityGraph, NodeId, Subgraph};
use crate::idd::{
    build_triplets, detect_and_correct, mean_text_embeddings, read_flags, train_probe, DetectConfig, ProbeConfig,
};
use crate::louvain::{louvain_cluster, Assignment, LouvainConfig};
use crate::rng::derive_seed;
use crate::sage::{train_embeddings, EmbeddingTable, SageModel, TrainConfig, WalkConfig};
use crate::tape::Mat;
use crate::two_level::{build_aspect_subgraph, load_entity_map, subgraph_table, EntityRef, Flag, TwoLevelTable};

pub(super) fn run(stage: Stage, cx: &mut Ctx<'_>) -> Result<()> {
    match stage {
        Stage::Ingest => ingest(cx),
        Stage::Cluster => cluster(cx),
        Stage::ClusterGraph => cluster_graph(cx),
        Stage::EmbedClusters => embed_clusters(cx),
        Stage::EmbedSubgraph => embed_subgraph(cx),
        Stage::TrainStatic => train_static_stage(cx),
        Stage::TrainJoint => train_joint_stage(cx),
        Stage::Idd => idd(cx),
        Stage::Explain => explain(cx),
        Stage::Evaluate => evaluate_stage(cx),
        Stage::Report => report::report(cx),
    }
}

fn seed(cx: &Ctx<'_>, name: &str) -> u64 {
    derive_seed(cx.cfg.seed, name)
}

fn open_external(cx: &mut Ctx<'_>, key: &str, path: &std::path::Path) -> Result<std::io::BufReader<std::fs::File>> {
    let p = cx.external(key, path)?;
    Ok(std::io::BufReader::new(
        std::fs::File::open(&p).map_err(Error::io_at(&p))?,
    ))
}

pub(super) fn dataset(cx: &mut Ctx<'_>) -> Result<(Vec<AlscInstance>, Vec<AlscInstance>)> {
    let (tr, te) = (cx.cfg.paths.train.clone(), cx.cfg.paths.test.clone());
    let train = read_jsonl(open_external(cx, "paths.train", &tr)?)?;
    let test = read_jsonl(open_external(cx, "paths.test", &te)?)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("train and test sets must be non-empty".into()));
    }
    Ok((train, test))
}

fn read_graph(cx: &mut Ctx<'_>, name: &str) -> Result<EntityGraph> {
    graph::read_snapshot(cx.open(name)?)
}

fn read_table(cx: &mut Ctx<'_>, name: &str) -> Result<EmbeddingTable> {
    EmbeddingTable::read_snapshot(cx.open(name)?)
}

fn read_assignment(cx: &mut Ctx<'_>) -> Result<Assignment> {
    Ok(Assignment::read_tsv(&cx.read_string("assignment.tsv")?)?.0)
}

fn read_subgraph(cx: &mut Ctx<'_>) -> Result<Subgraph> {
    let graph = read_graph(cx, "subgraph.arkg")?;
    let text = cx.read_string("subgraph_ids.tsv")?;
    let mut original_ids = Vec::with_capacity(graph.node_count());
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::Parse {
            line: n + 1,
            message: "expected local<TAB>graph id".into(),
        };
        let (l, g) = line.split_once('\t').ok_or_else(bad)?;
        if l.parse::<usize>().map_err(|_| bad())? != original_ids.len() {
            return Err(bad());
        }
        original_ids.push(g.parse::<NodeId>().map_err(|_| bad())?);
    }
    if original_ids.len() != graph.node_count() {
        return Err(Error::format("subgraph ids", "row count differs from the subgraph"));
    }
    Ok(Subgraph { graph, original_ids })
}

type EntityColumns = (Vec<Option<NodeId>>, Vec<Option<NodeId>>);

/// Graph ids per instance, `None` for UNK, as `(train, test)`.
pub(super) fn read_entities(cx: &mut Ctx<'_>) -> Result<EntityColumns> {
    let text = cx.read_string("entities.tsv")?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse {
            line: n + 1,
            message: "expected split<TAB>id<TAB>entity".into(),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        let e = if f[2] == "UNK" {
            None
        } else {
            Some(f[2].parse().map_err(|_| bad())?)
        };
        match f[0] {
            "train" => train.push(e),
            "test" => test.push(e),
            _ => return Err(bad()),
        }
    }
    Ok((train, test))
}

fn provider(cx: &mut Ctx<'_>, train: &[AlscInstance], test: &[AlscInstance]) -> Result<Box<dyn TextProvider>> {
    match cx.cfg.text.provider {
        Provider::Toy => Ok(Box::new(ToyEncoder::new(cx.cfg.text.dim, seed(cx, "text")))),
        Provider::File => match cx.cfg.paths.features.clone() {
            Some(p) => Ok(Box::new(FileProvider::from_arft(open_external(
                cx,
                "paths.features",
                &p,
            )?)?)),
            None => Ok(Box::new(FileProvider::from_instances(train.iter().chain(test))?)),
        },
    }
}

/// Text features rounded to `f32`, the precision they are stored at.
fn round_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn rows_to_mat(rows: &[Vec<f32>], dim: usize) -> Mat {
    Mat::from_shape_fn((rows.len(), dim), |(r, c)| rows[r][c] as f64)
}

fn read_text(cx: &mut Ctx<'_>, name: &str, insts: &[AlscInstance]) -> Result<Mat> {
    let p = FileProvider::from_arft(cx.open(name)?)?;
    let rows: Vec<Vec<f32>> = insts
        .iter()
        .map(|i| p.features(i).map(|f| round_f32(&f.h)))
        .collect::<Result<_>>()?;
    Ok(rows_to_mat(&rows, p.dim()))
}

fn labels(insts: &[AlscInstance]) -> Vec<usize> {
    insts.iter().map(|i| i.label.index()).collect()
}

fn zeroed_entities(cx: &mut Ctx<'_>) -> Result<HashSet<NodeId>> {
    if !cx.cfg.idd.enabled {
        return Ok(HashSet::new());
    }
    let verdicts = read_flags(cx.open("idd_flags.tsv")?)?;
    Ok(verdicts
        .into_iter()
        .filter(|v| v.flag == Flag::Zeroed)
        .map(|v| v.entity)
        .collect())
}

/// Cluster rows and local subgraph ids per instance; UNK and zeroed
/// entities get a zero `z_C` row and no subgraph node.
fn instance_graph_inputs(
    ents: &[Option<NodeId>],
    zeroed: &HashSet<NodeId>,
    a: &Assignment,
    zc: &EmbeddingTable,
    sub: &Subgraph,
) -> Result<(Mat, Vec<Option<NodeId>>)> {
    let mut rows = Mat::zeros((ents.len(), zc.dim()));
    let mut local = Vec::with_capacity(ents.len());
    for (r, e) in ents.iter().enumerate() {
        let Some(u) = e.filter(|u| !zeroed.contains(u)) else {
            local.push(None);
            continue;
        };
        let c = a.cluster_of(u)?;
        let row = zc.get(c as NodeId).ok_or(Error::Unassigned(c as u32))?;
        for (k, &v) in row.iter().enumerate() {
            rows[[r, k]] = v as f64;
        }
        local.push(Some(sub.to_local(u).ok_or(Error::MissingSubgraphEntity(u))?));
    }
    Ok((rows, local))
}

fn ingest(cx: &mut Ctx<'_>) -> Result<()> {
    let path = cx.cfg.paths.kg.clone();
    let mut reader = parse_ntriples(open_external(cx, "paths.kg", &path)?);
    let full = build_graph(reader.by_ref())?;
    let stats = reader.stats();
    if full.edge_count() == 0 {
        return Err(Error::Edgeless("the entity graph"));
    }
    let wcc = largest_wcc(&full);
    graph::write_snapshot(&wcc.graph, cx.create("kg.arkg")?)?;
    let mut out = cx.create("ingest.tsv")?;
    writeln!(out, "key\tvalue")?;
    writeln!(out, "lines\t{}", stats.lines)?;
    writeln!(out, "triples\t{}", stats.triples)?;
    writeln!(out, "literals_skipped\t{}", stats.literals_skipped)?;
    writeln!(out, "malformed_skipped\t{}", stats.malformed_skipped)?;
    writeln!(out, "nodes\t{}", full.node_count())?;
    writeln!(out, "edges\t{}", full.edge_count())?;
    writeln!(out, "wcc_nodes\t{}", wcc.graph.node_count())?;
    writeln!(out, "wcc_edges\t{}", wcc.graph.edge_count())?;
    Ok(())
}

fn cluster(cx: &mut Ctx<'_>) -> Result<()> {
    let kg = read_graph(cx, "kg.arkg")?;
    let lc = LouvainConfig {
        min_gain: cx.cfg.louvain.min_gain,
        max_levels: cx.cfg.louvain.max_levels,
        seed: seed(cx, "louvain"),
    };
    let h = louvain_cluster(&kg, &lc)?;
    let level = match cx.cfg.louvain.level {
        Level::Coarsest => h.coarsest_level(),
        Level::Index(l) => l,
    };
    let a = h.assignment_at(level)?;
    a.write_tsv(level, h.levels[level].modularity, cx.create("assignment.tsv")?)?;
    let mut out = cx.create("louvain_levels.tsv")?;
    writeln!(out, "level\tclusters\tmodularity")?;
    for (l, (lv, size)) in h.levels.iter().zip(h.level_sizes()).enumerate() {
        writeln!(out, "{l}\t{size}\t{}", lv.modularity)?;
    }
    Ok(())
}

fn cluster_graph(cx: &mut Ctx<'_>) -> Result<()> {
    let kg = read_graph(cx, "kg.arkg")?;
    let a = read_assignment(cx)?;
    let cg = build_cluster_graph(&kg, &a)?;
    cg.write_edges_tsv(cx.create("cluster_graph.edges.tsv")?)?;
    cg.write_sizes_tsv(cx.create("cluster_graph.sizes.tsv")?)?;
    Ok(())
}

fn sage_settings(cx: &Ctx<'_>, name: &str) -> (WalkConfig, TrainConfig) {
    let walks = WalkConfig {
        seed: seed(cx, &format!("{name}.walks")),
        ..cx.cfg.walks.clone()
    };
    let train = TrainConfig {
        seed: seed(cx, &format!("{name}.train")),
        ..cx.cfg.sage_train.clone()
    };
    (walks, train)
}

fn write_losses<W: Write>(mut out: W, losses: &[f64]) -> Result<()> {
    writeln!(out, "epoch\tloss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(out, "{e}\t{l}")?;
    }
    Ok(())
}

fn embed_clusters(cx: &mut Ctx<'_>) -> Result<()> {
    let edges = cx.read_string("cluster_graph.edges.tsv")?;
    let sizes = cx.read_string("cluster_graph.sizes.tsv")?;
    let cg = ClusterGraph::read_tsv(&edges, &sizes)?;
    let (walks, train) = sage_settings(cx, "embed-clusters");
    let (model, table, rep) = train_embeddings(&cg, &cx.cfg.sage, &walks, &train)?;
    table.write_snapshot(cx.create("zc.arem")?)?;
    cx.write_json("sage_clusters.json", &model)?;
    write_losses(cx.create("sage_clusters.loss.tsv")?, &rep.epoch_losses)
}

fn embed_subgraph(cx: &mut Ctx<'_>) -> Result<()> {
    let kg = read_graph(cx, "kg.arkg")?;
    let a = read_assignment(cx)?;
    let zc = read_table(cx, "zc.arem")?;
    let (train, test) = dataset(cx)?;
    let map = match cx.cfg.paths.entity_map.clone() {
        Some(p) => Some(load_entity_map(open_external(cx, "paths.entity_map", &p)?)?),
        None => None,
    };
    let index = kg.label_index();
    let refs: Vec<EntityRef> = train
        .iter()
        .chain(&test)
        .map(|i| i.resolve(&index, map.as_ref()))
        .collect();
    let sub = build_aspect_subgraph(&kg, &refs)?;
    let (walks, opt) = sage_settings(cx, "embed-subgraph");
    let (model, local, rep) = train_embeddings(&sub.graph, &cx.cfg.sage, &walks, &opt)?;
    let zs = subgraph_table(&sub, &local)?;
    let ids: Vec<NodeId> = refs.iter().filter_map(|e| e.node()).collect();
    let z = TwoLevelTable::build(&zc, &zs, &a, &ids)?;

    graph::write_snapshot(&sub.graph, cx.create("subgraph.arkg")?)?;
    let mut out = cx.create("subgraph_ids.tsv")?;
    for (l, g) in sub.original_ids.iter().enumerate() {
        writeln!(out, "{l}\t{g}")?;
    }
    drop(out);
    cx.write_json("sage_subgraph.json", &model)?;
    write_losses(cx.create("sage_subgraph.loss.tsv")?, &rep.epoch_losses)?;
    zs.write_snapshot(cx.create("zs.arem")?)?;
    let snap = cx.create("z.arem")?;
    let flags = cx.create("z.flags.tsv")?;
    z.write(snap, flags)?;
    let mut out = cx.create("entities.tsv")?;
    writeln!(out, "split\tid\tentity")?;
    for (k, (inst, e)) in train.iter().chain(&test).zip(&refs).enumerate() {
        let split = if k < train.len() { "train" } else { "test" };
        match e.node() {
            Some(u) => writeln!(out, "{split}\t{}\t{u}", inst.id)?,
            None => writeln!(out, "{split}\t{}\tUNK", inst.id)?,
        }
    }
    Ok(())
}

fn read_two_level(cx: &mut Ctx<'_>, snap: &str, flags: &str) -> Result<TwoLevelTable> {
    let s = cx.open(snap)?;
    let f = cx.open(flags)?;
    TwoLevelTable::read(s, f)
}

fn head_config(cx: &Ctx<'_>, name: &str) -> JointConfig {
    let mut c = cx.cfg.alsc.clone();
    c.head.seed = seed(cx, name);
    c
}

fn static_features(text: &Mat, z: &TwoLevelTable, ents: &[Option<NodeId>]) -> Result<Mat> {
    let (dh, dz) = (text.ncols(), z.dim());
    let mut x = Mat::zeros((text.nrows(), dh + dz));
    for (r, e) in ents.iter().enumerate() {
        let zr = z.lookup(e.map_or(EntityRef::Unk, EntityRef::Node))?;
        for c in 0..dh {
            x[[r, c]] = text[[r, c]];
        }
        for (c, &v) in zr.iter().enumerate() {
            x[[r, dh + c]] = v as f64;
        }
    }
    Ok(x)
}

fn write_text<W: Write>(p: &dyn TextProvider, insts: &[AlscInstance], out: W) -> Result<()> {
    let rows: Vec<Vec<f32>> = insts
        .iter()
        .map(|i| p.features(i).map(|f| round_f32(&f.h)))
        .collect::<Result<_>>()?;
    let recs: Vec<(&str, &[f32])> = insts
        .iter()
        .zip(&rows)
        .map(|(i, r)| (i.id.as_str(), r.as_slice()))
        .collect();
    write_arft(p.dim(), &recs, out)
}

fn train_static_stage(cx: &mut Ctx<'_>) -> Result<()> {
    let (train, test) = dataset(cx)?;
    let (ents, _) = read_entities(cx)?;
    let z = read_two_level(cx, "z.arem", "z.flags.tsv")?;
    let z_hash = z.sha256();
    let p = provider(cx, &train, &test)?;
    write_text(p.as_ref(), &train, cx.create("text_train.arft")?)?;
    write_text(p.as_ref(), &test, cx.create("text_test.arft")?)?;
    let text = {
        let rows: Vec<Vec<f32>> = train
            .iter()
            .map(|i| p.features(i).map(|f| round_f32(&f.h)))
            .collect::<Result<_>>()?;
        rows_to_mat(&rows, p.dim())
    };
    let y = labels(&train);
    let (baseline, bt) = train_static(&text, &y, &head_config(cx, "train-static.baseline").head)?;
    let x = static_features(&text, &z, &ents)?;
    let (head, st) = train_static(&x, &y, &head_config(cx, "train-static.static").head)?;
    if z.sha256() != z_hash {
        return Err(Error::Invalid("entity table changed during static training".into()));
    }
    cx.write_json("baseline_head.json", &baseline)?;
    cx.write_json("static_head.json", &head)?;
    let mut out = cx.create("static_trace.tsv")?;
    writeln!(out, "model\tepoch\tloss\tbest")?;
    for (name, t) in [("baseline", &bt), ("static", &st)] {
        for (e, l) in t.epoch_losses.iter().enumerate() {
            writeln!(out, "{name}\t{e}\t{l}\t{}", u8::from(e == t.best_epoch))?;
        }
    }
    Ok(())
}

fn write_joint_trace<W: Write>(mut out: W, t: &JointTrace, alpha1: f64, alpha2: f64) -> Result<()> {
    writeln!(out, "# alpha1={alpha1} alpha2={alpha2} best_epoch={}", t.best_epoch)?;
    writeln!(out, "step\talsc\tgraph\tjoint")?;
    for (k, s) in t.steps.iter().enumerate() {
        writeln!(out, "{k}\t{}\t{}\t{}", s.alsc, s.graph, s.joint)?;
    }
    Ok(())
}

/// Trains head and subgraph encoder end to end from the static encoder,
/// with `zeroed` entities treated as unknown.
fn joint_run(cx: &mut Ctx<'_>, name: &str, zeroed: &HashSet<NodeId>) -> Result<(Head, SageModel, JointTrace)> {
    let (train, _) = dataset(cx)?;
    let (ents, _) = read_entities(cx)?;
    let a = read_assignment(cx)?;
    let zc = read_table(cx, "zc.arem")?;
    let zc_hash = zc.sha256();
    let sub = read_subgraph(cx)?;
    let sage: SageModel = cx.read_json("sage_subgraph.json")?;
    let text = read_text(cx, "text_train.arft", &train)?;
    let (zc_rows, local) = instance_graph_inputs(&ents, zeroed, &a, &zc, &sub)?;
    let y = labels(&train);
    let inputs = JointInputs {
        text: &text,
        zc: &zc_rows,
        entities: &local,
        labels: &y,
    };
    let (walks, _) = sage_settings(cx, name);
    let out = train_joint(&inputs, &sub.graph, &sage, &walks, &head_config(cx, name))?;
    if zc.sha256() != zc_hash {
        return Err(Error::Invalid(
            "cluster embeddings changed during joint training".into(),
        ));
    }
    Ok(out)
}

fn train_joint_stage(cx: &mut Ctx<'_>) -> Result<()> {
    let (head, sage, trace) = joint_run(cx, "train-joint", &HashSet::new())?;
    cx.write_json("joint_head.json", &head)?;
    cx.write_json("joint_sage.json", &sage)?;
    let (a1, a2) = (cx.cfg.alsc.alpha1, cx.cfg.alsc.alpha2);
    write_joint_trace(cx.create("joint_trace.tsv")?, &trace, a1, a2)
}

fn idd(cx: &mut Ctx<'_>) -> Result<()> {
    let (train, _) = dataset(cx)?;
    let (ents, _) = read_entities(cx)?;
    let z = read_two_level(cx, "z.arem", "z.flags.tsv")?;
    let text = read_text(cx, "text_train.arft", &train)?;
    let h = mean_text_embeddings(&text, &ents)?;
    let mut aspects: Vec<NodeId> = ents
        .iter()
        .flatten()
        .copied()
        .filter(|&u| z.flag(EntityRef::Node(u)) == Some(Flag::Ok))
        .collect();
    aspects.sort_unstable();
    aspects.dedup();
    let rows: Vec<f32> = aspects
        .iter()
        .flat_map(|&u| z.table().get(u).expect("listed").to_vec())
        .collect();
    let zt = EmbeddingTable::from_parts(z.dim(), aspects.clone(), rows)?;
    let s = &cx.cfg.idd;
    let tau = build_triplets(&zt, s.detect.n, s.per_aspect, seed(cx, "idd.triplets"))?;
    let pc = ProbeConfig {
        seed: seed(cx, "idd.probe"),
        ..s.probe.clone()
    };
    let dc = DetectConfig {
        seed: seed(cx, "idd.detect"),
        ..s.detect.clone()
    };
    let (probe, trace) = train_probe(&tau, &h, &pc)?;
    let det = detect_and_correct(&probe, &h, &z, &aspects, &dc)?;
    probe.write_snapshot(cx.create("probe.arem")?)?;
    det.write_flags(cx.create("idd_flags.tsv")?)?;
    let snap = cx.create("z_mod.arem")?;
    let flags = cx.create("z_mod.flags.tsv")?;
    det.table.write(snap, flags)?;
    let mut out = cx.create("probe_trace.tsv")?;
    writeln!(out, "epoch\tobjective\tmargin")?;
    for (e, (l, m)) in trace.epoch_losses.iter().zip(&trace.margins).enumerate() {
        writeln!(out, "{e}\t{l}\t{m}")?;
    }
    drop(out);

    let zeroed: HashSet<NodeId> = det.zeroed().into_iter().collect();
    let (head, sage, jt) = joint_run(cx, "idd.joint", &zeroed)?;
    cx.write_json("idd_head.json", &head)?;
    cx.write_json("idd_sage.json", &sage)?;
    let (a1, a2) = (cx.cfg.alsc.alpha1, cx.cfg.alsc.alpha2);
    write_joint_trace(cx.create("idd_trace.tsv")?, &jt, a1, a2)
}

/// The model explanations and the AR comparison are about.
fn final_model(cx: &mut Ctx<'_>) -> Result<(Head, SageModel, HashSet<NodeId>)> {
    if cx.cfg.idd.enabled {
        Ok((
            cx.read_json("idd_head.json")?,
            cx.read_json("idd_sage.json")?,
            zeroed_entities(cx)?,
        ))
    } else {
        Ok((
            cx.read_json("joint_head.json")?,
            cx.read_json("joint_sage.json")?,
            HashSet::new(),
        ))
    }
}

fn correct(pred: &[usize], y: &[usize]) -> Vec<bool> {
    pred.iter().zip(y).map(|(p, g)| p == g).collect()
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    correct(pred, y).iter().filter(|&&c| c).count() as f64 / y.len().max(1) as f64
}

struct Explained {
    text: Vec<usize>,
    h_masked: Vec<f64>,
    graph: Option<GraphExplanation>,
}

fn explain_one(
    p: &dyn TextProvider,
    inst: &AlscInstance,
    h: &[f64],
    theta: &Mat,
    top_m: usize,
    graph: Option<GraphExplanation>,
) -> Result<Explained> {
    let tokens = p.features(inst)?.tokens;
    let text = tokens.map_or_else(Vec::new, |t| {
        extract_text_explanation(&t, theta, inst.aspect_span, top_m)
    });
    let h_masked = if text.is_empty() {
        h.to_vec()
    } else {
        widen(&round_f32(&p.masked_features(inst, &text)?.h))
    };
    Ok(Explained { text, h_masked, graph })
}

#[allow(clippy::too_many_arguments)]
fn explain_all(
    p: &dyn TextProvider,
    insts: &[AlscInstance],
    data: &ExplainData,
    gs: &EntityGraph,
    theta: &Mat,
    ex: &GraphExplainer,
    top_m: usize,
    budget: usize,
    counts: &HashMap<NodeId, usize>,
) -> Result<Vec<Explained>> {
    insts
        .iter()
        .enumerate()
        .map(|(r, inst)| {
            let h = data.text.row(r).to_vec();
            let g = data.entities[r].map(|u| extract_subgraph(ex, gs, &data.zs, u, budget, counts));
            explain_one(p, inst, &h, theta, top_m, g)
        })
        .collect()
}

fn perturb_inputs(data: &ExplainData, ex: &[Explained]) -> Vec<PerturbInput> {
    ex.iter()
        .enumerate()
        .map(|(r, e)| PerturbInput {
            h: data.text.row(r).to_vec(),
            h_masked: e.h_masked.clone(),
            zc: data.zc.row(r).to_vec(),
            entity: data.entities[r],
            removed: e.graph.as_ref().map_or_else(Vec::new, |g| g.nodes.clone()),
        })
        .collect()
}

fn explain(cx: &mut Ctx<'_>) -> Result<()> {
    let (train, test) = dataset(cx)?;
    let (ents_tr, ents_te) = read_entities(cx)?;
    let a = read_assignment(cx)?;
    let zc = read_table(cx, "zc.arem")?;
    let sub = read_subgraph(cx)?;
    let (head, sage, zeroed) = final_model(cx)?;
    let text_tr = read_text(cx, "text_train.arft", &train)?;
    let text_te = read_text(cx, "text_test.arft", &test)?;
    let p = provider(cx, &train, &test)?;
    let gs = &sub.graph;
    let m = Frozen {
        head: &head,
        sage: &sage,
        gs,
    };
    let (zc_tr, loc_tr) = instance_graph_inputs(&ents_tr, &zeroed, &a, &zc, &sub)?;
    let (zc_te, loc_te) = instance_graph_inputs(&ents_te, &zeroed, &a, &zc, &sub)?;
    let data_tr = ExplainData::new(&m, text_tr, zc_tr, loc_tr)?;
    let data_te = ExplainData::new(&m, text_te, zc_te, loc_te)?;
    let mut counts: HashMap<NodeId, usize> = HashMap::new();
    for u in data_tr.entities.iter().flatten() {
        *counts.entry(*u).or_insert(0) += 1;
    }

    let s = &cx.cfg.explain;
    let mut ccfg = s.concepts.clone();
    ccfg.seed = seed(cx, "explain.concepts");
    let mut gcfg = s.graph.clone();
    gcfg.seed = seed(cx, "explain.graph");
    let mut scfg = s.significance.clone();
    scfg.seed = seed(cx, "explain.significance");
    let mut rcfg = s.refine.clone();
    rcfg.seed = seed(cx, "explain.refine");
    let (top_m, budget) = (s.top_m, s.graph.budget);

    let (concepts, ctrace) = train_concepts(&m, &data_tr, &ccfg)?;
    let (explainer, gtrace) = train_graph_explainer(&m, &data_tr, &gcfg)?;
    let ex_tr = explain_all(
        p.as_ref(),
        &train,
        &data_tr,
        gs,
        &concepts.theta,
        &explainer,
        top_m,
        budget,
        &counts,
    )?;
    let lab_tr = perturb_and_label_all(&m, &perturb_inputs(&data_tr, &ex_tr))?;
    let s_t: Vec<bool> = lab_tr.iter().map(|l| l.s_t).collect();
    let s_g: Vec<bool> = lab_tr.iter().map(|l| l.s_g).collect();
    let (sig, sig_losses) = train_significance(&data_tr.inputs(), &s_t, &s_g, &scfg)?;
    let (concepts, explainer, sig, steps) = joint_refine(
        &m, &data_tr, &concepts, &explainer, &sig, &s_t, &s_g, &ccfg, &gcfg, &rcfg,
    )?;

    let ex_te = explain_all(
        p.as_ref(),
        &test,
        &data_te,
        gs,
        &concepts.theta,
        &explainer,
        top_m,
        budget,
        &counts,
    )?;
    let lab_te = perturb_and_label_all(&m, &perturb_inputs(&data_te, &ex_te))?;
    let x_te = data_te.inputs();
    let (sig_t, sig_g) = sig.predict(&x_te);

    let mut modes = Vec::with_capacity(test.len());
    let mut out = cx.create("explanations.jsonl")?;
    for (r, inst) in test.iter().enumerate() {
        let (e, l) = (&ex_te[r], &lab_te[r]);
        let mode = Mode::from_labels(l.s_t, l.s_g);
        modes.push(mode);
        let g = e.graph.as_ref();
        let rec = ExplanationRecord {
            id: inst.id.clone(),
            text_tokens: e.text.iter().map(|&i| inst.tokens[i].clone()).collect(),
            graph_edges: g.map_or_else(Vec::new, |g| {
                g.edges
                    .iter()
                    .map(|&(a, b, w)| (sub.to_original(a), sub.to_original(b), w))
                    .collect()
            }),
            top_entity: g
                .and_then(|g| g.top_entity)
                .and_then(|u| gs.label(u).map(str::to_string)),
            s_t: l.s_t,
            s_g: l.s_g,
            sig_t: sig_t[r],
            sig_g: sig_g[r],
            mode,
        };
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    drop(out);
    write_modes_tsv(&cx.cfg.explain.dataset, &modes, cx.create("modes.tsv")?)?;

    // Fidelity: the full model against concept-reconstructed text, the
    // explanation subgraph alone, and the two removal ablations.
    let y = labels(&test);
    let full = m.predict(&x_te)?;
    let rec = concepts.reconstruct(&data_te.text);
    let concept_pred = m.predict(&joint_features(&rec, &data_te.zc, &data_te.zs, &data_te.entities))?;
    let mut zs_sub = Mat::zeros((test.len(), sage.config.output_dim));
    for (r, e) in ex_te.iter().enumerate() {
        if let (Some(u), Some(g)) = (data_te.entities[r], &e.graph) {
            let edges: Vec<(NodeId, NodeId)> = g.edges.iter().map(|&(a, b, _)| (a, b)).collect();
            let only = EntityGraph::from_edges(gs.node_count(), &edges)?;
            zs_sub.row_mut(r).assign(&sage.embed(&only, &[u])?.row(0));
        }
    }
    let mut x_sub = x_te.clone();
    let off = data_te.text.ncols() + data_te.zc.ncols();
    for r in 0..test.len() {
        for c in 0..zs_sub.ncols() {
            x_sub[[r, off + c]] = zs_sub[[r, c]];
        }
    }
    let sub_pred = m.predict(&x_sub)?;
    let no_text: Vec<usize> = lab_te.iter().map(|l| l.text_pred).collect();
    let no_graph: Vec<usize> = lab_te.iter().map(|l| l.graph_pred).collect();

    let mut out = cx.create("explain_predictions.tsv")?;
    writeln!(out, "id\tgold\tfull\tconcepts\tsubgraph\tno_text\tno_graph")?;
    let name = |i: usize| Label::from_index(i).as_str();
    for (r, inst) in test.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            inst.id,
            name(y[r]),
            name(full[r]),
            name(concept_pred[r]),
            name(sub_pred[r]),
            name(no_text[r]),
            name(no_graph[r])
        )?;
    }
    drop(out);
    let mut out = cx.create("explain_eval.tsv")?;
    writeln!(out, "setting\taccuracy")?;
    for (k, pred) in [
        ("full", &full),
        ("concepts", &concept_pred),
        ("subgraph", &sub_pred),
        ("no_text", &no_text),
        ("no_graph", &no_graph),
    ] {
        writeln!(out, "{k}\t{}", accuracy(pred, &y))?;
    }
    drop(out);

    let mut out = cx.create("explain_trace.tsv")?;
    writeln!(out, "part\tstep\tvalue")?;
    for (k, v) in ctrace.epoch_losses.iter().enumerate() {
        writeln!(out, "concepts\t{k}\t{v}")?;
    }
    for (k, v) in gtrace.iter().enumerate() {
        writeln!(out, "graph\t{k}\t{v}")?;
    }
    for (k, v) in sig_losses.iter().enumerate() {
        writeln!(out, "significance\t{k}\t{v}")?;
    }
    for (k, st) in steps.iter().enumerate() {
        writeln!(out, "lmm\t{k}\t{}", st.total)?;
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
pub(super) struct Metrics {
    /// Model name → metrics, in evaluation order.
    pub models: Vec<(String, MetricsReport)>,
    /// Name of the model compared against the baseline.
    pub ar: String,
    /// `[baseline correct, incorrect][AR correct, incorrect]`.
    pub compare: [[usize; 2]; 2],
}

fn evaluate_stage(cx: &mut Ctx<'_>) -> Result<()> {
    let (train, test) = dataset(cx)?;
    let (_, ents) = read_entities(cx)?;
    let a = read_assignment(cx)?;
    let zc = read_table(cx, "zc.arem")?;
    let sub = read_subgraph(cx)?;
    let z = read_two_level(cx, "z.arem", "z.flags.tsv")?;
    let text = read_text(cx, "text_test.arft", &test)?;
    let categories: BTreeMap<String, String> = match cx.cfg.paths.categories.clone() {
        Some(p) => read_categories(open_external(cx, "paths.categories", &p)?)?
            .into_iter()
            .map(|(k, v)| (crate::two_level::normalize_aspect(&k), v))
            .collect(),
        None => BTreeMap::new(),
    };
    let y = labels(&test);

    let mut preds: Vec<(String, Vec<usize>)> = Vec::new();
    let baseline: Head = cx.read_json("baseline_head.json")?;
    preds.push((
        "baseline".into(),
        baseline.predict_labels(&text)?.iter().map(|l| l.index()).collect(),
    ));
    let stat: Head = cx.read_json("static_head.json")?;
    let xs = static_features(&text, &z, &ents)?;
    preds.push((
        "static".into(),
        stat.predict_labels(&xs)?.iter().map(|l| l.index()).collect(),
    ));
    let mut joint_models = vec![("joint", "joint_head.json", "joint_sage.json")];
    if cx.cfg.idd.enabled {
        joint_models.push(("idd", "idd_head.json", "idd_sage.json"));
    }
    for (name, hf, sf) in joint_models {
        let head: Head = cx.read_json(hf)?;
        let sage: SageModel = cx.read_json(sf)?;
        let zeroed = if name == "idd" {
            zeroed_entities(cx)?
        } else {
            HashSet::new()
        };
        let (zc_rows, local) = instance_graph_inputs(&ents, &zeroed, &a, &zc, &sub)?;
        let zs = sage.embed_all(&sub.graph)?;
        let x = joint_features(&text, &zc_rows, &zs, &local);
        preds.push((
            name.into(),
            head.predict_labels(&x)?.iter().map(|l| l.index()).collect(),
        ));
    }

    let counts = aspect_counts(&train);
    let meta: Vec<(usize, Option<String>)> = test
        .iter()
        .zip(&ents)
        .map(|(inst, e)| {
            let key = inst.aspect_key();
            let cat = match e {
                None => Some("unk".to_string()),
                Some(_) => categories.get(&key).cloned(),
            };
            (counts.get(&key).copied().unwrap_or(0), cat)
        })
        .collect();
    let mut models = Vec::new();
    for (name, pred) in &preds {
        let items: Vec<EvalItem> = pred
            .iter()
            .zip(&y)
            .zip(&meta)
            .map(|((&p, &g), (count, cat))| EvalItem {
                gold: Label::from_index(g),
                pred: Label::from_index(p),
                train_count: *count,
                category: cat.clone(),
            })
            .collect();
        let r = evaluate(&items, &cx.cfg.buckets)?;
        r.write_tsv(cx.create(&format!("metrics_{name}.tsv"))?)?;
        models.push((name.clone(), r));
    }
    let ar = preds.last().expect("at least one joint model");
    let cmp = compare(&correct(&preds[0].1, &y), &correct(&ar.1, &y))?;
    let mut out = cx.create("predictions.tsv")?;
    let names: Vec<&str> = preds.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(out, "id\tgold\t{}", names.join("\t"))?;
    for (r, inst) in test.iter().enumerate() {
        let cols: Vec<&str> = preds.iter().map(|(_, p)| Label::from_index(p[r]).as_str()).collect();
        writeln!(
            out,
            "{}\t{}\t{}",
            inst.id,
            Label::from_index(y[r]).as_str(),
            cols.join("\t")
        )?;
    }
    drop(out);
    let metrics = Metrics {
        models,
        ar: ar.0.clone(),
        compare: cmp,
    };
    cx.write_json("metrics.json", &metrics)
}

/// Lines of a TSV artifact without its header.
pub(super) fn tsv_rows<R: BufRead>(input: R) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for line in input.lines().skip(1) {
        let line = line?;
        if !line.is_empty() {
            rows.push(line.split('\t').map(str::to_string).collect());
        }
    }
    Ok(rows)
}
