//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (outside the harness capture) before asserting.

mod support;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use arkg_core::alsc::{
    argmax, head_loss, read_jsonl, train_joint, train_static, Head, HeadConfig, JointConfig, JointInputs,
};
use arkg_core::cluster_graph::build_cluster_graph;
use arkg_core::explain::{
    concept_loss, edge_mask_loss, lmm_objective, perturb_and_label, ConceptModel, Frozen, GraphExplainer, LmmBatch,
    MaskBatch, PerturbInput, SignificanceModel,
};
use arkg_core::graph::{read_snapshot, EntityGraph, NodeId};
use arkg_core::idd::probe_objective;
use arkg_core::louvain::{coarsest_assignment, louvain_cluster, modularity, Assignment, LouvainConfig};
use arkg_core::metrics::{auc, nmi};
use arkg_core::persist::{read_json, sha256_file};
use arkg_core::pipeline::{read_manifest, Stage};
use arkg_core::rng::{self, Rng};
use arkg_core::sage::{
    build_pair_batch, encode, graph_loss, train_embeddings, EmbeddingTable, NegativeSampler, SageConfig, SageModel,
    SageVars, Sampler, TrainConfig, WalkConfig,
};
use arkg_core::synth::{
    erdos_renyi, link_split, planted_cliques, random_connected, sbm, sentiment_word, World, WorldConfig,
};
use arkg_core::tape::{finite_difference, max_relative_error, Mat, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
    pass
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

// ---------------------------------------------------------------------------
// Modularity against brute force over every small connected graph.

/// Largest adjacency code over the vertex orders that respect a stable
/// colour refinement; equal for isomorphic graphs.
fn canonical_code(n: usize, adj: &[u8]) -> u32 {
    let mut colour: Vec<usize> = (0..n).map(|v| adj[v].count_ones() as usize).collect();
    loop {
        let sig: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<usize> = (0..n).filter(|&w| adj[v] >> w & 1 == 1).map(|w| colour[w]).collect();
                nb.sort_unstable();
                (colour[v], nb)
            })
            .collect();
        let mut distinct = sig.clone();
        distinct.sort();
        distinct.dedup();
        let next: Vec<usize> = sig.iter().map(|s| distinct.binary_search(s).unwrap()).collect();
        let stable = distinct.len() == {
            let mut c = colour.clone();
            c.sort_unstable();
            c.dedup();
            c.len()
        };
        colour = next;
        if stable {
            break;
        }
    }
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, &c) in colour.iter().enumerate().take(n) {
        cells.entry(c).or_default().push(v);
    }
    let cells: Vec<Vec<usize>> = cells.into_values().collect();
    let mut best = 0u32;
    let mut order = Vec::with_capacity(n);
    fn rec(cells: &[Vec<usize>], k: usize, used: &mut Vec<bool>, order: &mut Vec<usize>, adj: &[u8], best: &mut u32) {
        if k == cells.len() {
            let n = order.len();
            let mut code = 0u32;
            let mut bit = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if adj[order[i]] >> order[j] & 1 == 1 {
                        code |= 1 << bit;
                    }
                    bit += 1;
                }
            }
            *best = (*best).max(code);
            return;
        }
        // every ordering of this cell, then the next cell
        fn perm(
            cells: &[Vec<usize>],
            k: usize,
            placed: usize,
            used: &mut Vec<bool>,
            order: &mut Vec<usize>,
            adj: &[u8],
            best: &mut u32,
        ) {
            let cell = &cells[k];
            if placed == cell.len() {
                rec(cells, k + 1, used, order, adj, best);
                return;
            }
            for &v in cell {
                if !used[v] {
                    used[v] = true;
                    order.push(v);
                    perm(cells, k, placed + 1, used, order, adj, best);
                    order.pop();
                    used[v] = false;
                }
            }
        }
        perm(cells, k, 0, used, order, adj, best);
    }
    let mut used = vec![false; n];
    rec(&cells, 0, &mut used, &mut order, adj, &mut best);
    best
}

/// One representative adjacency per isomorphism class of connected graphs
/// on `n` vertices, for `n = 1..=max_n`. Every connected graph has a vertex
/// whose removal leaves it connected, so extending the classes on `n − 1`
/// vertices by one vertex with a non-empty neighbourhood reaches them all.
fn connected_graphs(max_n: usize) -> Vec<Vec<Vec<u8>>> {
    let mut levels: Vec<Vec<Vec<u8>>> = vec![vec![], vec![vec![0u8]]];
    for n in 2..=max_n {
        let mut seen: HashMap<u32, Vec<u8>> = HashMap::new();
        for g in &levels[n - 1] {
            for s in 1u16..(1 << (n - 1)) {
                let mut adj = g.clone();
                adj.push(s as u8);
                for (v, row) in adj.iter_mut().enumerate().take(n - 1) {
                    if s >> v & 1 == 1 {
                        *row |= 1 << (n - 1);
                    }
                }
                seen.entry(canonical_code(n, &adj)).or_insert(adj);
            }
        }
        let mut reps: Vec<(u32, Vec<u8>)> = seen.into_iter().collect();
        reps.sort();
        levels.push(reps.into_iter().map(|(_, a)| a).collect());
    }
    levels
}

/// Restricted growth strings: every set partition of `n` labelled items.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0usize; n];
    fn go(i: usize, max: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == a.len() {
            out.push(a.clone());
            return;
        }
        for c in 0..=max + 1 {
            a[i] = c;
            go(i + 1, max.max(c), a, out);
        }
    }
    if n > 0 {
        go(1, 0, &mut a, &mut out);
    }
    out
}

/// `Q = (1/2m) Σ_ij [A_ij − k_i k_j / 2m] δ(c_i, c_j)` from the adjacency matrix.
fn brute_modularity(n: usize, adj: &[u8], part: &[usize]) -> f64 {
    let k: Vec<f64> = (0..n).map(|v| adj[v].count_ones() as f64).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if part[i] == part[j] {
                let a = (adj[i] >> j & 1) as f64;
                q += a - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

fn to_graph(n: usize, adj: &[u8]) -> EntityGraph {
    let mut edges = Vec::new();
    for (u, row) in adj.iter().enumerate().take(n) {
        for v in u + 1..n {
            if row >> v & 1 == 1 {
                edges.push((u as NodeId, v as NodeId));
            }
        }
    }
    EntityGraph::from_edges(n, &edges).unwrap()
}

#[test]
fn modularity_matches_brute_force_and_louvain_never_loses_modularity() {
    let classes = connected_graphs(8);
    let counts: Vec<usize> = classes.iter().skip(1).map(Vec::len).collect();
    assert_eq!(counts, [1, 1, 2, 6, 21, 112, 853, 11117], "connected graph enumeration");

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (n, graphs) in classes.iter().enumerate().skip(2) {
        let parts = set_partitions(n);
        let workers = std::thread::available_parallelism().map_or(1, |p| p.get());
        let chunk = graphs.len().div_ceil(workers);
        let results: Vec<(f64, usize)> = std::thread::scope(|s| {
            let hs: Vec<_> = graphs
                .chunks(chunk)
                .map(|gs| {
                    let parts = &parts;
                    s.spawn(move || {
                        let mut worst = 0.0f64;
                        let mut checked = 0;
                        for adj in gs {
                            let g = to_graph(n, adj);
                            for p in parts {
                                let q = modularity(&g, p).unwrap();
                                worst = worst.max((q - brute_modularity(n, adj, p)).abs());
                                checked += 1;
                            }
                        }
                        (worst, checked)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (w, c) in results {
            worst = worst.max(w);
            checked += c;
        }
    }

    let mut decreases = 0usize;
    let mut level_mismatch = 0.0f64;
    let mut r = rng::stream(11, "acceptance.louvain");
    for i in 0..50 {
        let g = if i % 2 == 0 {
            let n = r.random_range(20..300);
            random_connected(n, r.random_range(n / 2..4 * n), &mut r).unwrap()
        } else {
            erdos_renyi(r.random_range(30..200), r.random_range(0.02..0.15), &mut r).unwrap()
        };
        if g.edge_count() == 0 {
            continue;
        }
        let h = louvain_cluster(
            &g,
            &LouvainConfig {
                seed: i,
                ..Default::default()
            },
        )
        .unwrap();
        let mut prev = f64::NEG_INFINITY;
        for (l, level) in h.levels.iter().enumerate() {
            for &q in &level.pass_modularity {
                if q < prev - 1e-12 {
                    decreases += 1;
                }
                prev = q;
            }
            let direct = modularity(&g, h.assignment_at(l).unwrap().as_slice()).unwrap();
            level_mismatch = level_mismatch.max((direct - level.modularity).abs());
        }
    }
    let pass = worst <= 1e-12 && decreases == 0 && level_mismatch <= 1e-9;
    verdict(
        "modularity oracle",
        pass,
        &format!(
            "{checked} partitions over all connected graphs up to 8 nodes, max |dQ| {worst:.2e}; \
             {decreases} per-pass decreases over 50 Louvain runs"
        ),
    );
    assert!(pass);
}

#[test]
fn louvain_recovers_planted_cliques() {
    let mut scores = Vec::new();
    for seed in 0..10u64 {
        let mut r = rng::stream(seed, "acceptance.cliques");
        let (g, truth) = planted_cliques(4, 30, 4, &mut r).unwrap();
        let h = louvain_cluster(
            &g,
            &LouvainConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let a = coarsest_assignment(&h).unwrap();
        scores.push(nmi(a.as_slice(), &truth));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = min >= 0.95;
    verdict(
        "planted-partition recovery",
        pass,
        &format!("min NMI {min:.4} over 10 seeds"),
    );
    assert!(pass);
}

#[test]
fn cluster_graph_conserves_cross_edges() {
    let mut r = rng::stream(5, "acceptance.cluster-graph");
    let mut graphs = vec![
        erdos_renyi(2000, 0.05, &mut r).unwrap(),
        random_connected(5000, 20000, &mut r).unwrap(),
        sbm(&[300, 300, 400], 0.1, 0.01, &mut r).unwrap().0,
    ];
    for _ in 0..20 {
        let n = r.random_range(10..500);
        graphs.push(random_connected(n, r.random_range(0..3 * n), &mut r).unwrap());
    }
    let mut ok = true;
    let mut max_edges = 0;
    let mut partitions = 0;
    for g in &graphs {
        assert!(g.edge_count() <= 100_000);
        max_edges = max_edges.max(g.edge_count());
        let louvain = coarsest_assignment(&louvain_cluster(g, &LouvainConfig::default()).unwrap()).unwrap();
        let k = r.random_range(2..20usize).min(g.node_count());
        let mut labels: Vec<usize> = (0..g.node_count())
            .map(|v| if v < k { v } else { r.random_range(0..k) })
            .collect();
        labels.shuffle(&mut r);
        for a in [louvain, Assignment::new(labels)] {
            partitions += 1;
            let cg = build_cluster_graph(g, &a).unwrap();
            let mut brute: HashMap<(usize, usize), u64> = HashMap::new();
            for (u, v) in g.edges() {
                let (cu, cv) = (a.as_slice()[u as usize], a.as_slice()[v as usize]);
                if cu != cv {
                    *brute.entry((cu.min(cv), cu.max(cv))).or_insert(0) += 1;
                }
            }
            let mut sizes = vec![0u64; a.cluster_count()];
            for &c in a.as_slice() {
                sizes[c] += 1;
            }
            let mut got: HashMap<(usize, usize), u64> = HashMap::new();
            for (i, j, count, w) in cg.edges() {
                got.insert((i as usize, j as usize), count);
                let expect = count as f64 / (sizes[i as usize] * sizes[j as usize]) as f64;
                ok &= w > 0.0 && w <= 1.0 && (w - expect).abs() <= 1e-15;
            }
            ok &= got == brute;
            ok &= got.values().sum::<u64>() == brute.values().sum::<u64>();
            ok &= cg.sizes() == sizes.as_slice();
        }
    }
    verdict(
        "cluster-graph conservation",
        ok,
        &format!(
            "{partitions} partitions of {} graphs up to {max_edges} edges",
            graphs.len()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Gradient suite.

const POINTS: u64 = 20;
const EPS: f64 = 1e-6;

fn rand_mat(r: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Analytic gradients of `build` at `params` against central differences.
fn grad_error(params: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
    let l = build(&mut t, &vars);
    let g = t.backward(l);
    let analytic: Vec<Mat> = vars.iter().map(|&v| g.get(&t, v)).collect();
    let numeric = finite_difference(
        |p| {
            let mut t = Tape::new();
            let vars: Vec<Var> = p.iter().map(|m| t.param(m.clone())).collect();
            let l = build(&mut t, &vars);
            t.scalar_value(l)
        },
        params,
        EPS,
    );
    max_relative_error(&analytic, &numeric)
}

fn small_sage() -> SageConfig {
    SageConfig {
        input_dim: 4,
        hidden_dim: 5,
        output_dim: 3,
        fanouts: [3, 2],
        negatives: 2,
    }
}

fn sage_vars(v: &[Var]) -> SageVars {
    SageVars {
        features: v[0],
        w1: v[1],
        b1: v[2],
        w2: v[3],
        b2: v[4],
    }
}

fn graph_loss_errors() -> Vec<f64> {
    let cfg = small_sage();
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(1, "grad.graph", p);
            let g = random_connected(12, 10, &mut r).unwrap();
            let mut model = SageModel::init(cfg.clone(), 12, &mut r).unwrap();
            for m in model.params_mut() {
                *m = rand_mat(&mut r, m.nrows(), m.ncols(), 1.0);
            }
            let sampler = Sampler::new(&g);
            let neg = NegativeSampler::new(&g);
            let pairs: Vec<(NodeId, NodeId)> = (0..6).map(|_| (r.random_range(0..12), r.random_range(0..12))).collect();
            let (plan, batch) = build_pair_batch(&sampler, &neg, &cfg, &pairs, &mut r);
            let params: Vec<Mat> = model.params().iter().map(|m| (*m).clone()).collect();
            grad_error(&params, |t, v| {
                let sv = sage_vars(v);
                let z = encode(t, &sv, &plan);
                graph_loss(t, z, &batch)
            })
        })
        .collect()
}

fn head_loss_errors() -> Vec<f64> {
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(2, "grad.head", p);
            let x = rand_mat(&mut r, 10, 7, 1.0);
            let labels: Vec<usize> = (0..10).map(|_| r.random_range(0..3)).collect();
            let params = [rand_mat(&mut r, 7, 3, 1.0), rand_mat(&mut r, 1, 3, 1.0)];
            grad_error(&params, |t, v| {
                let xv = t.constant(x.clone());
                head_loss(t, &arkg_core::alsc::HeadVars { w: v[0], b: v[1] }, xv, &labels)
            })
        })
        .collect()
}

fn probe_errors() -> Vec<f64> {
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(3, "grad.probe", p);
            let h = rand_mat(&mut r, 8, 6, 1.0);
            let trip: Vec<(usize, usize, usize)> = (0..12)
                .map(|_| (r.random_range(0..8), r.random_range(0..8), r.random_range(0..8)))
                .collect();
            let reg = r.random_range(0.0..1.0);
            grad_error(&[rand_mat(&mut r, 4, 6, 1.0)], |t, v| {
                let hv = t.constant(h.clone());
                probe_objective(t, v[0], hv, &trip, reg)
            })
        })
        .collect()
}

fn concept_errors() -> Vec<f64> {
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(4, "grad.concepts", p);
            let (dh, dz, k, n) = (6, 3, 4, 9);
            let mut head = Head::init(dh + dz, &mut r);
            head.b = rand_mat(&mut r, 1, 3, 1.0);
            let h = rand_mat(&mut r, n, dh, 1.0);
            let z = rand_mat(&mut r, n, dz, 1.0);
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            let c = ConceptModel::init(dh, k, 0.5, &mut r).unwrap();
            let params = [
                c.theta.clone(),
                rand_mat(&mut r, k, dh, 1.0),
                rand_mat(&mut r, 1, dh, 1.0),
            ];
            grad_error(&params, |t, v| {
                let hv = head.bind(t, false);
                let (hh, zz) = (t.constant(h.clone()), t.constant(z.clone()));
                let (nll, reg) = concept_loss(t, v[0], v[1], v[2], &hv, hh, zz, &targets, 0.5);
                let m = t.mean(nll);
                t.add(m, reg)
            })
        })
        .collect()
}

/// A frozen classifier over a small random subgraph, for the explainer losses.
struct SmallModel {
    g: EntityGraph,
    head: Head,
    sage: SageModel,
    zs: Mat,
    h: Mat,
    zc: Mat,
    ents: Vec<NodeId>,
}

const DH: usize = 4;
const DC: usize = 2;

impl SmallModel {
    fn new(r: &mut Rng) -> Self {
        let g = random_connected(10, 8, r).unwrap();
        let sage = SageModel::init(small_sage(), 10, r).unwrap();
        let mut head = Head::init(DH + DC + 3, r);
        head.w = rand_mat(r, DH + DC + 3, 3, 2.0);
        let zs = sage.embed_all(&g).unwrap();
        let n = 6;
        let ents: Vec<NodeId> = (0..n).map(|_| r.random_range(0..10)).collect();
        SmallModel {
            h: rand_mat(r, n, DH, 1.0),
            zc: rand_mat(r, n, DC, 1.0),
            g,
            head,
            sage,
            zs,
            ents,
        }
    }

    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            head: &self.head,
            sage: &self.sage,
            gs: &self.g,
        }
    }

    fn hz(&self) -> Mat {
        ndarray::concatenate![ndarray::Axis(1), self.h, self.zc]
    }

    fn x(&self) -> Mat {
        let zs = Mat::from_shape_fn((self.ents.len(), 3), |(r, c)| self.zs[[self.ents[r] as usize, c]]);
        ndarray::concatenate![ndarray::Axis(1), self.hz(), zs]
    }
}

fn edge_mask_errors() -> Vec<f64> {
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(5, "grad.edge-mask", p);
            let sm = SmallModel::new(&mut r);
            let batch = MaskBatch::new(&sm.g, &sm.zs, &sm.ents);
            let noise: Vec<Mat> = (0..2).map(|_| batch.noise(&mut r)).collect();
            let full = sm.head.predict_rows(&sm.x()).unwrap();
            let ex = GraphExplainer::init(3, 4, &mut r);
            let params = [ex.w1, rand_mat(&mut r, 1, 4, 0.5), ex.w2, rand_mat(&mut r, 1, 1, 0.5)];
            let (temp, sparsity) = (r.random_range(0.3..2.0), r.random_range(0.0..1.0));
            grad_error(&params, |t, v| {
                let sv = sm.sage.bind(t, false);
                let hv = sm.head.bind(t, false);
                let hz = t.constant(sm.hz());
                let (ce, sp) = edge_mask_loss(
                    t,
                    &sv,
                    &hv,
                    [v[0], v[1], v[2], v[3]],
                    &batch,
                    hz,
                    &full,
                    &noise,
                    temp,
                    sparsity,
                );
                let m = t.mean(ce);
                t.add(m, sp)
            })
        })
        .collect()
}

/// Worst error over `L_mm` and each of its five parts.
fn lmm_errors() -> Vec<f64> {
    (0..POINTS)
        .map(|p| {
            let mut r = rng::stream_indexed(6, "grad.lmm", p);
            let sm = SmallModel::new(&mut r);
            let n = sm.ents.len();
            let x = sm.x();
            let batch = MaskBatch::new(&sm.g, &sm.zs, &sm.ents);
            let noise: Vec<Mat> = (0..2).map(|_| batch.noise(&mut r)).collect();
            let b = LmmBatch {
                h: sm.h.clone(),
                z: x.slice(ndarray::s![.., DH..]).to_owned(),
                targets: sm.frozen().predict(&x).unwrap(),
                s_t: (0..n).map(|_| r.random_bool(0.5)).collect(),
                s_g: (0..n).map(|_| r.random_bool(0.5)).collect(),
                w_t: Mat::from_shape_fn((n, 1), |_| r.random_range(0.0..1.0)),
                w_g: Mat::from_shape_fn((n, 1), |_| r.random_range(0.0..1.0)),
                mask: Some(batch),
                hz: sm.hz(),
                full: sm.head.predict_rows(&x).unwrap(),
                noise,
                temperature: r.random_range(0.3..2.0),
                frozen: sm.frozen(),
                x,
            };
            let c = ConceptModel::init(DH, 3, 0.4, &mut r).unwrap();
            let ex = GraphExplainer::init(3, 4, &mut r);
            let sig = SignificanceModel::init(b.x.ncols(), &mut r);
            let params = [
                c.theta,
                rand_mat(&mut r, 3, DH, 1.0),
                rand_mat(&mut r, 1, DH, 1.0),
                ex.w1,
                rand_mat(&mut r, 1, 4, 0.5),
                ex.w2,
                rand_mat(&mut r, 1, 1, 0.5),
                rand_mat(&mut r, sig.w_t.nrows(), 1, 1.0),
                rand_mat(&mut r, 1, 1, 1.0),
                rand_mat(&mut r, sig.w_g.nrows(), 1, 1.0),
                rand_mat(&mut r, 1, 1, 1.0),
            ];
            let (sparsity, lambda) = (r.random_range(0.0..1.0), r.random_range(0.1..2.0));
            (0..6)
                .map(|part| {
                    grad_error(&params, |t, v| {
                        let out = lmm_objective(
                            t,
                            &b,
                            [v[0], v[1], v[2]],
                            [v[3], v[4], v[5], v[6]],
                            [v[7], v[8], v[9], v[10]],
                            0.4,
                            sparsity,
                            lambda,
                        );
                        if part == 5 {
                            out.total
                        } else {
                            out.parts[part]
                        }
                    })
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[test]
fn every_loss_matches_finite_differences() {
    type Suite = (&'static str, fn() -> Vec<f64>);
    let suites: [Suite; 6] = [
        ("graph loss", graph_loss_errors),
        ("classification loss", head_loss_errors),
        ("probe objective", probe_errors),
        ("concept loss", concept_errors),
        ("edge-mask loss", edge_mask_errors),
        ("multi-modal objective", lmm_errors),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in suites {
        let errs = f();
        let worst = errs.iter().copied().fold(0.0, f64::max);
        pass &= errs.len() >= 20 && worst <= 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    verdict(
        "gradient suite",
        pass,
        &format!("max relative error over {POINTS} points each: {}", parts.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Embedding quality on a two-block SBM.

#[test]
fn subgraph_embeddings_predict_held_out_links() {
    let (mut aucs, mut ceilings, mut drops) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let mut r = rng::stream(seed, "acceptance.sbm");
        let (g, block) = sbm(&[50, 50], 0.3, 0.01, &mut r).unwrap();
        let split = link_split(&g, 0.1, &mut r).unwrap();
        let cfg = SageConfig::default();
        let walks = WalkConfig {
            seed,
            ..Default::default()
        };
        let opt = TrainConfig {
            lr: 1e-3,
            epochs: 100,
            seed,
            ..Default::default()
        };
        let (_, table, report) = train_embeddings(&split.train, &cfg, &walks, &opt).unwrap();
        let score = |&(u, v): &(NodeId, NodeId)| {
            let (a, b) = (table.get(u).unwrap(), table.get(v).unwrap());
            a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>()
        };
        let pos: Vec<f64> = split.held_out.iter().map(score).collect();
        let neg: Vec<f64> = split.non_edges.iter().map(score).collect();
        aucs.push(auc(&pos, &neg));
        let oracle = |&(u, v): &(NodeId, NodeId)| f64::from(u8::from(block[u as usize] == block[v as usize]));
        let opos: Vec<f64> = split.held_out.iter().map(oracle).collect();
        let oneg: Vec<f64> = split.non_edges.iter().map(oracle).collect();
        ceilings.push(auc(&opos, &oneg));
        let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
        drops.push(1.0 - last / first);
    }
    let (a, c, d) = (mean(&aucs), mean(&ceilings), mean(&drops));
    let pass = a >= 0.85 && d >= 0.5;
    verdict(
        "embedding quality",
        pass,
        &format!(
            "mean held-out AUC {a:.3} (need 0.85; block-membership oracle on the same split {c:.3}), \
             mean loss drop {:.1}% over 100 epochs (need 50%)",
            100.0 * d
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared pipeline runs.

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    world: Option<World>,
}

/// Labels follow the entity's community only; no sentiment words.
fn graph_signal_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5u64)
            .map(|seed| {
                let dir = tempdir();
                let world = World::generate(&WorldConfig {
                    text_signal: 0.0,
                    seed,
                    ..Default::default()
                })
                .unwrap();
                let cfg = support::world_config(
                    dir.path(),
                    &world,
                    seed,
                    &[("idd.enabled", "false"), ("explain.enabled", "false")],
                );
                let out = support::run_all(&cfg);
                Run {
                    _dir: dir,
                    out,
                    world: Some(world),
                }
            })
            .collect()
    })
}

/// The bundled fixture, run twice from scratch.
fn bundled_runs() -> &'static [Run; 2] {
    static RUNS: OnceLock<[Run; 2]> = OnceLock::new();
    RUNS.get_or_init(|| {
        let one = || {
            let dir = tempdir();
            let cfg = support::copy_bundled(dir.path());
            let out = support::run_all(&cfg);
            Run {
                _dir: dir,
                out,
                world: None,
            }
        };
        [one(), one()]
    })
}

fn read_instances(path: &Path) -> Vec<arkg_core::alsc::AlscInstance> {
    read_jsonl(BufReader::new(File::open(path).unwrap())).unwrap()
}

/// Per test instance: gold, and the predictions of every model column.
fn predictions(out: &Path) -> Vec<HashMap<String, String>> {
    support::tsv_records(&out.join("predictions.tsv"))
}

#[test]
fn frozen_tables_stay_frozen_and_joint_loss_recomposes() {
    // library level
    let mut r = rng::stream(8, "acceptance.joint");
    let (gs, _) = sbm(&[15, 15], 0.3, 0.02, &mut r).unwrap();
    let sage = SageModel::init(small_sage(), gs.node_count(), &mut r).unwrap();
    let n = 80;
    let text = rand_mat(&mut r, n, 6, 1.0);
    let zc = rand_mat(&mut r, n, 4, 1.0);
    let entities: Vec<Option<NodeId>> = (0..n).map(|i| (i % 7 != 0).then(|| r.random_range(0..30))).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let zc_sha = EmbeddingTable::dense(&zc).sha256();
    let zs_table = sage.embedding_table(&gs).unwrap();
    let zs_sha = zs_table.sha256();
    let cfg = JointConfig {
        alpha1: 0.7,
        alpha2: 1.3,
        graph_batch: 16,
        head: HeadConfig {
            lr: 1e-2,
            batch_size: 16,
            epochs: 3,
            seed: 1,
        },
    };
    let walks = WalkConfig::default();
    let (_, _, trace) = train_joint(
        &JointInputs {
            text: &text,
            zc: &zc,
            entities: &entities,
            labels: &labels,
        },
        &gs,
        &sage,
        &walks,
        &cfg,
    )
    .unwrap();
    let zs = zs_table.to_mat();
    let x = arkg_core::alsc::joint_features(&text, &zc, &zs, &entities);
    train_static(&x, &labels, &cfg.head).unwrap();
    let mut ok = EmbeddingTable::dense(&zc).sha256() == zc_sha && zs_table.sha256() == zs_sha;
    let mut worst = trace
        .steps
        .iter()
        .map(|s| (s.joint - (cfg.alpha1 * s.alsc + cfg.alpha2 * s.graph)).abs())
        .fold(0.0, f64::max);

    // artifact level, over a full pipeline run
    let run = &graph_signal_runs()[0];
    let out = &run.out;
    let produced = |stage: Stage, name: &str| read_manifest(out, stage).unwrap().unwrap().outputs[name].clone();
    let zc_file = sha256_file(&out.join("zc.arem")).unwrap();
    let zs_file = sha256_file(&out.join("zs.arem")).unwrap();
    ok &= zc_file == produced(Stage::EmbedClusters, "zc.arem");
    ok &= zs_file == produced(Stage::EmbedSubgraph, "zs.arem");
    let read = |stage: Stage, name: &str| read_manifest(out, stage).unwrap().unwrap().inputs.get(name).cloned();
    ok &= read(Stage::TrainJoint, "zc.arem").as_deref() == Some(zc_file.as_str());
    let text = std::fs::read_to_string(out.join("joint_trace.tsv")).unwrap();
    let header = text.lines().next().unwrap();
    let field = |k: &str| -> f64 {
        header
            .split_whitespace()
            .find_map(|t| t.strip_prefix(k))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (a1, a2) = (field("alpha1="), field("alpha2="));
    let rows = support::tsv_records(&out.join("joint_trace.tsv"));
    ok &= !rows.is_empty();
    for row in &rows {
        let v = |k: &str| row[k].parse::<f64>().unwrap();
        worst = worst.max((v("joint") - (a1 * v("alsc") + a2 * v("graph"))).abs());
    }
    let pass = ok && worst <= 1e-9;
    verdict(
        "joint-training contracts",
        pass,
        &format!(
            "cluster and subgraph tables unchanged by training: {ok}; max |L_joint - recomposed| {worst:.1e} over {} steps",
            trace.steps.len() + rows.len()
        ),
    );
    assert!(pass);
}

/// Training examples per aspect name, counted from the raw training file.
fn train_counts(train: &[arkg_core::alsc::AlscInstance]) -> HashMap<String, usize> {
    let mut c = HashMap::new();
    for i in train {
        *c.entry(i.aspect_text()).or_insert(0) += 1;
    }
    c
}

#[test]
fn graph_signal_lifts_rare_aspects() {
    let mut gaps = Vec::new();
    for run in graph_signal_runs() {
        let w = run.world.as_ref().unwrap();
        let counts = train_counts(&w.train);
        let preds = predictions(&run.out);
        let (mut n, mut base, mut joint) = (0usize, 0usize, 0usize);
        for (inst, p) in w.test.iter().zip(&preds) {
            assert_eq!(p["id"], inst.id);
            if counts.get(&inst.aspect_text()).copied().unwrap_or(0) <= 20 {
                n += 1;
                base += usize::from(p["baseline"] == p["gold"]);
                joint += usize::from(p["joint"] == p["gold"]);
            }
        }
        assert!(n > 0);
        gaps.push(100.0 * (joint as f64 - base as f64) / n as f64);
    }
    let gap = mean(&gaps);
    let pass = gap >= 10.0;
    verdict(
        "graph-signal gain",
        pass,
        &format!(
            "joint minus text-only accuracy on aspects with at most 20 training examples: mean {gap:.1} points, per seed {:?}",
            gaps.iter().map(|g| format!("{g:.1}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn confusion_matrix_never_regresses() {
    let mut good = 0;
    let mut cells = Vec::new();
    for run in graph_signal_runs() {
        let preds = predictions(&run.out);
        let ar = support::tsv(&run.out.join("predictions.tsv"))[0]
            .last()
            .unwrap()
            .clone();
        let (mut lost, mut gained) = (0, 0);
        for p in &preds {
            let (b, a) = (p["baseline"] == p["gold"], p[&ar] == p["gold"]);
            lost += usize::from(b && !a);
            gained += usize::from(!b && a);
        }
        let table = support::tsv(&run.out.join("report/table4.tsv"));
        assert_eq!(table[1][2], lost.to_string());
        assert_eq!(table[2][1], gained.to_string());
        good += usize::from(lost == 0 && gained > 0);
        cells.push(format!("({lost}, {gained})"));
    }
    let pass = good >= 3;
    verdict(
        "confusion-matrix no-regression",
        pass,
        &format!(
            "{good}/5 seeds with (baseline-correct, AR-incorrect) = 0 and (baseline-incorrect, AR-correct) > 0: {}",
            cells.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn disambiguation_audit_finds_corrupted_mappings() {
    let runs: Vec<(f64, f64, String)> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let dir = tempdir();
                    let world = World::generate(&WorldConfig {
                        corrupted: 0.1,
                        topic_words: 6,
                        filler_words: 3,
                        seed,
                        ..Default::default()
                    })
                    .unwrap();
                    let cfg = support::world_config(dir.path(), &world, seed, &[("explain.enabled", "false")]);
                    let out = support::run_all(&cfg);
                    let kg = read_snapshot(File::open(out.join("kg.arkg")).unwrap()).unwrap();
                    let corrupted: HashMap<NodeId, bool> = world
                        .aspects
                        .iter()
                        .filter_map(|a| a.mapped.map(|u| (u, a.corrupted)))
                        .collect();
                    let (mut tp, mut pos, mut fp, mut neg) = (0, 0, 0, 0);
                    for row in support::tsv(&out.join("idd_flags.tsv")) {
                        let id: NodeId = row[0].parse().unwrap();
                        let iri = kg.label(id).unwrap();
                        let u: NodeId = iri.rsplit_once("/e").unwrap().1.parse().unwrap();
                        let zeroed = row[1] == "ZEROED";
                        if corrupted[&u] {
                            pos += 1;
                            tp += usize::from(zeroed);
                        } else {
                            neg += 1;
                            fp += usize::from(zeroed);
                        }
                    }
                    (
                        tp as f64 / pos as f64,
                        fp as f64 / neg as f64,
                        format!("{tp}/{pos} {fp}/{neg}"),
                    )
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let recall = mean(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let fpr = mean(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let pass = recall >= 0.8 && fpr <= 0.05;
    verdict(
        "disambiguation detection",
        pass,
        &format!(
            "mean recall {recall:.3}, mean false-positive rate {fpr:.3} over 5 seeds (zeroed corrupted, zeroed clean per seed: {})",
            runs.iter().map(|r| r.2.clone()).collect::<Vec<_>>().join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn explanations_are_faithful() {
    let out = &bundled_runs()[0].out;
    let rows = support::tsv_records(&out.join("explain_predictions.tsv"));
    let test = read_instances(&support::bundled_dir().join("test.jsonl"));
    assert_eq!(rows.len(), test.len());
    let acc = |col: &str, keep: &dyn Fn(usize) -> bool| {
        let picked: Vec<&HashMap<String, String>> = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, r)| r)
            .collect();
        100.0 * picked.iter().filter(|r| r[col] == r["gold"]).count() as f64 / picked.len() as f64
    };
    let words: HashSet<&str> = arkg_core::alsc::Label::ALL.iter().map(|&l| sentiment_word(l)).collect();
    let texty = |i: usize| test[i].tokens.iter().any(|t| words.contains(t.as_str()));
    let all = |_: usize| true;
    let (full, concepts) = (acc("full", &all), acc("concepts", &all));
    let (full_t, no_text_t) = (acc("full", &texty), acc("no_text", &texty));
    let subset = (0..test.len()).filter(|&i| texty(i)).count();
    let pass = (full - concepts).abs() <= 2.0 && full_t - no_text_t >= 20.0;
    verdict(
        "explanation fidelity",
        pass,
        &format!(
            "concept-reconstructed {concepts:.2} vs full {full:.2}; \
             with explanation words removed {no_text_t:.2} vs {full_t:.2} on the {subset} instances with a sentiment word"
        ),
    );
    assert!(pass);
}

#[test]
fn mode_labels_match_brute_force() {
    let out = &bundled_runs()[0].out;
    let gs = read_snapshot(File::open(out.join("subgraph.arkg")).unwrap()).unwrap();
    let head: Head = read_json(&out.join("idd_head.json")).unwrap();
    let sage: SageModel = read_json(&out.join("idd_sage.json")).unwrap();
    let zc = EmbeddingTable::read_snapshot(File::open(out.join("zc.arem")).unwrap()).unwrap();
    let (_, text) = arkg_core::alsc::read_arft(File::open(out.join("text_test.arft")).unwrap()).unwrap();
    let m = Frozen {
        head: &head,
        sage: &sage,
        gs: &gs,
    };
    let mut r = rng::stream(4, "acceptance.perturb");
    let n = gs.node_count() as NodeId;
    let mut mismatches = 0;
    let mut flips = [0usize; 2];
    for i in 0..200 {
        let h: Vec<f64> = text[i % text.len()].1.iter().map(|&v| v as f64).collect();
        let mut h_masked = h.clone();
        for v in h_masked.iter_mut() {
            if r.random_bool(0.5) {
                *v = 0.0;
            }
        }
        let zrow = zc.row(r.random_range(0..zc.len()));
        let zc_row: Vec<f64> = zrow.iter().map(|&v| v as f64).collect();
        let entity = (i % 10 != 0).then(|| r.random_range(0..n));
        let mut removed: Vec<NodeId> = Vec::new();
        if let Some(u) = entity {
            let mut near: Vec<NodeId> = gs.neighbors(u).to_vec();
            for &v in gs.neighbors(u) {
                near.extend_from_slice(gs.neighbors(v));
            }
            near.shuffle(&mut r);
            removed.extend(near.into_iter().take(r.random_range(1..8)));
        }
        let inp = PerturbInput {
            h: h.clone(),
            h_masked: h_masked.clone(),
            zc: zc_row.clone(),
            entity,
            removed: removed.clone(),
        };
        let got = perturb_and_label(&m, &inp).unwrap();

        // independent re-evaluation on a rebuilt graph
        let gone: HashSet<NodeId> = removed.iter().copied().filter(|&v| Some(v) != entity).collect();
        let kept: Vec<(NodeId, NodeId)> = gs
            .edges()
            .filter(|(a, b)| !gone.contains(a) && !gone.contains(b))
            .collect();
        let pruned = EntityGraph::from_edges(gs.node_count(), &kept).unwrap();
        let zs_of = |g: &EntityGraph| match entity {
            Some(u) => sage.embed(g, &[u]).unwrap().row(0).to_vec(),
            None => vec![0.0; sage.config.output_dim],
        };
        let predict = |h: &[f64], zs: &[f64]| {
            let x: Vec<f64> = h.iter().chain(&zc_row).chain(zs).copied().collect();
            argmax(&head.logits(&x).unwrap())
        };
        let (zs, zs_t) = (zs_of(&gs), zs_of(&pruned));
        let pred = predict(&h, &zs);
        let text_pred = predict(&h_masked, &zs);
        let graph_pred = predict(&h, &zs_t);
        let expect = (pred, text_pred, graph_pred, text_pred != pred, graph_pred != pred);
        if (got.pred, got.text_pred, got.graph_pred, got.s_t, got.s_g) != expect {
            mismatches += 1;
        }
        flips[0] += usize::from(expect.3);
        flips[1] += usize::from(expect.4);
    }

    // modes partition the test set
    let test = read_instances(&support::bundled_dir().join("test.jsonl"));
    let records: Vec<serde_json::Value> = std::fs::read_to_string(out.join("explanations.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut by_mode: BTreeMap<String, usize> = BTreeMap::new();
    let mut ids = HashSet::new();
    let mut consistent = true;
    for rec in &records {
        let mode = rec["mode"].as_str().unwrap().to_string();
        let (st, sg) = (rec["s_t"].as_bool().unwrap(), rec["s_g"].as_bool().unwrap());
        let want = match (st, sg) {
            (true, false) => "Text",
            (false, true) => "Graph",
            (true, true) => "Both",
            (false, false) => "None",
        };
        consistent &= mode == want;
        ids.insert(rec["id"].as_str().unwrap().to_string());
        *by_mode.entry(mode).or_insert(0) += 1;
    }
    let table = support::tsv_records(&out.join("modes.tsv"));
    let row = &table[0];
    let cells: usize = ["Text", "Graph", "Both", "None"]
        .iter()
        .map(|k| {
            let v: usize = row[*k].parse().unwrap();
            consistent &= by_mode.get(*k).copied().unwrap_or(0) == v;
            v
        })
        .sum();
    let test_ids: HashSet<String> = test.iter().map(|t| t.id.clone()).collect();
    let partition = consistent
        && records.len() == test.len()
        && ids == test_ids
        && cells == test.len()
        && row["total"] == test.len().to_string();
    let pass = mismatches == 0 && partition;
    verdict(
        "mode-label consistency",
        pass,
        &format!(
            "{mismatches}/200 perturbation labels differ from brute force ({} text flips, {} graph flips); \
             modes partition the {} test instances: {partition} ({by_mode:?})",
            flips[0],
            flips[1],
            test.len()
        ),
    );
    assert!(pass);
}

#[test]
fn identical_runs_are_bit_identical() {
    let [a, b] = bundled_runs();
    let (sa, sb) = (support::snapshot(&a.out), support::snapshot(&b.out));
    let differing: Vec<&PathBuf> = sa
        .keys()
        .chain(sb.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .filter(|k| sa.get(*k) != sb.get(*k))
        .collect();
    let pass = differing.is_empty() && sa.len() > 40 && sa.keys().any(|k| k.starts_with("report"));
    verdict(
        "determinism",
        pass,
        &format!(
            "{} files compared across two fresh runs, {} differ {:?}",
            sa.len(),
            differing.len(),
            differing
        ),
    );
    assert!(pass);
}
