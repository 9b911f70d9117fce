use std::collections::HashMap;

use arkg_core::alsc::{head_nll_rows, Head};
use arkg_core::explain::{
    computation_edges, concept_loss, extract_subgraph, extract_text_explanation, joint_refine, perturb_and_label,
    train_concepts, train_graph_explainer, train_significance, ConceptConfig, ConceptModel, ExplainData, Frozen,
    GraphExplainer, GraphExplainerConfig, PerturbInput, RefineConfig, SignificanceConfig, WithoutVertices,
};
use arkg_core::graph::{EntityGraph, NodeId};
use arkg_core::rng::{self, Rng};
use arkg_core::sage::{encode, encode_masked, EncodePlan, SageConfig, SageModel};
use arkg_core::synth::random_connected;
use arkg_core::tape::{sigmoid, Mat, Tape};
use ndarray::{concatenate, s, Axis};
use rand::Rng as _;

fn rand_mat(r: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

fn sage_cfg(input: usize, out: usize) -> SageConfig {
    SageConfig {
        input_dim: input,
        hidden_dim: 8,
        output_dim: out,
        ..Default::default()
    }
}

/// A small frozen model over a random connected graph.
struct Fixture {
    g: EntityGraph,
    head: Head,
    sage: SageModel,
}

const DH: usize = 4;
const DC: usize = 2;
const DS: usize = 3;

impl Fixture {
    fn new(seed: u64, n: usize) -> Self {
        let mut r = rng::stream(seed, "test.explain.fixture");
        let g = random_connected(n, n, &mut r).unwrap();
        let sage = SageModel::init(sage_cfg(4, DS), n, &mut r).unwrap();
        let mut head = Head::init(DH + DC + DS, &mut r);
        head.w = rand_mat(&mut r, DH + DC + DS, 3, 2.0);
        Fixture { g, head, sage }
    }

    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            head: &self.head,
            sage: &self.sage,
            gs: &self.g,
        }
    }

    fn data(&self, seed: u64, rows: usize) -> ExplainData {
        let mut r = rng::stream(seed, "test.explain.data");
        let n = self.g.node_count() as NodeId;
        let ents = (0..rows).map(|i| (i % 5 != 4).then(|| r.random_range(0..n))).collect();
        ExplainData::new(
            &self.frozen(),
            rand_mat(&mut r, rows, DH, 1.0),
            rand_mat(&mut r, rows, DC, 1.0),
            ents,
        )
        .unwrap()
    }
}

#[test]
fn lossless_concepts_reproduce_the_full_model() {
    let fx = Fixture::new(1, 12);
    let data = fx.data(1, 30);
    let targets = fx.frozen().predict(&data.inputs()).unwrap();
    let mut tape = Tape::new();
    let hv = fx.head.bind(&mut tape, false);
    let theta = tape.constant(Mat::eye(DH));
    let w_dec = tape.constant(Mat::eye(DH));
    let b_dec = tape.constant(Mat::zeros((1, DH)));
    let h = tape.constant(data.text.clone());
    let z = tape.constant(data.graph_part());
    let (nll, r) = concept_loss(&mut tape, theta, w_dec, b_dec, &hv, h, z, &targets, 0.5);
    let x = tape.constant(data.inputs());
    let full = head_nll_rows(&mut tape, &hv, x, &targets);
    assert_eq!(tape.scalar_value(r), 0.0);
    for (a, b) in tape.value(nll).iter().zip(tape.value(full).iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let m = ConceptModel {
        theta: Mat::eye(DH),
        w_dec: Mat::eye(DH),
        b_dec: Mat::zeros((1, DH)),
        lambda_div: 0.0,
    };
    assert_eq!(m.reconstruct(&data.text), data.text);
}

fn mean_abs_cos(theta: &Mat) -> f64 {
    let k = theta.ncols();
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let (ca, cb) = (theta.column(a), theta.column(b));
            total += (ca.dot(&cb) / (ca.dot(&ca).sqrt() * cb.dot(&cb).sqrt())).abs();
        }
    }
    total / (k * (k - 1) / 2) as f64
}

#[test]
fn diversity_term_spreads_concepts() {
    let fx = Fixture::new(2, 12);
    let data = fx.data(2, 120);
    let run = |lambda_div| {
        let cfg = ConceptConfig {
            k: 6,
            lambda_div,
            lr: 1e-2,
            batch_size: 16,
            epochs: 40,
            seed: 2,
        };
        let (m, trace) = train_concepts(&fx.frozen(), &data, &cfg).unwrap();
        assert!(trace.epoch_losses.iter().all(|l| l.is_finite()));
        for c in m.theta.columns() {
            assert!((c.dot(&c) - 1.0).abs() < 1e-12);
        }
        mean_abs_cos(&m.theta)
    };
    let (with, without) = (run(1.0), run(0.0));
    assert!(with < without, "mean |cos| {with} with diversity vs {without} without");
}

#[test]
fn concept_training_rejects_one_concept() {
    let fx = Fixture::new(3, 8);
    let data = fx.data(3, 10);
    let cfg = ConceptConfig {
        k: 1,
        ..Default::default()
    };
    assert!(train_concepts(&fx.frozen(), &data, &cfg).is_err());
}

#[test]
fn identical_tokens_keep_position_order() {
    let tokens = Mat::from_elem((7, 3), 0.25);
    let theta = Mat::from_shape_fn((3, 2), |(r, c)| if r == c { 1.0 } else { 0.0 });
    assert_eq!(
        extract_text_explanation(&tokens, &theta, (2, 4), 10),
        vec![0, 1, 4, 5, 6]
    );
    assert_eq!(extract_text_explanation(&tokens, &theta, (0, 0), 3), vec![0, 1, 2]);
}

#[test]
fn planted_sentiment_token_ranks_first() {
    // Sentences are filler noise plus one token at ±5·e0; the text vector is
    // the token mean and the head reads its sign.
    let (dim, len, n) = (6, 8, 200);
    let mut r = rng::stream(4, "test.explain.planted-text");
    let mut sentences = Vec::new();
    let mut text = Mat::zeros((n, dim));
    for i in 0..n {
        let mut toks = rand_mat(&mut r, len, dim, 0.3);
        let pos = r.random_range(0..len);
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        toks.row_mut(pos).fill(0.0);
        toks[[pos, 0]] = 5.0 * sign;
        text.row_mut(i).assign(&toks.mean_axis(Axis(0)).unwrap());
        sentences.push((toks, pos));
    }
    let g = EntityGraph::from_edges(2, &[(0, 1)]).unwrap();
    let sage = SageModel::init(sage_cfg(2, 2), 2, &mut r).unwrap();
    let mut head = Head::zeros(dim + 1 + 2);
    head.w[[0, 0]] = -4.0;
    head.w[[0, 2]] = 4.0;
    let fz = Frozen {
        head: &head,
        sage: &sage,
        gs: &g,
    };
    let data = ExplainData::new(&fz, text, Mat::zeros((n, 1)), vec![None; n]).unwrap();
    let cfg = ConceptConfig {
        k: 4,
        lambda_div: 0.1,
        lr: 1e-2,
        batch_size: 32,
        epochs: 60,
        seed: 4,
    };
    let (m, _) = train_concepts(&fz, &data, &cfg).unwrap();
    let hits = sentences
        .iter()
        .filter(|(toks, pos)| extract_text_explanation(toks, &m.theta, (0, 0), 1) == vec![*pos])
        .count();
    assert!(hits as f64 >= 0.9 * n as f64, "signal token first in {hits}/{n}");
}

#[test]
fn all_ones_mask_is_the_unmasked_encoder() {
    let fx = Fixture::new(5, 20);
    let targets: Vec<NodeId> = vec![0, 3, 7, 3, 19];
    let edges = computation_edges(&fx.g, &targets);
    let mut plan = EncodePlan::full(&fx.g, &targets);
    let mut idx = edges.clone();
    plan.attach_edge_masks(&targets, |u, v| idx.intern(u, v));
    assert_eq!(idx.len(), edges.len());
    let mut tape = Tape::new();
    let sv = fx.sage.bind(&mut tape, false);
    let ones = tape.constant(Mat::ones((edges.len(), 1)));
    let masked = encode_masked(&mut tape, &sv, &plan, Some(ones));
    let plain = encode(&mut tape, &sv, &EncodePlan::full(&fx.g, &targets));
    let direct = fx.sage.embed(&fx.g, &targets).unwrap();
    for ((a, b), c) in tape
        .value(masked)
        .iter()
        .zip(tape.value(plain).iter())
        .zip(direct.iter())
    {
        assert!((a - b).abs() <= 1e-12 && (a - c).abs() <= 1e-12);
    }
}

#[test]
fn saturated_mask_leaves_only_the_entropy() {
    let fx = Fixture::new(6, 15);
    let data = fx.data(6, 24);
    let ents: Vec<NodeId> = data.entities.iter().flatten().copied().collect();
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.entities[i].is_some()).collect();
    let sub = data.subset(&rows);
    let full = fx.frozen().probs(&sub.inputs()).unwrap();
    let batch = arkg_core::explain::MaskBatch::new(&fx.g, &data.zs, &ents);
    let mut r = rng::stream(6, "test.explain.noise");
    let noise: Vec<Mat> = (0..4).map(|_| batch.noise(&mut r)).collect();
    let mut ex = GraphExplainer::init(DS, 5, &mut r);
    ex.w2.fill(0.0);
    ex.b2.fill(60.0);
    let mut tape = Tape::new();
    let sv = fx.sage.bind(&mut tape, false);
    let hv = fx.head.bind(&mut tape, false);
    let ev = [
        tape.constant(ex.w1.clone()),
        tape.constant(ex.b1.clone()),
        tape.constant(ex.w2.clone()),
        tape.constant(ex.b2.clone()),
    ];
    let hz = tape.constant(concatenate![Axis(1), sub.text, sub.zc]);
    let (ce, sp) = arkg_core::explain::edge_mask_loss(&mut tape, &sv, &hv, ev, &batch, hz, &full, &noise, 1.0, 0.3);
    for (i, &c) in tape.value(ce).iter().enumerate() {
        let entropy: f64 = full.row(i).iter().map(|&p| -p * p.ln()).sum();
        assert!((c - entropy).abs() <= 1e-9, "row {i}: {c} vs entropy {entropy}");
    }
    assert!((tape.scalar_value(sp) - 0.3).abs() <= 1e-12);
}

fn mean_inclusion(ex: &GraphExplainer, fx: &Fixture, data: &ExplainData) -> f64 {
    let ents: Vec<NodeId> = data.entities.iter().flatten().copied().collect();
    let edges = computation_edges(&fx.g, &ents);
    let l = ex.logits(&edges, &data.zs);
    l.iter().map(|&v| sigmoid(v)).sum::<f64>() / l.len() as f64
}

#[test]
fn heavy_sparsity_empties_the_mask() {
    let fx = Fixture::new(7, 15);
    let data = fx.data(7, 40);
    let cfg = GraphExplainerConfig {
        hidden: 8,
        lr: 1e-2,
        batch_size: 8,
        epochs: 30,
        samples: 2,
        seed: 7,
        ..Default::default()
    };
    let (light, _) = train_graph_explainer(
        &fx.frozen(),
        &data,
        &GraphExplainerConfig {
            sparsity: 0.0,
            ..cfg.clone()
        },
    )
    .unwrap();
    let (heavy, losses) =
        train_graph_explainer(&fx.frozen(), &data, &GraphExplainerConfig { sparsity: 1e4, ..cfg }).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let (pl, ph) = (mean_inclusion(&light, &fx, &data), mean_inclusion(&heavy, &fx, &data));
    assert!(ph < 0.01, "mean inclusion {ph} under heavy sparsity");
    assert!(ph < pl);
}

/// Stars whose centre's embedding is dominated by one loud leaf. Encoder
/// draws where the leaf's sign or presence is lost are redrawn.
fn planted_stars(seed: u64, stars: usize, leaves: usize) -> (EntityGraph, SageModel, Vec<(NodeId, NodeId)>) {
    let mut r = rng::stream(seed, "test.explain.stars");
    let n = stars * (leaves + 1);
    let mut edges = Vec::new();
    let mut planted = Vec::new();
    for s in 0..stars {
        let c = (s * (leaves + 1)) as NodeId;
        for l in 1..=leaves {
            edges.push((c, c + l as NodeId));
        }
        planted.push((c, c + r.random_range(1..=leaves) as NodeId));
    }
    let g = EntityGraph::from_edges(n, &edges).unwrap();
    let signs: Vec<f64> = (0..stars).map(|s| if s % 2 == 0 { 1.0 } else { -1.0 }).collect();
    loop {
        let mut sage = SageModel::init(sage_cfg(4, DS), n, &mut r).unwrap();
        sage.features = rand_mat(&mut r, n, 4, 0.05);
        for (&(_, leaf), sign) in planted.iter().zip(&signs) {
            sage.features[[leaf as usize, 0]] = 5.0 * sign;
        }
        let p = prototypes(&g, &sage, &planted);
        let apart = (0..3).all(|a| (a + 1..3).all(|b| (&p.row(a) - &p.row(b)).mapv(|v| v * v).sum() > 0.25));
        if apart {
            return (g, sage, planted);
        }
    }
}

/// Unit centre embeddings with the loud leaf positive, negative and removed.
fn prototypes(g: &EntityGraph, sage: &SageModel, planted: &[(NodeId, NodeId)]) -> Mat {
    let leaves: Vec<NodeId> = planted.iter().map(|p| p.1).collect();
    let bare = WithoutVertices::new(g, &leaves);
    let mut protos = Mat::zeros((3, DS));
    for &(c, leaf) in planted {
        let full = sage.embed(g, &[c]).unwrap();
        let row = if sage.features[[leaf as usize, 0]] > 0.0 { 0 } else { 1 };
        protos.row_mut(row).scaled_add(1.0, &full.row(0));
        protos
            .row_mut(2)
            .scaled_add(1.0, &sage.embed(&bare, &[c]).unwrap().row(0));
    }
    for mut p in protos.rows_mut() {
        let n = p.dot(&p).sqrt();
        p /= n;
    }
    protos
}

/// Head scoring `z_s` against the prototypes.
fn template_head(g: &EntityGraph, sage: &SageModel, planted: &[(NodeId, NodeId)]) -> Head {
    let mut head = Head::zeros(1 + 1 + DS);
    head.w
        .slice_mut(s![2.., ..])
        .assign(&(prototypes(g, sage, planted).t().to_owned() * 8.0));
    head
}

#[test]
fn planted_edge_gets_top_inclusion() {
    let runs = 10;
    let mut good = 0;
    for run in 0..runs {
        let (g, sage, planted) = planted_stars(100 + run, 12, 4);
        let head = template_head(&g, &sage, &planted);
        let fz = Frozen {
            head: &head,
            sage: &sage,
            gs: &g,
        };
        let ents: Vec<Option<NodeId>> = planted.iter().map(|&(c, _)| Some(c)).collect();
        let k = ents.len();
        let data = ExplainData::new(&fz, Mat::zeros((k, 1)), Mat::zeros((k, 1)), ents).unwrap();
        let cfg = GraphExplainerConfig {
            hidden: 16,
            lr: 1e-2,
            batch_size: 4,
            epochs: 40,
            samples: 4,
            sparsity: 0.5,
            seed: run,
            ..Default::default()
        };
        let (ex, _) = train_graph_explainer(&fz, &data, &cfg).unwrap();
        let top = planted
            .iter()
            .filter(|&&(c, leaf)| {
                let e = extract_subgraph(&ex, &g, &data.zs, c, 1, &HashMap::new());
                e.edges[0].0 == c && e.edges[0].1 == leaf
            })
            .count();
        if top == planted.len() {
            good += 1;
        }
    }
    assert!(
        good * 10 >= runs * 9,
        "planted edge on top for every star in {good}/{runs} runs"
    );
}

#[test]
fn extraction_budget_and_top_entity() {
    let fx = Fixture::new(8, 25);
    let mut r = rng::stream(8, "test.explain.extract");
    let ex = GraphExplainer::init(DS, 6, &mut r);
    let zs = fx.sage.embed_all(&fx.g).unwrap();
    let counts: HashMap<NodeId, usize> = (0..25).map(|u| (u, r.random_range(0..5))).collect();
    for u in 0..25 {
        let all = computation_edges(&fx.g, &[u]);
        let e = extract_subgraph(&ex, &fx.g, &zs, u, all.len() + 3, &counts);
        let mut got: Vec<(NodeId, NodeId)> = e.edges.iter().map(|&(a, b, _)| (a, b)).collect();
        let mut want = all.edges.clone();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
        assert!(e.edges.windows(2).all(|w| w[0].2 >= w[1].2));

        let small = extract_subgraph(&ex, &fx.g, &zs, u, 3, &counts);
        assert_eq!(small.edges.len(), 3.min(all.len()));
        let mut best: Option<NodeId> = None;
        for &v in &small.nodes {
            let better = match best {
                None => true,
                Some(b) => counts[&v] > counts[&b] || (counts[&v] == counts[&b] && v < b),
            };
            if better {
                best = Some(v);
            }
        }
        assert_eq!(small.top_entity, best);
    }
}

#[test]
fn no_op_perturbations_keep_the_prediction() {
    let fx = Fixture::new(9, 12);
    let mut r = rng::stream(9, "test.explain.noop");
    for _ in 0..50 {
        let h: Vec<f64> = (0..DH).map(|_| r.random_range(-1.0..1.0)).collect();
        let u = r.random_range(0..12);
        let inp = PerturbInput {
            h_masked: h.clone(),
            h,
            zc: (0..DC).map(|_| r.random_range(-1.0..1.0)).collect(),
            entity: Some(u),
            removed: vec![u],
        };
        let p = perturb_and_label(&fx.frozen(), &inp).unwrap();
        assert!(!p.s_t && !p.s_g);
        assert_eq!((p.pred, p.text_pred, p.graph_pred), (p.pred, p.pred, p.pred));
    }
}

/// Points at least 0.1 from both labelling hyperplanes.
fn separable(seed: u64, n: usize) -> (Mat, Vec<bool>, Vec<bool>) {
    let mut r = rng::stream(seed, "test.explain.separable");
    let (mut rows, mut st, mut sg) = (Vec::new(), Vec::new(), Vec::new());
    while st.len() < n {
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, b) = (x[0] + 0.5 * x[1] - 0.1, x[3] - x[2] + 0.2);
        if a.abs() < 0.1 || b.abs() < 0.1 {
            continue;
        }
        st.push(a > 0.0);
        sg.push(b > 0.0);
        rows.extend(x);
    }
    (Mat::from_shape_vec((n, 5), rows).unwrap(), st, sg)
}

#[test]
fn significance_fits_separable_labels_inside_the_unit_interval() {
    let (x, st, sg) = separable(10, 200);
    let cfg = SignificanceConfig {
        lr: 0.1,
        batch_size: 200,
        epochs: 6000,
        seed: 10,
    };
    let (m, trace) = train_significance(&x, &st, &sg, &cfg).unwrap();
    assert!(*trace.last().unwrap() < 0.05, "final BCE {}", trace.last().unwrap());
    let (pt, pg) = m.predict(&x);
    for (p, y) in pt.iter().zip(&st).chain(pg.iter().zip(&sg)) {
        assert!(*p > 0.0 && *p < 1.0);
        assert_eq!(*p > 0.5, *y);
    }
    let (far_t, far_g) = m.predict(&(x.mapv(|v| v * 1e3)));
    assert!(far_t.iter().chain(&far_g).all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn refinement_traces_recompose_and_bce_dominates_at_large_lambda() {
    let fx = Fixture::new(11, 15);
    let data = fx.data(11, 60);
    let x = data.inputs();
    let st: Vec<bool> = x.rows().into_iter().map(|row| row[0] > 0.0).collect();
    let sg: Vec<bool> = x.rows().into_iter().map(|row| row[1] < 0.2).collect();
    let ccfg = ConceptConfig {
        k: 3,
        epochs: 2,
        seed: 11,
        ..Default::default()
    };
    let gcfg = GraphExplainerConfig {
        hidden: 6,
        epochs: 2,
        samples: 2,
        seed: 11,
        ..Default::default()
    };
    let (con, _) = train_concepts(&fx.frozen(), &data, &ccfg).unwrap();
    let (ex, _) = train_graph_explainer(&fx.frozen(), &data, &gcfg).unwrap();
    let (sig, _) = train_significance(
        &x,
        &st,
        &sg,
        &SignificanceConfig {
            epochs: 1,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap();
    let refine = |lambda, epochs| {
        let cfg = RefineConfig {
            lambda,
            lr: 0.05,
            batch_size: 60,
            epochs,
            seed: 11,
        };
        joint_refine(&fx.frozen(), &data, &con, &ex, &sig, &st, &sg, &ccfg, &gcfg, &cfg).unwrap()
    };
    let (_, _, _, steps) = refine(1.0, 3);
    assert_eq!(steps.len(), 3);
    for s in &steps {
        assert!((s.total - s.recompose()).abs() <= 1e-9, "{s:?}");
    }
    let (_, _, sm, steps) = refine(1e6, 3000);
    let last = steps.last().unwrap();
    assert!(last.bce_t + last.bce_g < 0.05, "{last:?}");
    let (pt, pg) = sm.predict(&x);
    assert!(pt.iter().zip(&st).all(|(p, y)| (*p > 0.5) == *y));
    assert!(pg.iter().zip(&sg).all(|(p, y)| (*p > 0.5) == *y));
}
