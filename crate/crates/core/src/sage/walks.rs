use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;

use super::SageGraph;
use crate::graph::NodeId;
use crate::rng::{self, Rng};

/// Neighbour draws: proportional to edge weight on weighted graphs, uniform
/// otherwise.
pub struct Sampler<'a, G: SageGraph + ?Sized> {
    g: &'a G,
    cumulative: Option<Vec<Vec<f64>>>,
}

impl<'a, G: SageGraph + ?Sized> Sampler<'a, G> {
    pub fn new(g: &'a G) -> Self {
        let n = g.node_count();
        let cumulative = (n > 0 && g.edge_weights(0).is_some()).then(|| {
            (0..n as NodeId)
                .map(|u| {
                    let mut acc = 0.0;
                    g.edge_weights(u)
                        .unwrap_or(&[])
                        .iter()
                        .map(|w| {
                            acc += w;
                            acc
                        })
                        .collect()
                })
                .collect()
        });
        Sampler { g, cumulative }
    }

    pub fn graph(&self) -> &'a G {
        self.g
    }

    pub fn is_weighted(&self) -> bool {
        self.cumulative.is_some()
    }

    /// One random-walk step, `None` from an isolated node.
    pub fn step(&self, u: NodeId, rng: &mut Rng) -> Option<NodeId> {
        let nbrs = self.g.neighbors(u);
        if nbrs.is_empty() {
            return None;
        }
        Some(nbrs[self.pick(u, rng)])
    }

    fn pick(&self, u: NodeId, rng: &mut Rng) -> usize {
        match &self.cumulative {
            Some(cum) => {
                let cum = &cum[u as usize];
                let total = *cum.last().unwrap();
                let r = rng.random::<f64>() * total;
                cum.partition_point(|&c| c <= r).min(cum.len() - 1)
            }
            None => rng.random_range(0..self.g.neighbors(u).len()),
        }
    }

    /// `fanout` neighbours of `u`. Unweighted nodes with enough neighbours are
    /// sampled without replacement; everything else with replacement. An
    /// isolated node stands in for its own neighbour.
    pub fn sample(&self, u: NodeId, fanout: usize, rng: &mut Rng) -> Vec<NodeId> {
        let nbrs = self.g.neighbors(u);
        if nbrs.is_empty() {
            return vec![u];
        }
        if self.cumulative.is_none() && nbrs.len() >= fanout {
            return index::sample(rng, nbrs.len(), fanout)
                .into_iter()
                .map(|i| nbrs[i])
                .collect();
        }
        (0..fanout).map(|_| nbrs[self.pick(u, rng)]).collect()
    }
}

/// Positive `(start, visited)` pairs from fixed random walks. Each walk of
/// `walk_length` steps pairs its start node with the nodes reached within
/// `window` steps; returns to the start are skipped. Isolated nodes emit one
/// `(v, v)` pair per walk.
pub fn sample_walks<G: SageGraph + ?Sized>(g: &G, cfg: &super::WalkConfig) -> Vec<(NodeId, NodeId)> {
    let sampler = Sampler::new(g);
    let mut pairs = Vec::new();
    let reach = cfg.walk_length.min(cfg.window);
    for v in 0..g.node_count() as NodeId {
        let mut rng = rng::stream_indexed(cfg.seed, "sage.walks", v as u64);
        for _ in 0..cfg.walks_per_node {
            let mut cur = v;
            for _ in 0..reach {
                match sampler.step(cur, &mut rng) {
                    None => {
                        pairs.push((v, v));
                        break;
                    }
                    Some(next) => {
                        if next != v {
                            pairs.push((v, next));
                        }
                        cur = next;
                    }
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledNeighborhood {
    pub layer1: Vec<NodeId>,
    /// `layer2[i]` are the samples drawn around `layer1[i]`.
    pub layer2: Vec<Vec<NodeId>>,
}

pub fn sample_neighborhood<G: SageGraph + ?Sized>(
    g: &G,
    node: NodeId,
    fanouts: [usize; 2],
    seed: u64,
) -> SampledNeighborhood {
    let sampler = Sampler::new(g);
    let mut rng = rng::stream_indexed(seed, "sage.neighborhood", node as u64);
    let layer1 = sampler.sample(node, fanouts[0], &mut rng);
    let layer2 = layer1
        .iter()
        .map(|&v| sampler.sample(v, fanouts[1], &mut rng))
        .collect();
    SampledNeighborhood { layer1, layer2 }
}

/// Negatives drawn from the degree^0.75 unigram distribution.
pub struct NegativeSampler {
    dist: Option<WeightedIndex<f64>>,
    n: usize,
}

impl NegativeSampler {
    pub fn new<G: SageGraph + ?Sized>(g: &G) -> Self {
        let n = g.node_count();
        let weights: Vec<f64> = (0..n as NodeId)
            .map(|u| (g.neighbors(u).len() as f64).powf(0.75))
            .collect();
        NegativeSampler {
            dist: WeightedIndex::new(&weights).ok(),
            n,
        }
    }

    /// Up to `q` negatives for the pair `(i, j)`, never equal to either.
    pub fn draw(&self, i: NodeId, j: NodeId, q: usize, rng: &mut Rng) -> Vec<NodeId> {
        let eligible = self.n - if i == j { 1 } else { 2 }.min(self.n);
        if eligible == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(q);
        while out.len() < q {
            let mut found = None;
            if let Some(dist) = &self.dist {
                for _ in 0..64 {
                    let k = dist.sample(rng) as NodeId;
                    if k != i && k != j {
                        found = Some(k);
                        break;
                    }
                }
            }
            let k = found.unwrap_or_else(|| loop {
                let k = rng.random_range(0..self.n) as NodeId;
                if k != i && k != j {
                    break k;
                }
            });
            out.push(k);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster_graph::build_cluster_graph;
    use crate::graph::EntityGraph;
    use crate::louvain::Assignment;
    use crate::sage::WalkConfig;
    use rand::SeedableRng;

    #[test]
    fn star_walk_of_length_one_pairs_center_with_a_leaf() {
        let g = EntityGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let cfg = WalkConfig {
            walk_length: 1,
            walks_per_node: 3000,
            window: 5,
            seed: 1,
        };
        let pairs = sample_walks(&g, &cfg);
        let mut counts = [0usize; 4];
        for &(c, leaf) in pairs.iter().filter(|p| p.0 == 0) {
            assert_eq!(c, 0);
            counts[leaf as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.04, "{counts:?}");
        }
    }

    #[test]
    fn pair_count_bound() {
        let edges: Vec<_> = (0..99).map(|i| (i, i + 1)).collect();
        let g = EntityGraph::from_edges(100, &edges).unwrap();
        let pairs = sample_walks(&g, &WalkConfig::default());
        assert!(pairs.len() <= 100 * 50 * (5 * 4 / 2));
    }

    #[test]
    fn isolated_nodes_pair_with_themselves() {
        let g = EntityGraph::from_edges(3, &[(0, 1)]).unwrap();
        let pairs = sample_walks(&g, &WalkConfig::default());
        assert_eq!(pairs.iter().filter(|p| **p == (2, 2)).count(), 50);
        let n = sample_neighborhood(&g, 2, [25, 10], 0);
        assert_eq!(n.layer1, vec![2]);
    }

    #[test]
    fn degree_one_node_repeats_its_neighbor() {
        let g = EntityGraph::from_edges(2, &[(0, 1)]).unwrap();
        let n = sample_neighborhood(&g, 0, [25, 10], 3);
        assert_eq!(n.layer1, vec![1; 25]);
        assert!(n.layer2.iter().all(|l| l == &vec![0; 10]));
        assert_eq!(n, sample_neighborhood(&g, 0, [25, 10], 3));
    }

    #[test]
    fn weighted_steps_follow_weight_ratios() {
        // Three-cluster fan: hub cluster 0 linked to cluster 1 (size 1) and
        // cluster 2 (size 3) by one cross edge each, so W = 1 and 1/3.
        let g = EntityGraph::from_edges(5, &[(0, 1), (0, 2)]).unwrap();
        let a = Assignment::new(vec![0, 1, 2, 2, 2]);
        let cg = build_cluster_graph(&g, &a).unwrap();
        let sampler = Sampler::new(&cg);
        let mut rng = Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let steps = 1_000_000;
        for _ in 0..steps {
            counts[sampler.step(0, &mut rng).unwrap() as usize] += 1;
        }
        let total = 1.0 + 1.0 / 3.0;
        for (c, w) in [(1, 1.0), (2, 1.0 / 3.0)] {
            let expected = w / total;
            let got = counts[c] as f64 / steps as f64;
            assert!((got - expected).abs() / expected < 0.02, "{c}: {got} vs {expected}");
        }
    }

    #[test]
    fn negatives_exclude_the_pair() {
        let g = EntityGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let ns = NegativeSampler::new(&g);
        let mut rng = Rng::seed_from_u64(0);
        let negs = ns.draw(0, 1, 50, &mut rng);
        assert_eq!(negs, vec![2; 50]);
        let tiny = EntityGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert!(NegativeSampler::new(&tiny).draw(0, 1, 5, &mut rng).is_empty());
    }
}
