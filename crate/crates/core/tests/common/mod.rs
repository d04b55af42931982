#![allow(dead_code)]

use cellclat::ccnn::{init_params, readout_prefix, CcnnConfig, PreparedGraph};
use cellclat::diffcore::{ParameterStore, BATCH_NORM_EPS};
use cellclat::trim_scheduler::init_scheduler;
use cellclat::graph_io::{initial_node_features, Dataset, FeatureScheme, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Every vertex subset of size 3..=m whose induced subgraph is a single cycle,
/// i.e. connected with all induced degrees equal to two. Sorted.
pub fn brute_force_induced_cycles(g: &Graph, m: usize) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    assert!(n <= 16, "oracle enumerates all 2^n subsets");
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size < 3 || size > m {
            continue;
        }
        let vs: Vec<usize> = (0..n).filter(|&v| mask >> v & 1 == 1).collect();
        let deg_two = vs
            .iter()
            .all(|&v| vs.iter().filter(|&&w| w != v && g.has_edge(v, w)).count() == 2);
        if !deg_two {
            continue;
        }
        let mut seen = vec![vs[0]];
        let mut stack = vec![vs[0]];
        while let Some(v) = stack.pop() {
            for &w in &vs {
                if g.has_edge(v, w) && !seen.contains(&w) {
                    seen.push(w);
                    stack.push(w);
                }
            }
        }
        if seen.len() == vs.len() {
            out.push(vs);
        }
    }
    out.sort_by(|a, b| (a.len(), a).cmp(&(b.len(), b)));
    out
}

/// All graphs on `n` labeled vertices (one per edge subset).
pub fn all_graphs(n: usize) -> impl Iterator<Item = Graph> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    let k = pairs.len();
    (0u64..(1 << k)).map(move |mask| {
        let edges = pairs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, e)| *e);
        Graph::new(n, edges).unwrap()
    })
}

pub fn random_connected<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
    loop {
        let g = Graph::random(n, p, rng);
        if g.is_connected() {
            return g;
        }
    }
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn prepare(graphs: &[Graph], max_degree: usize, m: usize) -> Vec<PreparedGraph> {
    graphs
        .iter()
        .map(|g| {
            let f = initial_node_features(g, FeatureScheme::DegreeOneHot, max_degree, 0).unwrap();
            PreparedGraph::new(g, &f, m).unwrap()
        })
        .collect()
}

/// Rings of length 4..=7 with a random chord pattern; class 0 carries one
/// extra triangle hanging off a vertex, class 1 an extra square.
pub fn ring_dataset<R: Rng>(n_graphs: usize, rng: &mut R) -> Dataset {
    let graphs = (0..n_graphs)
        .map(|i| {
            let label = i % 2;
            let k = rng.random_range(4..=7);
            let mut edges: Vec<(usize, usize)> = (0..k).map(|v| (v, (v + 1) % k)).collect();
            let extra = if label == 0 { 2 } else { 3 };
            let mut prev = 0;
            for j in 0..extra {
                edges.push((prev, k + j));
                prev = k + j;
            }
            edges.push((prev, 0));
            Graph::new(k + extra, edges).unwrap().with_graph_label(label)
        })
        .collect();
    Dataset {
        name: "rings".into(),
        graphs,
        num_classes: 2,
        num_node_labels: None,
    }
}

/// Class is decided by the number of planted triangles (1 or 3); every graph
/// also carries two planted squares at random anchors. Pieces hang off a
/// path backbone.
pub fn planted_redundancy<R: Rng>(n_graphs: usize, rng: &mut R) -> Dataset {
    let mut graphs = Vec::new();
    for i in 0..n_graphs {
        let label = i % 2;
        let triangles = if label == 0 { 1 } else { 3 };
        let squares = 2;
        let backbone = 6;
        let mut edges: Vec<(usize, usize)> = (0..backbone - 1).map(|v| (v, v + 1)).collect();
        let mut n = backbone;
        for (count, size) in [(triangles, 3usize), (squares, 4usize)] {
            for _ in 0..count {
                let anchor = rng.random_range(0..backbone);
                let mut prev = anchor;
                for _ in 0..size - 1 {
                    edges.push((prev, n));
                    prev = n;
                    n += 1;
                }
                edges.push((prev, anchor));
            }
        }
        graphs.push(Graph::new(n, edges).unwrap().with_graph_label(label));
    }
    Dataset {
        name: "planted".into(),
        graphs,
        num_classes: 2,
        num_node_labels: None,
    }
}

/// Every parameter and normalization buffer redrawn, so no term vanishes by
/// accident of initialization.
pub fn random_store(cfg: &CcnnConfig, seed: u64) -> ParameterStore {
    let mut store = init_params(cfg, seed).unwrap();
    init_scheduler(&mut store, cfg.jump_width()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let names: Vec<String> = store.buffers().map(|(n, _)| n.clone()).collect();
    for n in names {
        let var = n.ends_with("running_var");
        let b = store.buffer_mut(&n).unwrap();
        for v in b.data_mut() {
            *v = if var { rng.random_range(0.5..2.0) } else { normal.sample(&mut rng) };
        }
    }
    store
}

/// Eval-mode readout perceptron evaluated at the zero vector, written out
/// directly from the stored tensors.
pub fn readout_at_zero(store: &ParameterStore, dim: usize) -> Vec<f64> {
    let p = readout_prefix(dim);
    let get = |s: &str| store.value(&format!("{p}.{s}")).unwrap().data().to_vec();
    let (b1, g, beta) = (get("lin1.bias"), get("norm.weight"), get("norm.bias"));
    let rm = store.buffer(&format!("{p}.norm.running_mean")).unwrap().data().to_vec();
    let rv = store.buffer(&format!("{p}.norm.running_var")).unwrap().data().to_vec();
    let hidden: Vec<f64> = (0..b1.len())
        .map(|j| ((b1[j] - rm[j]) / (rv[j] + BATCH_NORM_EPS).sqrt() * g[j] + beta[j]).max(0.0))
        .collect();
    let w2 = store.value(&format!("{p}.lin2.weight")).unwrap();
    let b2 = get("lin2.bias");
    (0..w2.cols())
        .map(|o| b2[o] + hidden.iter().enumerate().map(|(j, h)| h * w2.get(j, o)).sum::<f64>())
        .collect()
}
