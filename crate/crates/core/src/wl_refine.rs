//! Weisfeiler-Lehman color refinement on graphs and on cellular complexes.
//!
//! Objects that are going to be compared are refined together: every
//! iteration builds one canonical-signature dictionary shared by all of them,
//! so equal colors mean equal signatures across objects. Histograms carry the
//! token of the run that produced them and only histograms from the same run
//! can be compared.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::complex_lift::{CellularComplex, LiftError, LiftedGraph, Neighborhood, NeighborhoodTables};
use crate::graph_io::Graph;

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, PartialEq)]
pub enum WlError {
    #[error("histograms come from different refinement runs ({0} vs {1})")]
    IncompatibleDictionaries(u64, u64),
}

/// Final per-cell colors of one object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coloring {
    pub colors: Vec<usize>,
    pub iteration: usize,
}

/// Per-dimension multiset of final colors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorHistogram {
    token: u64,
    pub per_dim: Vec<BTreeMap<usize, usize>>,
}

impl ColorHistogram {
    pub fn num_classes(&self, dim: usize) -> usize {
        self.per_dim.get(dim).map_or(0, BTreeMap::len)
    }

    pub fn total(&self, dim: usize) -> usize {
        self.per_dim.get(dim).map_or(0, |h| h.values().sum())
    }
}

/// True iff some per-dimension multiset differs.
pub fn distinguishes(a: &ColorHistogram, b: &ColorHistogram) -> Result<bool, WlError> {
    if a.token != b.token {
        return Err(WlError::IncompatibleDictionaries(a.token, b.token));
    }
    let dims = a.per_dim.len().max(b.per_dim.len());
    let empty = BTreeMap::new();
    Ok((0..dims).any(|d| a.per_dim.get(d).unwrap_or(&empty) != b.per_dim.get(d).unwrap_or(&empty)))
}

/// Generic refinement input: each item has a dimension, an initial category
/// and a fixed number of neighbor lists.
struct Structure {
    dims: Vec<usize>,
    init: Vec<usize>,
    neighbors: Vec<Vec<Vec<usize>>>,
}

pub struct Refinement {
    pub histograms: Vec<ColorHistogram>,
    pub colorings: Vec<Coloring>,
    pub iterations: usize,
}

fn refine(structures: &[Structure], max_iters: usize) -> Refinement {
    let token = NEXT_TOKEN.fetch_add(1, Ordering::Relaxed);
    let mut dict: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut colors: Vec<Vec<usize>> = structures
        .iter()
        .map(|s| {
            s.dims
                .iter()
                .zip(&s.init)
                .map(|(&d, &c)| {
                    let n = dict.len();
                    *dict.entry(vec![d, c]).or_insert(n)
                })
                .collect()
        })
        .collect();
    let mut classes = dict.len();
    let mut iterations = 0;
    let mut sig = Vec::new();
    let mut buf = Vec::new();
    while iterations < max_iters {
        dict.clear();
        let next: Vec<Vec<usize>> = structures
            .iter()
            .zip(&colors)
            .map(|(s, old)| {
                (0..s.dims.len())
                    .map(|i| {
                        sig.clear();
                        sig.push(s.dims[i]);
                        sig.push(old[i]);
                        for list in &s.neighbors[i] {
                            buf.clear();
                            buf.extend(list.iter().map(|&j| old[j]));
                            buf.sort_unstable();
                            sig.push(buf.len());
                            sig.extend_from_slice(&buf);
                        }
                        let n = dict.len();
                        *dict.entry(sig.clone()).or_insert(n)
                    })
                    .collect()
            })
            .collect();
        iterations += 1;
        colors = next;
        if dict.len() == classes {
            break;
        }
        classes = dict.len();
    }
    let histograms = structures
        .iter()
        .zip(&colors)
        .map(|(s, c)| {
            let num_dims = s.dims.iter().max().map_or(1, |d| d + 1);
            let mut per_dim = vec![BTreeMap::new(); num_dims];
            for (&d, &col) in s.dims.iter().zip(c) {
                *per_dim[d].entry(col).or_insert(0) += 1;
            }
            ColorHistogram { token, per_dim }
        })
        .collect();
    let colorings = colors
        .into_iter()
        .map(|colors| Coloring {
            colors,
            iteration: iterations,
        })
        .collect();
    Refinement {
        histograms,
        colorings,
        iterations,
    }
}

fn node_category(g: &Graph, v: usize) -> usize {
    g.node_labels.as_ref().map_or(0, |l| l[v] + 1)
}

fn graph_structure(g: &Graph) -> Structure {
    let adj = g.adjacency();
    Structure {
        dims: vec![0; g.num_nodes()],
        init: (0..g.num_nodes()).map(|v| node_category(g, v)).collect(),
        neighbors: adj.into_iter().map(|l| vec![l]).collect(),
    }
}

fn complex_structure(x: &CellularComplex, t: &NeighborhoodTables) -> Structure {
    let total = x.total_cells();
    let mut dims = Vec::with_capacity(total);
    let mut init = Vec::with_capacity(total);
    for dim in 0..3 {
        for c in x.cells(dim) {
            dims.push(dim);
            init.push(if dim == 0 { node_category(x.skeleton(), c.vertices[0]) } else { 0 });
        }
    }
    let neighbors = (0..total)
        .map(|id| Neighborhood::ALL.iter().map(|&nb| t.get(id, nb).to_vec()).collect())
        .collect();
    Structure { dims, init, neighbors }
}

/// Refines several graphs jointly with 1-WL.
pub fn wl_refine_graphs(graphs: &[&Graph], max_iters: usize) -> Refinement {
    let s: Vec<Structure> = graphs.iter().map(|g| graph_structure(g)).collect();
    refine(&s, max_iters)
}

/// Refines several lifted complexes jointly with the cellular update over the
/// four neighborhoods.
pub fn cwl_refine_complexes(items: &[(&CellularComplex, &NeighborhoodTables)], max_iters: usize) -> Refinement {
    let s: Vec<Structure> = items.iter().map(|(x, t)| complex_structure(x, t)).collect();
    refine(&s, max_iters)
}

pub fn wl_refine_graph(g: &Graph, max_iters: usize) -> ColorHistogram {
    wl_refine_graphs(&[g], max_iters).histograms.remove(0)
}

pub fn cwl_refine(x: &CellularComplex, t: &NeighborhoodTables, max_iters: usize) -> ColorHistogram {
    cwl_refine_complexes(&[(x, t)], max_iters).histograms.remove(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairReport {
    pub wl_distinguishes: bool,
    pub cwl_distinguishes: bool,
    /// Larger of the two refinement iteration counts.
    pub iterations: usize,
}

/// Runs both tests on a graph pair, lifting with ring size `m`. Refinement
/// runs until the joint partition is stable.
pub fn compare_pair(a: &Graph, b: &Graph, m: usize) -> Result<PairReport, LiftError> {
    let wl = wl_refine_graphs(&[a, b], a.num_nodes() + b.num_nodes() + 1);
    let (la, lb) = (LiftedGraph::new(a, m)?, LiftedGraph::new(b, m)?);
    let cells = la.complex.total_cells() + lb.complex.total_cells() + 1;
    let cwl = cwl_refine_complexes(&[(&la.complex, &la.tables), (&lb.complex, &lb.tables)], cells);
    let d = |r: &Refinement| distinguishes(&r.histograms[0], &r.histograms[1]).expect("shared run");
    Ok(PairReport {
        wl_distinguishes: d(&wl),
        cwl_distinguishes: d(&cwl),
        iterations: wl.iterations.max(cwl.iterations),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex_lift::LiftedGraph;

    fn c3c4() -> Graph {
        Graph::cycle(3).disjoint_union(&Graph::cycle(4))
    }

    #[test]
    fn wl_on_small_graphs() {
        assert_eq!(wl_refine_graph(&Graph::cycle(7), 10).num_classes(0), 1);
        assert_eq!(wl_refine_graph(&Graph::path(3), 10).num_classes(0), 2);
        let r = wl_refine_graphs(&[&Graph::cycle(7), &c3c4()], 20);
        assert!(!distinguishes(&r.histograms[0], &r.histograms[1]).unwrap());
    }

    #[test]
    fn cwl_separates_the_witness_pair() {
        let a = LiftedGraph::new(&Graph::cycle(7), 6).unwrap();
        let h = cwl_refine(&a.complex, &a.tables, 50);
        assert_eq!((h.num_classes(0), h.num_classes(1), h.total(2)), (1, 1, 0));

        let b = LiftedGraph::new(&c3c4(), 6).unwrap();
        let hb = cwl_refine(&b.complex, &b.tables, 50);
        assert_eq!(hb.num_classes(2), 2);

        let r = cwl_refine_complexes(&[(&a.complex, &a.tables), (&b.complex, &b.tables)], 50);
        assert!(distinguishes(&r.histograms[0], &r.histograms[1]).unwrap());
        let same = cwl_refine_complexes(&[(&a.complex, &a.tables), (&a.complex, &a.tables)], 50);
        assert!(!distinguishes(&same.histograms[0], &same.histograms[1]).unwrap());
    }

    #[test]
    fn triangle_versus_path_differ() {
        let r = compare_pair(&Graph::complete(3), &Graph::path(3), 6).unwrap();
        assert!(r.wl_distinguishes && r.cwl_distinguishes);
        let w = compare_pair(&Graph::cycle(7), &c3c4(), 6).unwrap();
        assert!(!w.wl_distinguishes && w.cwl_distinguishes);
    }

    #[test]
    fn separate_runs_cannot_be_compared() {
        let a = wl_refine_graph(&Graph::cycle(5), 5);
        let b = wl_refine_graph(&Graph::cycle(5), 5);
        assert!(matches!(distinguishes(&a, &b), Err(WlError::IncompatibleDictionaries(_, _))));
    }

    #[test]
    fn node_labels_seed_colors() {
        let g = Graph::path(3).with_node_labels(vec![0, 0, 1]).unwrap();
        assert_eq!(wl_refine_graph(&g, 10).num_classes(0), 3);
    }
}
