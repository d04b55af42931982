//! Lifting graphs to 2-dimensional cellular complexes.
//!
//! 0-cells are the nodes, 1-cells the edges, and one 2-cell is glued onto
//! every chordless cycle of length at most the ring size. Cell ids are global
//! and dimension-major: all 0-cells, then all 1-cells, then all 2-cells.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::graph_io::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum LiftError {
    #[error("ring size must be at least 3, got {0}")]
    RingSize(usize),
    #[error("cell {cell} references boundary id {target} which is not a cell of dimension {dim}")]
    DanglingBoundary { cell: usize, target: usize, dim: usize },
    #[error("expected {expected} node feature rows, got {found}")]
    FeatureRows { expected: usize, found: usize },
}

/// The four neighborhood kinds, in the fixed order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Neighborhood {
    Boundary,
    Coboundary,
    Lower,
    Upper,
}

impl Neighborhood {
    pub const ALL: [Neighborhood; 4] = [
        Neighborhood::Boundary,
        Neighborhood::Coboundary,
        Neighborhood::Lower,
        Neighborhood::Upper,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Neighborhood::Boundary => "B",
            Neighborhood::Coboundary => "C",
            Neighborhood::Lower => "Ndown",
            Neighborhood::Upper => "Nup",
        }
    }

    /// Dimension of the neighbors of a `dim`-cell, or `None` when the
    /// neighborhood is undefined in a 2-complex.
    pub fn source_dim(self, dim: usize) -> Option<usize> {
        match self {
            Neighborhood::Boundary | Neighborhood::Lower if dim == 0 => None,
            Neighborhood::Coboundary | Neighborhood::Upper if dim == 2 => None,
            Neighborhood::Boundary => Some(dim - 1),
            Neighborhood::Coboundary => Some(dim + 1),
            Neighborhood::Lower | Neighborhood::Upper => Some(dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub id: usize,
    pub dim: usize,
    /// Sorted global ids of (dim-1)-cells.
    pub boundary: Vec<usize>,
    /// Sorted node indices spanned by the cell.
    pub vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellularComplex {
    skeleton: Graph,
    ring_size: usize,
    cells: [Vec<Cell>; 3],
}

impl CellularComplex {
    pub fn skeleton(&self) -> &Graph {
        &self.skeleton
    }

    pub fn ring_size(&self) -> usize {
        self.ring_size
    }

    pub fn cells(&self, dim: usize) -> &[Cell] {
        &self.cells[dim]
    }

    pub fn num_cells(&self, dim: usize) -> usize {
        self.cells[dim].len()
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.cells[0].len(), self.cells[1].len(), self.cells[2].len()]
    }

    pub fn total_cells(&self) -> usize {
        self.counts().iter().sum()
    }

    /// Global id of the first cell of `dim`.
    pub fn offset(&self, dim: usize) -> usize {
        self.cells[..dim].iter().map(Vec::len).sum()
    }

    pub fn cell(&self, id: usize) -> &Cell {
        let mut i = id;
        for d in 0..3 {
            if i < self.cells[d].len() {
                return &self.cells[d][i];
            }
            i -= self.cells[d].len();
        }
        panic!("cell id {id} out of range");
    }

    pub fn dim_of(&self, id: usize) -> usize {
        self.cell(id).dim
    }

    /// Vertex sets of the 2-cells, in id order.
    pub fn two_cell_vertex_sets(&self) -> Vec<Vec<usize>> {
        self.cells[2].iter().map(|c| c.vertices.clone()).collect()
    }

    /// Rebuilds the graph from the 0- and 1-cells.
    pub fn one_skeleton(&self) -> Graph {
        let edges = self.cells[1].iter().map(|c| (c.vertices[0], c.vertices[1]));
        Graph::new(self.cells[0].len(), edges).expect("1-cells form a simple graph")
    }

    /// One line per cell: `dim id : boundary ids`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for dim in 0..3 {
            for c in &self.cells[dim] {
                let b: Vec<String> = c.boundary.iter().map(usize::to_string).collect();
                let sep = if b.is_empty() { "" } else { " " };
                writeln!(s, "{} {} :{}{}", c.dim, c.id, sep, b.join(" ")).unwrap();
            }
        }
        s
    }
}

fn adjacency_test(g: &Graph) -> impl Fn(usize, usize) -> bool + '_ {
    move |u, v| g.has_edge(u, v)
}

/// All chordless cycles of length at most `m`, as sorted vertex sets ordered
/// by (length, lexicographic vertices).
pub fn enumerate_induced_cycles(g: &Graph, m: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = enumerate_ordered(g, m)
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            c
        })
        .collect();
    out.sort_unstable_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// Each cycle is reported once, starting at its smallest vertex `s`, with the
/// second vertex smaller than the last one.
fn enumerate_ordered(g: &Graph, m: usize) -> Vec<Vec<usize>> {
    let adj = g.adjacency();
    let is_adj = adjacency_test(g);
    let mut found = Vec::new();
    if m < 3 {
        return found;
    }
    let mut path = Vec::with_capacity(m);
    for s in 0..g.num_nodes() {
        for &v1 in adj[s].iter().filter(|&&v| v > s) {
            path.clear();
            path.push(s);
            path.push(v1);
            extend(&adj, &is_adj, m, &mut path, &mut found);
        }
    }
    found
}

fn extend(
    adj: &[Vec<usize>],
    is_adj: &dyn Fn(usize, usize) -> bool,
    m: usize,
    path: &mut Vec<usize>,
    found: &mut Vec<Vec<usize>>,
) {
    let s = path[0];
    let last = *path.last().unwrap();
    for &w in &adj[last] {
        if w <= s || path.contains(&w) {
            continue;
        }
        if path[1..path.len() - 1].iter().any(|&u| is_adj(u, w)) {
            continue;
        }
        if is_adj(w, s) {
            if path[1] < w {
                let mut c = path.clone();
                c.push(w);
                found.push(c);
            }
        } else if path.len() + 1 < m {
            path.push(w);
            extend(adj, is_adj, m, path, found);
            path.pop();
        }
    }
}

pub fn lift_graph(g: &Graph, m: usize) -> Result<CellularComplex, LiftError> {
    if m < 3 {
        return Err(LiftError::RingSize(m));
    }
    let n0 = g.num_nodes();
    let zero: Vec<Cell> = (0..n0)
        .map(|v| Cell {
            id: v,
            dim: 0,
            boundary: Vec::new(),
            vertices: vec![v],
        })
        .collect();
    let n1 = g.num_edges();
    let mut edge_id = HashMap::with_capacity(n1);
    let one: Vec<Cell> = g
        .edges()
        .iter()
        .enumerate()
        .map(|(i, &(u, v))| {
            edge_id.insert((u, v), n0 + i);
            Cell {
                id: n0 + i,
                dim: 1,
                boundary: vec![u, v],
                vertices: vec![u, v],
            }
        })
        .collect();
    let two: Vec<Cell> = enumerate_induced_cycles(g, m)
        .into_iter()
        .enumerate()
        .map(|(i, vertices)| {
            let mut boundary = Vec::with_capacity(vertices.len());
            for (a, &u) in vertices.iter().enumerate() {
                for &v in &vertices[a + 1..] {
                    if let Some(&e) = edge_id.get(&(u, v)) {
                        boundary.push(e);
                    }
                }
            }
            boundary.sort_unstable();
            Cell {
                id: n0 + n1 + i,
                dim: 2,
                boundary,
                vertices,
            }
        })
        .collect();
    Ok(CellularComplex {
        skeleton: g.clone(),
        ring_size: m,
        cells: [zero, one, two],
    })
}

/// Per global cell id, four sorted id lists in [`Neighborhood::ALL`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodTables {
    counts: [usize; 3],
    lists: Vec<[Vec<usize>; 4]>,
}

impl NeighborhoodTables {
    pub fn get(&self, id: usize, nb: Neighborhood) -> &[usize] {
        &self.lists[id][nb.index()]
    }

    pub fn num_cells(&self) -> usize {
        self.lists.len()
    }

    fn offset(&self, dim: usize) -> usize {
        self.counts[..dim].iter().sum()
    }

    /// Neighbor lists of every `dim`-cell as local indices into the source
    /// dimension; `None` when the neighborhood is undefined for `dim`.
    pub fn local_lists(&self, dim: usize, nb: Neighborhood) -> Option<(usize, Vec<Vec<usize>>)> {
        let src = nb.source_dim(dim)?;
        let (own, src_off) = (self.offset(dim), self.offset(src));
        let lists = (0..self.counts[dim])
            .map(|i| self.lists[own + i][nb.index()].iter().map(|&j| j - src_off).collect())
            .collect();
        Some((src, lists))
    }
}

pub fn build_neighborhoods(x: &CellularComplex) -> Result<NeighborhoodTables, LiftError> {
    let counts = x.counts();
    let total = x.total_cells();
    let mut lists: Vec<[Vec<usize>; 4]> = vec![Default::default(); total];
    for dim in 1..3 {
        let (lo, hi) = (x.offset(dim - 1), x.offset(dim));
        for c in x.cells(dim) {
            for &b in &c.boundary {
                if b < lo || b >= hi {
                    return Err(LiftError::DanglingBoundary {
                        cell: c.id,
                        target: b,
                        dim: dim - 1,
                    });
                }
                lists[c.id][Neighborhood::Boundary.index()].push(b);
                lists[b][Neighborhood::Coboundary.index()].push(c.id);
            }
        }
    }
    for l in &mut lists {
        l[0].sort_unstable();
        l[1].sort_unstable();
    }
    for id in 0..total {
        let mut down = Vec::new();
        for &b in &lists[id][Neighborhood::Boundary.index()] {
            down.extend(lists[b][Neighborhood::Coboundary.index()].iter().filter(|&&t| t != id));
        }
        let mut up = Vec::new();
        for &c in &lists[id][Neighborhood::Coboundary.index()] {
            up.extend(lists[c][Neighborhood::Boundary.index()].iter().filter(|&&t| t != id));
        }
        down.sort_unstable();
        down.dedup();
        up.sort_unstable();
        up.dedup();
        lists[id][Neighborhood::Lower.index()] = down;
        lists[id][Neighborhood::Upper.index()] = up;
    }
    Ok(NeighborhoodTables { counts, lists })
}

/// Dimension-0 features are the node features; higher cells take the mean of
/// the features of their vertices.
pub fn initial_cell_features(x: &CellularComplex, node_feats: &Tensor) -> Result<[Tensor; 3], LiftError> {
    let n0 = x.num_cells(0);
    if node_feats.rows() != n0 {
        return Err(LiftError::FeatureRows {
            expected: n0,
            found: node_feats.rows(),
        });
    }
    let d = node_feats.cols();
    let mean_of = |cells: &[Cell]| {
        let mut t = Tensor::zeros(cells.len(), d);
        for (i, c) in cells.iter().enumerate() {
            let k = c.vertices.len() as f64;
            let row = &mut t.data_mut()[i * d..(i + 1) * d];
            for &v in &c.vertices {
                for (acc, &f) in row.iter_mut().zip(node_feats.row_slice(v)) {
                    *acc += f;
                }
            }
            row.iter_mut().for_each(|a| *a /= k);
        }
        t
    };
    Ok([node_feats.clone(), mean_of(x.cells(1)), mean_of(x.cells(2))])
}

/// Lifted complex with its tables, ready for encoding or refinement.
#[derive(Clone, Debug)]
pub struct LiftedGraph {
    pub complex: CellularComplex,
    pub tables: NeighborhoodTables,
}

impl LiftedGraph {
    pub fn new(g: &Graph, m: usize) -> Result<Self, LiftError> {
        let complex = lift_graph(g, m)?;
        let tables = build_neighborhoods(&complex)?;
        Ok(Self { complex, tables })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lifted(g: &Graph) -> (CellularComplex, NeighborhoodTables) {
        let x = lift_graph(g, 6).unwrap();
        let t = build_neighborhoods(&x).unwrap();
        (x, t)
    }

    #[test]
    fn small_graphs() {
        assert_eq!(enumerate_induced_cycles(&Graph::complete(3), 6), vec![vec![0, 1, 2]]);
        assert!(enumerate_induced_cycles(&Graph::cycle(7), 6).is_empty());
        assert_eq!(enumerate_induced_cycles(&Graph::cycle(7), 7).len(), 1);
        assert_eq!(lift_graph(&Graph::complete(4), 6).unwrap().num_cells(2), 4);
        let u = Graph::cycle(3).disjoint_union(&Graph::cycle(4));
        assert_eq!(lift_graph(&u, 6).unwrap().counts(), [7, 7, 2]);
        assert_eq!(lift_graph(&Graph::cycle(3), 2), Err(LiftError::RingSize(2)));
    }

    #[test]
    fn ordering_is_by_length_then_vertices() {
        // Triangle 3-4-5 plus square 0-1-2-3.
        let g = Graph::new(6, [(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert_eq!(enumerate_induced_cycles(&g, 6), vec![vec![3, 4, 5], vec![0, 1, 2, 3]]);
    }

    #[test]
    fn triangle_tables() {
        let (x, t) = lifted(&Graph::complete(3));
        let face = x.offset(2);
        assert_eq!(t.get(face, Neighborhood::Boundary), &[3, 4, 5]);
        assert!(t.get(face, Neighborhood::Coboundary).is_empty());
        assert!(t.get(face, Neighborhood::Upper).is_empty());
        assert!(t.get(face, Neighborhood::Lower).is_empty());
        for e in 3..6 {
            assert_eq!(t.get(e, Neighborhood::Coboundary), &[face]);
            let others: Vec<usize> = (3..6).filter(|&o| o != e).collect();
            assert_eq!(t.get(e, Neighborhood::Upper), others.as_slice());
            assert_eq!(t.get(e, Neighborhood::Lower), others.as_slice());
            assert_eq!(t.get(e, Neighborhood::Boundary).len(), 2);
        }
        for v in 0..3 {
            assert!(t.get(v, Neighborhood::Boundary).is_empty());
            assert!(t.get(v, Neighborhood::Lower).is_empty());
        }
    }

    #[test]
    fn vertices_of_two_regular_graph_have_two_upper_neighbors() {
        let (_, t) = lifted(&Graph::cycle(3).disjoint_union(&Graph::cycle(4)));
        for v in 0..7 {
            assert_eq!(t.get(v, Neighborhood::Upper).len(), 2);
        }
    }

    #[test]
    fn dangling_boundary_is_reported() {
        let mut x = lift_graph(&Graph::complete(3), 6).unwrap();
        x.cells[2][0].boundary[0] = 1;
        assert!(matches!(build_neighborhoods(&x), Err(LiftError::DanglingBoundary { .. })));
    }

    #[test]
    fn cell_features_are_vertex_means() {
        let x = lift_graph(&Graph::complete(3), 6).unwrap();
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let [_, _, f2] = initial_cell_features(&x, &eye).unwrap();
        assert_eq!(f2.row_slice(0), &[1.0 / 3.0; 3]);

        let sq = lift_graph(&Graph::cycle(4), 6).unwrap();
        let feats = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let [_, _, f2] = initial_cell_features(&sq, &feats).unwrap();
        assert_eq!(f2.row_slice(0), &[0.5, 0.5]);

        let ones = Tensor::filled(4, 2, 1.0);
        for f in initial_cell_features(&sq, &ones).unwrap() {
            assert!(f.data().iter().all(|&v| v == 1.0));
        }
        assert!(initial_cell_features(&sq, &eye).is_err());
    }

    #[test]
    fn local_lists_respect_undefined_neighborhoods() {
        let (_, t) = lifted(&Graph::complete(3));
        assert!(t.local_lists(0, Neighborhood::Boundary).is_none());
        assert!(t.local_lists(0, Neighborhood::Lower).is_none());
        assert!(t.local_lists(2, Neighborhood::Coboundary).is_none());
        assert!(t.local_lists(2, Neighborhood::Upper).is_none());
        let (src, lists) = t.local_lists(2, Neighborhood::Boundary).unwrap();
        assert_eq!((src, lists), (1, vec![vec![0, 1, 2]]));
        let (src, lists) = t.local_lists(0, Neighborhood::Coboundary).unwrap();
        assert_eq!(src, 1);
        assert_eq!(lists[0], vec![0, 1]);
    }

    #[test]
    fn dump_format() {
        let x = lift_graph(&Graph::complete(3), 6).unwrap();
        let d = x.dump();
        assert!(d.starts_with("0 0 :\n"));
        assert!(d.contains("1 3 : 0 1\n"));
        assert!(d.ends_with("2 6 : 3 4 5\n"));
    }
}
