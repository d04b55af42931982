//! Graph datasets: the TU on-disk layout, single-graph edge lists and
//! initial node features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing required file {0}")]
    MissingFile(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("non-contiguous graph ids: id {found} follows {prev}")]
    NonContiguous { prev: usize, found: usize },
    #[error("edge ({0}, {1}) connects nodes of different graphs")]
    EdgeCrossesGraphs(usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge endpoint {index} out of range for {num_nodes} nodes")]
    NodeOutOfRange { index: usize, num_nodes: usize },
    #[error("{what}: expected {expected} entries, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label-onehot features requested on a graph without node labels")]
    MissingNodeLabels,
    #[error("node label {label} outside the {num_labels} known categories")]
    LabelOutOfRange { label: usize, num_labels: usize },
}

/// Undirected simple graph. Edges are stored once as `(min, max)`, sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    pub node_labels: Option<Vec<usize>>,
    pub graph_label: Option<usize>,
}

impl Graph {
    /// Builds a graph, merging duplicate and reversed edges. Self-loops and
    /// out-of-range endpoints are errors.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            for index in [u, v] {
                if index >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { index, num_nodes });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Self {
            num_nodes,
            edges: set.into_iter().collect(),
            node_labels: None,
            graph_label: None,
        })
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self, GraphError> {
        if labels.len() != self.num_nodes {
            return Err(GraphError::CountMismatch {
                what: "node labels",
                expected: self.num_nodes,
                found: labels.len(),
            });
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: usize) -> Self {
        self.graph_label = Some(label);
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Sorted neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Renames node `i` to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        let mut g = Graph::new(self.num_nodes, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])))
            .expect("a permutation preserves validity");
        if let Some(labels) = &self.node_labels {
            let mut out = vec![0; labels.len()];
            for (i, &l) in labels.iter().enumerate() {
                out[perm[i]] = l;
            }
            g.node_labels = Some(out);
        }
        g.graph_label = self.graph_label;
        g
    }

    pub fn cycle(n: usize) -> Graph {
        Graph::new(n, (0..n).map(|i| (i, (i + 1) % n))).expect("cycle needs n >= 3")
    }

    pub fn path(n: usize) -> Graph {
        Graph::new(n, (1..n).map(|i| (i - 1, i))).expect("valid path")
    }

    pub fn complete(n: usize) -> Graph {
        Graph::new(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)))).expect("valid clique")
    }

    pub fn petersen() -> Graph {
        let outer = (0..5).map(|i| (i, (i + 1) % 5));
        let spokes = (0..5).map(|i| (i, i + 5));
        let inner = (0..5).map(|i| (5 + i, 5 + (i + 2) % 5));
        Graph::new(10, outer.chain(spokes).chain(inner)).expect("valid Petersen graph")
    }

    /// Nodes of `other` are shifted past the nodes of `self`.
    pub fn disjoint_union(&self, other: &Graph) -> Graph {
        let off = self.num_nodes;
        let edges = self
            .edges
            .iter()
            .copied()
            .chain(other.edges.iter().map(|&(u, v)| (u + off, v + off)));
        let mut g = Graph::new(off + other.num_nodes, edges).expect("union of valid graphs");
        if let (Some(a), Some(b)) = (&self.node_labels, &other.node_labels) {
            g.node_labels = Some(a.iter().chain(b).copied().collect());
        }
        g
    }

    /// Erdős–Rényi sample: each pair is an edge with probability `p`.
    pub fn random<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(n, edges).expect("valid random graph")
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.num_nodes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    /// Number of distinct node-label categories, when node labels exist.
    pub num_node_labels: Option<usize>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.graph_label.unwrap_or(0)).collect()
    }

    pub fn max_degree(&self) -> usize {
        self.graphs
            .iter()
            .flat_map(|g| g.degrees())
            .max()
            .unwrap_or(0)
    }

    /// Label one-hot when node labels exist, otherwise degree one-hot up to the
    /// dataset maximum degree.
    pub fn default_feature_scheme(&self) -> FeatureScheme {
        if self.num_node_labels.is_some() {
            FeatureScheme::LabelOneHot
        } else {
            FeatureScheme::DegreeOneHot
        }
    }

    pub fn node_features(&self, scheme: FeatureScheme) -> Result<Vec<Tensor>, GraphError> {
        let max_degree = self.max_degree();
        let num_labels = self.num_node_labels.unwrap_or(0);
        self.graphs
            .iter()
            .map(|g| initial_node_features(g, scheme, max_degree, num_labels))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureScheme {
    LabelOneHot,
    DegreeOneHot,
    Constant,
}

impl std::str::FromStr for FeatureScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label-onehot" => Ok(Self::LabelOneHot),
            "degree-onehot" => Ok(Self::DegreeOneHot),
            "constant" => Ok(Self::Constant),
            other => Err(format!("unknown feature scheme {other:?}")),
        }
    }
}

/// `num_labels` is the dataset-wide label count (only used by label one-hot).
pub fn initial_node_features(
    g: &Graph,
    scheme: FeatureScheme,
    max_degree: usize,
    num_labels: usize,
) -> Result<Tensor, GraphError> {
    let n = g.num_nodes();
    match scheme {
        FeatureScheme::Constant => Ok(Tensor::filled(n, 1, 1.0)),
        FeatureScheme::DegreeOneHot => {
            let dim = max_degree + 1;
            let mut t = Tensor::zeros(n, dim);
            for (i, d) in g.degrees().into_iter().enumerate() {
                t.data_mut()[i * dim + d.min(max_degree)] = 1.0;
            }
            Ok(t)
        }
        FeatureScheme::LabelOneHot => {
            let labels = g.node_labels.as_ref().ok_or(GraphError::MissingNodeLabels)?;
            let mut t = Tensor::zeros(n, num_labels);
            for (i, &l) in labels.iter().enumerate() {
                if l >= num_labels {
                    return Err(GraphError::LabelOutOfRange { label: l, num_labels });
                }
                t.data_mut()[i * num_labels + l] = 1.0;
            }
            Ok(t)
        }
    }
}

fn read_file(path: &Path) -> Result<String, GraphError> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_int_lines(path: &Path) -> Result<Vec<i64>, GraphError> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<i64>().map_err(|e| GraphError::Parse {
            file: file_name(path),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Maps arbitrary integer labels to `0..k` in increasing order of the original value.
fn remap(values: &[i64]) -> (Vec<usize>, usize) {
    let ids: BTreeMap<i64, usize> = values
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    (values.iter().map(|v| ids[v]).collect(), ids.len())
}

/// Reads `<dir>/<name>_A.txt`, `_graph_indicator.txt`, `_graph_labels.txt` and
/// (if present) `_node_labels.txt`.
pub fn parse_tu_dataset(dir: &Path, name: &str) -> Result<Dataset, GraphError> {
    let path = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));
    let a_path = path("A");
    let ind_path = path("graph_indicator");
    let gl_path = path("graph_labels");
    let nl_path = path("node_labels");
    for p in [&a_path, &ind_path, &gl_path] {
        if !p.exists() {
            return Err(GraphError::MissingFile(p.clone()));
        }
    }

    let indicator = parse_int_lines(&ind_path)?;
    let mut prev = 0usize;
    let mut graph_of = Vec::with_capacity(indicator.len());
    for (i, &g) in indicator.iter().enumerate() {
        if g < 1 {
            return Err(GraphError::Parse {
                file: file_name(&ind_path),
                line: i + 1,
                msg: format!("graph id {g} is not positive"),
            });
        }
        let g = g as usize;
        if g != prev && g != prev + 1 {
            return Err(GraphError::NonContiguous { prev, found: g });
        }
        prev = g;
        graph_of.push(g - 1);
    }
    let num_graphs = prev;
    let mut first_node = vec![0usize; num_graphs + 1];
    for &g in &graph_of {
        first_node[g + 1] += 1;
    }
    for g in 0..num_graphs {
        first_node[g + 1] += first_node[g];
    }

    let graph_labels = parse_int_lines(&gl_path)?;
    if graph_labels.len() != num_graphs {
        return Err(GraphError::CountMismatch {
            what: "graph labels",
            expected: num_graphs,
            found: graph_labels.len(),
        });
    }
    let (graph_labels, num_classes) = remap(&graph_labels);

    let node_labels = if nl_path.exists() {
        let raw = parse_int_lines(&nl_path)?;
        if raw.len() != graph_of.len() {
            return Err(GraphError::CountMismatch {
                what: "node labels",
                expected: graph_of.len(),
                found: raw.len(),
            });
        }
        Some(remap(&raw))
    } else {
        None
    };

    let a_text = read_file(&a_path)?;
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (i, line) in a_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| GraphError::Parse {
            file: file_name(&a_path),
            line: i + 1,
            msg,
        };
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected \"row, col\", got {line:?}")));
        };
        let a: usize = a.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let b: usize = b.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        if a == 0 || b == 0 || a > graph_of.len() || b > graph_of.len() {
            return Err(bad(format!("node index out of range 1..={}", graph_of.len())));
        }
        let (u, v) = (a - 1, b - 1);
        let g = graph_of[u];
        if graph_of[v] != g {
            return Err(GraphError::EdgeCrossesGraphs(a, b));
        }
        if u == v {
            return Err(GraphError::SelfLoop(a));
        }
        edges[g].push((u - first_node[g], v - first_node[g]));
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, list) in edges.into_iter().enumerate() {
        let n = first_node[g + 1] - first_node[g];
        let mut graph = Graph::new(n, list)?.with_graph_label(graph_labels[g]);
        if let Some((labels, _)) = &node_labels {
            graph = graph.with_node_labels(labels[first_node[g]..first_node[g + 1]].to_vec())?;
        }
        graphs.push(graph);
    }
    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes,
        num_node_labels: node_labels.map(|(_, k)| k),
    })
}

/// Writes a dataset in the TU layout (1-indexed, both edge directions).
pub fn write_tu_dataset(ds: &Dataset, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let (mut a, mut ind, mut gl, mut nl) = (String::new(), String::new(), String::new(), String::new());
    let mut offset = 0;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for &(u, v) in g.edges() {
            writeln!(a, "{}, {}", u + offset + 1, v + offset + 1).unwrap();
            writeln!(a, "{}, {}", v + offset + 1, u + offset + 1).unwrap();
        }
        for _ in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1).unwrap();
        }
        writeln!(gl, "{}", g.graph_label.unwrap_or(0)).unwrap();
        if let Some(labels) = &g.node_labels {
            for l in labels {
                writeln!(nl, "{l}").unwrap();
            }
        }
        offset += g.num_nodes();
    }
    let name = &ds.name;
    fs::write(dir.join(format!("{name}_A.txt")), a)?;
    fs::write(dir.join(format!("{name}_graph_indicator.txt")), ind)?;
    fs::write(dir.join(format!("{name}_graph_labels.txt")), gl)?;
    if ds.num_node_labels.is_some() {
        fs::write(dir.join(format!("{name}_node_labels.txt")), nl)?;
    }
    Ok(())
}

/// Parses the single-graph format: `n m`, then `m` lines `u v` (0-indexed),
/// then optionally `label L`.
pub fn parse_edge_list(text: &str, file: &str) -> Result<Graph, GraphError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let bad = |line: usize, msg: String| GraphError::Parse {
        file: file.to_string(),
        line,
        msg,
    };
    let nums = |line: usize, s: &str| -> Result<(usize, usize), GraphError> {
        let mut it = s.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => Ok((
                a.parse().map_err(|e: std::num::ParseIntError| bad(line, e.to_string()))?,
                b.parse().map_err(|e: std::num::ParseIntError| bad(line, e.to_string()))?,
            )),
            _ => Err(bad(line, format!("expected two integers, got {s:?}"))),
        }
    };
    let (line, header) = lines.next().ok_or_else(|| bad(1, "empty input".into()))?;
    let (n, m) = nums(line, header)?;
    let mut edges = Vec::with_capacity(m);
    for k in 0..m {
        let (line, s) = lines
            .next()
            .ok_or_else(|| bad(line + k + 1, format!("expected {m} edges, found {k}")))?;
        edges.push(nums(line, s)?);
    }
    let mut g = Graph::new(n, edges)?;
    if let Some((line, s)) = lines.next() {
        let label = s
            .strip_prefix("label")
            .map(str::trim)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(line, format!("expected \"label L\", got {s:?}")))?;
        g = g.with_graph_label(label);
        if let Some((line, s)) = lines.next() {
            return Err(bad(line, format!("unexpected trailing content {s:?}")));
        }
    }
    Ok(g)
}

pub fn read_edge_list(path: &Path) -> Result<Graph, GraphError> {
    parse_edge_list(&read_file(path)?, &file_name(path))
}

pub fn format_edge_list(g: &Graph) -> String {
    let mut s = format!("{} {}\n", g.num_nodes(), g.num_edges());
    for &(u, v) in g.edges() {
        writeln!(s, "{u} {v}").unwrap();
    }
    if let Some(l) = g.graph_label {
        writeln!(s, "label {l}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, indicator: &str, a: &str, labels: &str) {
        fs::write(dir.join("T_graph_indicator.txt"), indicator).unwrap();
        fs::write(dir.join("T_A.txt"), a).unwrap();
        fs::write(dir.join("T_graph_labels.txt"), labels).unwrap();
    }

    #[test]
    fn triangle_and_square_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "1\n1\n1\n2\n2\n2\n2\n",
            "1, 2\n2, 1\n2, 3\n3, 1\n4, 5\n5, 6\n6, 7\n7, 4\n4, 7\n",
            "-1\n1\n",
        );
        let ds = parse_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(ds.graphs.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.graphs[0].num_edges(), 3);
        assert_eq!(ds.graphs[1].num_edges(), 4);
        assert_eq!(ds.labels(), vec![0, 1]);
        assert_eq!(ds.num_node_labels, None);
    }

    #[test]
    fn non_contiguous_indicator_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1\n1\n3\n3\n", "1, 2\n", "0\n1\n");
        let err = parse_tu_dataset(dir.path(), "T").unwrap_err();
        assert!(err.to_string().contains("non-contiguous graph ids"), "{err}");
    }

    #[test]
    fn malformed_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1\n1\n2\n2\n", "1, 3\n", "0\n1\n");
        assert!(matches!(
            parse_tu_dataset(dir.path(), "T"),
            Err(GraphError::EdgeCrossesGraphs(1, 3))
        ));
        write_fixture(dir.path(), "1\n1\n2\n2\n", "1, 2\nx, 4\n", "0\n1\n");
        match parse_tu_dataset(dir.path(), "T") {
            Err(GraphError::Parse { file, line, .. }) => assert_eq!((file.as_str(), line), ("T_A.txt", 2)),
            other => panic!("{other:?}"),
        }
        write_fixture(dir.path(), "1\n1\n", "1, 1\n", "0\n");
        assert!(matches!(parse_tu_dataset(dir.path(), "T"), Err(GraphError::SelfLoop(1))));
        fs::remove_file(dir.path().join("T_graph_labels.txt")).unwrap();
        assert!(matches!(parse_tu_dataset(dir.path(), "T"), Err(GraphError::MissingFile(_))));
    }

    #[test]
    fn features_for_triangle() {
        let g = Graph::complete(3);
        let c = initial_node_features(&g, FeatureScheme::Constant, 0, 0).unwrap();
        assert_eq!((c.rows(), c.cols()), (3, 1));
        assert!(c.data().iter().all(|&v| v == 1.0));
        let d = initial_node_features(&g, FeatureScheme::DegreeOneHot, 4, 0).unwrap();
        assert_eq!(d.cols(), 5);
        for r in 0..3 {
            assert_eq!(d.row_slice(r), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        }
        assert!(matches!(
            initial_node_features(&g, FeatureScheme::LabelOneHot, 4, 2),
            Err(GraphError::MissingNodeLabels)
        ));
    }

    #[test]
    fn degree_is_clipped() {
        let g = Graph::complete(5);
        let d = initial_node_features(&g, FeatureScheme::DegreeOneHot, 2, 0).unwrap();
        assert_eq!(d.row_slice(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = Graph::petersen().with_graph_label(3);
        let back = parse_edge_list(&format_edge_list(&g), "p").unwrap();
        assert_eq!(back, g);
        assert!(parse_edge_list("3 2\n0 1\n", "x").is_err());
        assert!(parse_edge_list("3 1\n0 5\n", "x").is_err());
    }

    #[test]
    fn generators() {
        assert_eq!(Graph::petersen().num_edges(), 15);
        assert!(Graph::petersen().degrees().iter().all(|&d| d == 3));
        let u = Graph::cycle(3).disjoint_union(&Graph::cycle(4));
        assert_eq!((u.num_nodes(), u.num_edges()), (7, 7));
        assert!(!u.is_connected());
        assert!(Graph::cycle(7).is_connected());
    }
}
