//! Python bindings: graphs, lifting, WL/CWL comparison, NT-Xent, TU loading
//! and the command-line driver.

use std::path::PathBuf;

use cellclat::complex_lift::{enumerate_induced_cycles, lift_graph, CellularComplex};
use cellclat::config::Denominator;
use cellclat::contrastive::ntxent_value;
use cellclat::diffcore::Tensor;
use cellclat::graph_io;
use cellclat::wl_refine::compare_pair;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Graph", module = "cellclat_py", from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: graph_io::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (num_nodes, edges, label=None))]
    fn new(num_nodes: usize, edges: Vec<(usize, usize)>, label: Option<usize>) -> PyResult<Self> {
        let mut g = graph_io::Graph::new(num_nodes, edges).map_err(value_err)?;
        g.graph_label = label;
        Ok(Self { inner: g })
    }

    #[staticmethod]
    fn cycle(n: usize) -> Self {
        Self { inner: graph_io::Graph::cycle(n) }
    }

    #[staticmethod]
    fn complete(n: usize) -> Self {
        Self { inner: graph_io::Graph::complete(n) }
    }

    #[staticmethod]
    fn petersen() -> Self {
        Self { inner: graph_io::Graph::petersen() }
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn label(&self) -> Option<usize> {
        self.inner.graph_label
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    fn disjoint_union(&self, other: &PyGraph) -> Self {
        Self {
            inner: self.inner.disjoint_union(&other.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("Graph(num_nodes={}, num_edges={})", self.inner.num_nodes(), self.inner.num_edges())
    }
}

#[pyclass(name = "CellComplex", module = "cellclat_py")]
pub struct PyComplex {
    inner: CellularComplex,
}

#[pymethods]
impl PyComplex {
    /// `(N0, N1, N2)`.
    fn counts(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.counts();
        (a, b, c)
    }

    fn two_cells(&self) -> Vec<Vec<usize>> {
        self.inner.two_cell_vertex_sets()
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn __repr__(&self) -> String {
        let [a, b, c] = self.inner.counts();
        format!("CellComplex(N0={a}, N1={b}, N2={c})")
    }
}

#[pyfunction]
#[pyo3(signature = (graph, ring_size=6))]
fn lift(graph: &PyGraph, ring_size: usize) -> PyResult<PyComplex> {
    Ok(PyComplex {
        inner: lift_graph(&graph.inner, ring_size).map_err(value_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (graph, max_length=6))]
fn induced_cycles(graph: &PyGraph, max_length: usize) -> Vec<Vec<usize>> {
    enumerate_induced_cycles(&graph.inner, max_length)
}

/// `(wl_distinguishes, cwl_distinguishes, iterations)`.
#[pyfunction]
#[pyo3(signature = (a, b, ring_size=6))]
fn wl_compare(a: &PyGraph, b: &PyGraph, ring_size: usize) -> PyResult<(bool, bool, usize)> {
    let r = compare_pair(&a.inner, &b.inner, ring_size).map_err(value_err)?;
    Ok((r.wl_distinguishes, r.cwl_distinguishes, r.iterations))
}

/// NT-Xent between unit-norm row sets `z` and `z_aug`.
#[pyfunction]
#[pyo3(signature = (z, z_aug, rho=0.2, include_positive=false))]
fn ntxent(z: Vec<Vec<f64>>, z_aug: Vec<Vec<f64>>, rho: f64, include_positive: bool) -> PyResult<f64> {
    let a = Tensor::from_rows(&z).map_err(value_err)?;
    let b = Tensor::from_rows(&z_aug).map_err(value_err)?;
    let denom = if include_positive {
        Denominator::IncludePositive
    } else {
        Denominator::ExcludePositive
    };
    ntxent_value(&a, &b, rho, denom).map_err(value_err)
}

/// Returns the graphs of a TU-format dataset directory; labels are on each graph.
#[pyfunction]
#[pyo3(signature = (path, name=None))]
fn load_tu_dataset(path: PathBuf, name: Option<String>) -> PyResult<Vec<PyGraph>> {
    let name = match name {
        Some(n) => n,
        None => path
            .file_name()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| value_err("cannot infer a dataset name from the path"))?,
    };
    let ds = graph_io::parse_tu_dataset(&path, &name).map_err(value_err)?;
    Ok(ds.graphs.into_iter().map(|inner| PyGraph { inner }).collect())
}

/// Runs the command-line tool with `args` (no program name) and returns
/// `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("cellclat".to_string()).chain(args);
        let code = cellclat::cli::run(argv, &mut out, &mut err);
        (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
    })
}

#[pymodule]
fn cellclat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyComplex>()?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(induced_cycles, m)?)?;
    m.add_function(wrap_pyfunction!(wl_compare, m)?)?;
    m.add_function(wrap_pyfunction!(ntxent, m)?)?;
    m.add_function(wrap_pyfunction!(load_tu_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
