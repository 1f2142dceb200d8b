//! Python bindings: basis libraries, data sets, controller synthesis,
//! closed-loop simulation, and certificate rechecking. Matrices cross the
//! boundary as nested lists (row-major).

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ddctrl::basis::{parse_library, FunctionLibrary};
use ddctrl::data::{check_rank, DataSet, TimeMode};
use ddctrl::synth::{synthesize, SynthOptions, SynthesisResult};
use ddctrl::verify::{
    recheck_certificate, simulate_closed_loop, storage_eval, ClosedLoop,
};

fn val_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(val_err(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn mode_from_str(mode: &str) -> PyResult<TimeMode> {
    match mode {
        "discrete" => Ok(TimeMode::Discrete),
        "continuous" => Ok(TimeMode::Continuous),
        other => Err(val_err(format!("unknown mode `{other}`"))),
    }
}

/// A parsed ordered library of scalar basis functions.
#[pyclass(name = "Library", skip_from_py_object)]
#[derive(Clone)]
struct PyLibrary {
    inner: FunctionLibrary,
}

#[pymethods]
impl PyLibrary {
    #[new]
    fn new(source: &str, n: usize) -> PyResult<Self> {
        Ok(PyLibrary { inner: parse_library(source, n).map_err(val_err)? })
    }

    /// Number of basis functions.
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn source(&self) -> &str {
        self.inner.source()
    }

    #[getter]
    fn coordinate_prefix(&self) -> bool {
        self.inner.coordinate_prefix()
    }

    /// Evaluate Z(x).
    fn evaluate(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let z = self.inner.evaluate(&DVector::from_vec(x)).map_err(val_err)?;
        Ok(z.iter().copied().collect())
    }

    /// Evaluate the Jacobian Z'(x), returned row-major.
    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.jacobian(&DVector::from_vec(x)).map_err(val_err)?;
        Ok(from_matrix(&j))
    }

    fn __repr__(&self) -> String {
        format!("Library({:?}, n={})", self.inner.source(), self.inner.dim())
    }
}

/// Immutable data matrices of one collection campaign.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DataSet,
    library: FunctionLibrary,
}

#[pymethods]
impl PyDataset {
    /// Build from raw samples; `Z0` is recomputed from the library.
    #[new]
    fn new(
        library: &PyLibrary,
        u0: Vec<Vec<f64>>,
        x0: Vec<Vec<f64>>,
        x1: Vec<Vec<f64>>,
        mode: &str,
    ) -> PyResult<Self> {
        let inner = DataSet::from_samples(
            &library.inner,
            to_matrix(&u0, "u0")?,
            to_matrix(&x0, "x0")?,
            to_matrix(&x1, "x1")?,
            mode_from_str(mode)?,
        )
        .map_err(val_err)?;
        Ok(PyDataset { inner, library: library.inner.clone() })
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples()
    }

    #[getter]
    fn u0(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.u0)
    }

    #[getter]
    fn x0(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.x0)
    }

    #[getter]
    fn z0(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.z0)
    }

    #[getter]
    fn x1(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.x1)
    }

    /// Rank diagnostics as a dict.
    #[pyo3(signature = (rtol = 1e-10))]
    fn check_rank(&self, py: Python<'_>, rtol: f64) -> PyResult<Py<PyAny>> {
        let r = check_rank(&self.inner, rtol);
        let d = pyo3::types::PyDict::new(py);
        d.set_item("samples", r.samples)?;
        d.set_item("basis_dim", r.basis_dim)?;
        d.set_item("input_dim", r.input_dim)?;
        d.set_item("rank_z0", r.rank_z0)?;
        d.set_item("rank_stacked", r.rank_stacked)?;
        d.set_item("attainable_set_nonempty", r.attainable_set_nonempty)?;
        d.set_item("data_equals_model_attainable", r.data_equals_model_attainable)?;
        d.set_item("note", r.note)?;
        Ok(d.into())
    }
}

/// A synthesized controller with its certificate.
#[pyclass(name = "Controller")]
struct PyController {
    inner: SynthesisResult,
    library: FunctionLibrary,
    mode: TimeMode,
}

#[pymethods]
impl PyController {
    #[getter]
    fn k(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.k)
    }

    #[getter]
    fn k_r(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.k_r.as_ref().map(from_matrix)
    }

    #[getter]
    fn g(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.g)
    }

    #[getter]
    fn f_star(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.f_star)
    }

    #[getter]
    fn f_r_star(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.f_r_star.as_ref().map(from_matrix)
    }

    #[getter]
    fn mu(&self) -> Option<f64> {
        self.inner.mu
    }

    #[getter]
    fn certificate_kind(&self) -> &'static str {
        self.inner.certificate.kind()
    }

    #[getter]
    fn max_equality_residual(&self) -> f64 {
        self.inner.residuals.max_equality
    }

    /// Serialize to the controller JSON format.
    #[pyo3(signature = (eq_tol = 1e-8, eig_tol = 1e-9, epsilon = 1e-6))]
    fn to_json(&self, eq_tol: f64, eig_tol: f64, epsilon: f64) -> String {
        ddctrl::io::controller_to_json(&self.inner, &self.library, eq_tol, eig_tol, epsilon)
    }

    /// Re-run all certificate checks; returns a list of
    /// `(name, pass, margin, samples)` tuples.
    fn recheck(&self, dataset: &PyDataset) -> Vec<(String, bool, f64, usize)> {
        let report =
            recheck_certificate(&self.inner, &dataset.inner, &self.library, &SynthOptions::default());
        report.checks.into_iter().map(|c| (c.name, c.pass, c.margin, c.samples)).collect()
    }

    /// Simulate the closed loop from `x0`; `r` is an optional per-step
    /// reference sequence, `h` the step size in continuous time.
    #[pyo3(signature = (x0, steps, h = 0.0, r = None))]
    fn simulate(
        &self,
        x0: Vec<f64>,
        steps: usize,
        h: f64,
        r: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cl = ClosedLoop::from_result(&self.inner, self.library.clone(), self.mode);
        let r_vecs: Option<Vec<DVector<f64>>> =
            r.map(|rs| rs.into_iter().map(DVector::from_vec).collect());
        let traj = simulate_closed_loop(&cl, &DVector::from_vec(x0), r_vecs.as_deref(), steps, h)
            .map_err(run_err)?;
        Ok(traj.iter().map(|x| x.iter().copied().collect()).collect())
    }
}

/// Synthesize a controller; `objective` is a JSON string in the same
/// format the command-line tool consumes.
#[pyfunction]
#[pyo3(signature = (objective, dataset, eq_tol = 1e-8, eig_tol = 1e-9, epsilon = 1e-6))]
fn synthesize_controller(
    objective: &str,
    dataset: &PyDataset,
    eq_tol: f64,
    eig_tol: f64,
    epsilon: f64,
) -> PyResult<PyController> {
    let obj = ddctrl::io::objective_from_json(objective).map_err(val_err)?;
    let opts = SynthOptions { eq_tol, eig_tol, epsilon, dump_lmi: None };
    let result = synthesize(&obj, &dataset.inner, &dataset.library, &opts).map_err(run_err)?;
    Ok(PyController { inner: result, library: dataset.library.clone(), mode: dataset.inner.mode })
}

/// Largest eigenvalue magnitude of a square matrix.
#[pyfunction]
fn spectral_radius(m: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = to_matrix(&m, "matrix")?;
    if m.nrows() != m.ncols() {
        return Err(val_err("matrix must be square"));
    }
    Ok(ddctrl::verify::spectral_radius(&m))
}

/// Path-integral storage function S(x) for a gradient field M Z(x).
#[pyfunction]
fn storage(library: &PyLibrary, m: Vec<Vec<f64>>, x: Vec<f64>) -> PyResult<f64> {
    let m = to_matrix(&m, "M")?;
    storage_eval(&library.inner, &m, &DVector::from_vec(x)).map_err(run_err)
}

#[pymodule]
fn ddctrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLibrary>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(synthesize_controller, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(storage, m)?)?;
    Ok(())
}
