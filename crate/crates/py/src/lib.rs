//! Python bindings: datasets, configuration, training, sampling, metrics
//! and the geometric primitives.
//!
//! Coordinates cross the boundary as nested lists (`[[x, y, z], ...]`),
//! quaternions as `(w, x, y, z)` and rotation vectors as `(x, y, z)`.
//! Library errors become `ValueError` (bad input), `ArithmeticError`
//! (numerical failure) or `RuntimeError` (non-convergence).

use std::path::PathBuf;

use nalgebra::{DMatrix, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use confflow::io::{self, MoleculeRecord};
use confflow::net::{self as cnet, MolContext};
use confflow::sampler::{sample_conformers, Method, NetField};
use confflow::so3::{self, RotVec, UnitQuat};
use confflow::train::{self, TrainMolecule};
use confflow::zmatrix::{build_zmatrix, Conformer};

fn to_py(e: confflow::Error) -> PyErr {
    match e.exit_code() {
        3 => PyArithmeticError::new_err(e.to_string()),
        4 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn points(x: &Conformer) -> Vec<[f64; 3]> {
    x.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn conformer(x: Vec<[f64; 3]>) -> Conformer {
    x.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

fn quat(q: (f64, f64, f64, f64)) -> PyResult<UnitQuat> {
    let n = (q.0 * q.0 + q.1 * q.1 + q.2 * q.2 + q.3 * q.3).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(PyValueError::new_err("quaternion must be finite and nonzero"));
    }
    Ok(UnitQuat::new(q.0, q.1, q.2, q.3))
}

fn tuple4(q: &UnitQuat) -> (f64, f64, f64, f64) {
    let a = q.as_array();
    (a[0], a[1], a[2], a[3])
}

/// Run configuration (flat dotted `key = value` TOML).
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: confflow::config::Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = confflow::config::Config::from_toml(text, "<string>").map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: confflow::config::Config::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed);
    }
}

/// A set of molecules with their conformers.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: io::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: io::load_dataset(&path).map_err(to_py)?,
        })
    }

    /// Synthetic toy dataset from the `toy.*` section of `config`.
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn toy(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.toy.clone()).unwrap_or_default();
        let (inner, _) = io::generate_toy_dataset(&cfg).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Coordinate-list JSON lines (elements, bonds, conformers).
    #[staticmethod]
    fn import_coordinate_lists(path: PathBuf) -> PyResult<Self> {
        let file = std::fs::File::open(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        let inner = io::import_coordinate_lists(std::io::BufReader::new(file), &path.display().to_string()).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.molecules.len()
    }

    fn num_conformers(&self) -> usize {
        self.inner.num_conformers()
    }

    fn name(&self, index: usize) -> PyResult<Option<String>> {
        Ok(self.molecule(index)?.name.clone())
    }

    fn conformers(&self, index: usize) -> PyResult<Vec<Vec<[f64; 3]>>> {
        Ok(self.molecule(index)?.conformers.iter().map(points).collect())
    }

    /// Centroid, quaternion and internal coordinates of one conformer.
    fn decompose(&self, index: usize, conformer: usize) -> PyResult<Decomposed> {
        let m = self.molecule(index)?;
        let x = m
            .conformers
            .get(conformer)
            .ok_or_else(|| PyIndexError::new_err(format!("conformer {conformer} out of range")))?;
        let spec = build_zmatrix(&m.graph).map_err(to_py)?;
        let d = confflow::zmatrix::decompose(x, &spec).map_err(to_py)?;
        Ok(Decomposed {
            c: [d.state.c.x, d.state.c.y, d.state.c.z],
            q: tuple4(&d.state.q),
            r: d.state.z.r,
            theta: d.state.z.theta,
            phi: d.state.z.phi,
        })
    }

    /// `compose(decompose(X))` for one conformer.
    fn reconstruct(&self, index: usize, conformer: usize) -> PyResult<Vec<[f64; 3]>> {
        let m = self.molecule(index)?;
        let spec = build_zmatrix(&m.graph).map_err(to_py)?;
        let x = m
            .conformers
            .get(conformer)
            .ok_or_else(|| PyIndexError::new_err(format!("conformer {conformer} out of range")))?;
        let s = confflow::zmatrix::decompose(x, &spec).map_err(to_py)?.state;
        Ok(points(&confflow::zmatrix::compose(&s.c, &s.q, &s.z, &spec).map_err(to_py)?))
    }
}

impl PyDataset {
    fn molecule(&self, index: usize) -> PyResult<&MoleculeRecord> {
        self.inner
            .molecules
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("molecule {index} out of range ({} molecules)", self.inner.molecules.len())))
    }
}

#[pyclass(get_all)]
struct Decomposed {
    c: [f64; 3],
    q: (f64, f64, f64, f64),
    r: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

/// Trained velocity network.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: cnet::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let net = config.map(|c| c.inner.net.clone()).unwrap_or_default();
        Ok(PyModel {
            inner: cnet::Model::new(net).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: cnet::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cnet::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    /// Highest completed training stage.
    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage
    }

    /// Runs `stages` in order on the train split; returns the total loss of
    /// every optimisation step.
    #[pyo3(signature = (config, dataset, stages = vec![1, 2, 3]))]
    fn train(&mut self, config: &PyConfig, dataset: &PyDataset, stages: Vec<u8>) -> PyResult<Vec<f64>> {
        let data = training_set(&dataset.inner)?;
        let opts = config.inner.train_options();
        let mut history = Vec::new();
        for k in stages {
            let out = train::train_stage(config.inner.stage(k).map_err(to_py)?, &opts, &data, &self.inner).map_err(to_py)?;
            history.extend(out.history.iter().map(|r| r.total));
            self.inner = out.model;
        }
        Ok(history)
    }

    /// Draws `num` conformers of molecule `index`.
    #[pyo3(signature = (config, dataset, index, num, steps = None, method = None, seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        config: &PyConfig,
        dataset: &PyDataset,
        index: usize,
        num: usize,
        steps: Option<usize>,
        method: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let m = dataset.molecule(index)?;
        let ctx = MolContext::new(&m.graph).map_err(to_py)?;
        let mut sc = config.inner.sampler.clone();
        if let Some(s) = steps {
            sc.steps = s;
        }
        if let Some(name) = method {
            sc.method = name.parse::<Method>().map_err(to_py)?;
        }
        if let Some(s) = seed {
            sc.seed = s;
        }
        let prior = self.inner.prior.clone().unwrap_or_else(|| config.inner.prior.clone());
        let field = NetField { model: &self.inner, ctx: &ctx };
        let out = sample_conformers(&field, &ctx, num, &sc, &prior).map_err(to_py)?;
        Ok(out.iter().map(points).collect())
    }

    /// Log-likelihood of every conformer of molecule `index`.
    #[pyo3(signature = (config, dataset, index, probes = 16, steps = 10, seed = 0))]
    fn log_likelihood(&self, config: &PyConfig, dataset: &PyDataset, index: usize, probes: usize, steps: usize, seed: u64) -> PyResult<Vec<f64>> {
        use rand::SeedableRng;
        let m = dataset.molecule(index)?;
        let ctx = MolContext::new(&m.graph).map_err(to_py)?;
        let prior = self.inner.prior.clone().unwrap_or_else(|| config.inner.prior.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        m.conformers
            .iter()
            .map(|x| {
                train::log_likelihood(&self.inner, &ctx, x, steps, probes, &prior, &mut rng)
                    .map(|l| l.log_likelihood)
                    .map_err(to_py)
            })
            .collect()
    }
}

fn training_set(d: &io::Dataset) -> PyResult<Vec<TrainMolecule>> {
    d.split(io::Split::Train)
        .map(|m| TrainMolecule::from_conformers(&m.graph, &m.conformers).map_err(to_py))
        .collect()
}

/// `(cov_r, mat_r, cov_p, mat_p)`; coverage in percent.
#[pyfunction]
#[pyo3(signature = (generated, reference, delta = 0.5))]
fn cov_mat(generated: Vec<Vec<[f64; 3]>>, reference: Vec<Vec<[f64; 3]>>, delta: f64) -> PyResult<(f64, f64, f64, f64)> {
    let g: Vec<Conformer> = generated.into_iter().map(conformer).collect();
    let r: Vec<Conformer> = reference.into_iter().map(conformer).collect();
    let rep = confflow::metrics::cov_mat(&g, &r, delta).map_err(to_py)?;
    Ok((rep.cov_r, rep.mat_r, rep.cov_p, rep.mat_p))
}

#[pyfunction]
fn kabsch_rmsd(x: Vec<[f64; 3]>, y: Vec<[f64; 3]>) -> PyResult<f64> {
    confflow::metrics::kabsch_rmsd(&conformer(x), &conformer(y)).map_err(to_py)
}

/// Entropic transport plan between uniform marginals.
#[pyfunction]
#[pyo3(signature = (cost, epsilon = 0.1, max_iters = 100, tol = 1e-6))]
fn sinkhorn(cost: Vec<Vec<f64>>, epsilon: f64, max_iters: usize, tol: f64) -> PyResult<Vec<Vec<f64>>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != m) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    let c = DMatrix::from_fn(n, m, |i, j| cost[i][j]);
    let cfg = confflow::ot::SinkhornConfig { epsilon, max_iters, tol };
    let plan = confflow::ot::sinkhorn(&c, &confflow::ot::uniform(n), &confflow::ot::uniform(m), &cfg).map_err(to_py)?;
    Ok((0..n).map(|i| (0..m).map(|j| plan.plan[(i, j)]).collect()).collect())
}

#[pyfunction]
fn slerp(q0: (f64, f64, f64, f64), q1: (f64, f64, f64, f64), t: f64) -> PyResult<(f64, f64, f64, f64)> {
    Ok(tuple4(&so3::slerp(&quat(q0)?, &quat(q1)?, t)))
}

#[pyfunction]
fn quat_log(q: (f64, f64, f64, f64)) -> PyResult<(f64, f64, f64)> {
    let v = so3::quat_log(&quat(q)?).0;
    Ok((v.x, v.y, v.z))
}

#[pyfunction]
fn quat_exp(v: (f64, f64, f64)) -> (f64, f64, f64, f64) {
    tuple4(&so3::quat_exp(&RotVec::new(v.0, v.1, v.2)))
}

/// Oracle suites as `(suite, name, value, tolerance, passed)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_checks(seed: u64) -> PyResult<Vec<(String, String, f64, f64, bool)>> {
    let rows = confflow::check::run_checks(seed).map_err(to_py)?;
    Ok(rows
        .iter()
        .map(|r| (r.suite.to_string(), r.name.to_string(), r.value, r.tolerance, r.passed()))
        .collect())
}

#[pymodule]
fn confflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<Decomposed>()?;
    m.add_function(wrap_pyfunction!(cov_mat, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch_rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add_function(wrap_pyfunction!(quat_log, m)?)?;
    m.add_function(wrap_pyfunction!(quat_exp, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
