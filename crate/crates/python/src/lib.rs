//! Python bindings for `ncfr`.
//!
//! Matrices cross the boundary as lists of rows. Errors from the core crate
//! surface as `ValueError`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use ncfr::eval::{self, PredictionRule};
use ncfr::model::init_state;
use ncfr::runner::{self, ExperimentConfig};
use ncfr::{baselines, gibbs_sweep, synth, AlphaMode, ChainRng, NoiseMode, SweepConfig};

fn err(e: ncfr::NcfrError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn to_rows<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn parse_rule(rule: &str) -> PyResult<PredictionRule> {
    match rule {
        "expected_mask" => Ok(PredictionRule::ExpectedMask),
        "linear" => Ok(PredictionRule::Linear),
        other => Err(PyValueError::new_err(format!("unknown prediction rule {other:?}"))),
    }
}

/// Inputs `x` (p by n) and responses `y` (q by n), one column per observation.
#[pyclass(name = "Dataset", module = "ncfr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: ncfr::RegressionDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (x, y, missing=None))]
    fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, missing: Option<Vec<usize>>) -> PyResult<Self> {
        let mut inner = ncfr::RegressionDataset::new(to_matrix(&x)?, to_matrix(&y)?).map_err(err)?;
        if let Some(m) = missing {
            inner = inner.with_missing(m).map_err(err)?;
        }
        Ok(Self { inner })
    }

    /// Read the whitespace-separated dataset format.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ncfr::io::read_dataset(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ncfr::io::write_dataset(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.x())
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.y())
    }

    #[getter]
    fn missing(&self) -> Vec<usize> {
        self.inner.missing().iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(p={}, q={}, n={})", self.inner.p(), self.inner.q(), self.inner.n())
    }
}

/// A snapshot of every unknown in the model.
#[pyclass(name = "State", module = "ncfr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: ncfr::LatentState,
}

#[pymethods]
impl PyState {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn s(&self) -> Vec<Vec<bool>> {
        to_rows(self.inner.s())
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.z())
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.q())
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.p())
    }

    #[getter]
    fn psi_y(&self) -> Vec<f64> {
        self.inner.psi_y().iter().copied().collect()
    }

    #[getter]
    fn psi_z(&self) -> Vec<f64> {
        self.inner.psi_z().iter().copied().collect()
    }

    /// Predicted responses for the columns of `x`.
    #[pyo3(signature = (x, rule="expected_mask"))]
    fn predict(&self, x: Vec<Vec<f64>>, rule: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&parse_rule(rule)?.predict(&self.inner, &to_matrix(&x)?)))
    }

    fn log_likelihood(&self, data: &PyDataset) -> PyResult<f64> {
        ncfr::model::joint_log_likelihood(&self.inner, &data.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("State(k={}, alpha={:.4})", self.inner.k(), self.inner.alpha())
    }
}

/// One Markov chain over a fixed dataset.
#[pyclass(name = "Sampler", module = "ncfr_py")]
struct PySampler {
    data: ncfr::RegressionDataset,
    cfg: SweepConfig,
    state: ncfr::LatentState,
    rng: ChainRng,
}

#[pymethods]
impl PySampler {
    /// `alpha=None` samples the IBP strength; a number fixes it.
    #[new]
    #[pyo3(signature = (data, k_init=6, seed=0, alpha=None, noise="diagonal"))]
    fn new(data: &PyDataset, k_init: usize, seed: u64, alpha: Option<f64>, noise: &str) -> PyResult<Self> {
        let noise_mode = match noise {
            "diagonal" => NoiseMode::Diagonal,
            "isotropic" => NoiseMode::Isotropic,
            other => return Err(PyValueError::new_err(format!("unknown noise mode {other:?}"))),
        };
        let alpha_mode = alpha.map_or(AlphaMode::Sampled, |value| AlphaMode::Fixed { value });
        let hp = runner::config::Priors::default().hyperparams(noise_mode, alpha_mode);
        let mut rng = ChainRng::seed_from_u64(seed);
        let state = init_state(&data.inner, &hp, k_init, &mut rng).map_err(err)?;
        let cfg = SweepConfig { hp, strategy: ncfr::ProposalStrategy::plain_prior(), options: Default::default() };
        Ok(Self { data: data.inner.clone(), cfg, state, rng })
    }

    /// Run `n` sweeps and return the feature count after each.
    #[pyo3(signature = (n=1))]
    fn sweep(&mut self, n: usize) -> PyResult<Vec<usize>> {
        let mut ks = Vec::with_capacity(n);
        for _ in 0..n {
            let rep = gibbs_sweep(&mut self.state, &self.data, &self.cfg, 1.0, &mut self.rng).map_err(err)?;
            ks.push(rep.post_sweep_k);
        }
        Ok(ks)
    }

    #[getter]
    fn state(&self) -> PyState {
        PyState { inner: self.state.clone() }
    }
}

/// Draw a synthetic dataset; returns the dataset and its ground truth as a dict.
#[pyfunction]
#[pyo3(signature = (p, q, k_true, n, seed=0, noise_y=None, noise_z=None))]
fn generate<'py>(
    py: Python<'py>,
    p: usize,
    q: usize,
    k_true: usize,
    n: usize,
    seed: u64,
    noise_y: Option<f64>,
    noise_z: Option<f64>,
) -> PyResult<(PyDataset, Bound<'py, PyDict>)> {
    let mut cfg = synth::SynthConfig::new(p, q, k_true, n, seed);
    if let Some(v) = noise_y {
        cfg.noise_y = v;
    }
    if let Some(v) = noise_z {
        cfg.noise_z = v;
    }
    let (data, truth) = synth::generate(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("s", to_rows(&truth.s))?;
    d.set_item("z", to_rows(&truth.z))?;
    d.set_item("q", to_rows(&truth.q))?;
    d.set_item("p", to_rows(&truth.p))?;
    Ok((PyDataset { inner: data }, d))
}

/// Ridge least-squares coefficients `R` with `Y ~ R X`.
#[pyfunction]
#[pyo3(signature = (data, ridge=None))]
fn fit_frr(data: &PyDataset, ridge: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&baselines::fit_frr(&data.inner, ridge).map_err(err)?))
}

/// Normalized squared error per response dimension.
#[pyfunction]
fn nlse(y_hat: Vec<Vec<f64>>, y_true: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let v: DVector<f64> = eval::nlse(&to_matrix(&y_hat)?, &to_matrix(&y_true)?).map_err(err)?;
    Ok(v.iter().copied().collect())
}

/// Run every model of an experiment file and return the metrics table.
#[pyfunction]
#[pyo3(signature = (config, out=None, seed=None, chains=None))]
fn run(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, chains: Option<usize>) -> PyResult<String> {
    let mut exp = ExperimentConfig::load(&config).map_err(err)?;
    exp.apply_overrides(seed, out, chains);
    exp.validate().map_err(err)?;
    let outcomes = runner::run_all(&exp).map_err(err)?;
    let rows: Vec<_> = outcomes.into_iter().map(|o| (o.name, o.chain, o.report)).collect();
    Ok(runner::metrics_table(&rows))
}

#[pymodule]
fn ncfr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PySampler>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_frr, m)?)?;
    m.add_function(wrap_pyfunction!(nlse, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
