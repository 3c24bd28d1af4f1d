//! Python bindings: `import pyhemf`.

use std::path::PathBuf;

use hemf::data::{
    self, load_checkpoint, parse_ratings, predict_with_fallback, save_checkpoint, split_dataset, Checkpoint, IdMap,
    RatingFormat, SplitMode, SplitSpec,
};
use hemf::{
    BatchConfig, CommunityUpdate, GlobalUpdate, HemfError, ModelState, OnlineConfig, OnlineSession, Rating, RatingChunk,
    SgdConfig, Side, SparseRatings, StepSchedule, SymmetricPd,
};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: HemfError) -> PyErr {
    if err.is_numerical() {
        PyArithmeticError::new_err(err.to_string())
    } else if matches!(err.root(), HemfError::Io(_)) {
        PyIOError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hemf::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn same_len(a: usize, b: usize, c: usize) -> PyResult<()> {
    if a == b && b == c {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!("length mismatch: {a}, {b}, {c}")))
    }
}

fn triples(users: &[usize], items: &[usize], values: &[f64]) -> PyResult<Vec<Rating>> {
    same_len(users.len(), items.len(), values.len())?;
    Ok(users.iter().zip(items).zip(values).map(|((&u, &i), &v)| Rating::new(u, i, v)).collect())
}

/// Sparse ratings over dense 0-based user and item indices.
#[pyclass(name = "Ratings", module = "pyhemf", from_py_object)]
#[derive(Clone)]
struct PyRatings {
    inner: SparseRatings,
}

#[pymethods]
impl PyRatings {
    #[new]
    #[pyo3(signature = (users, items, values, n_users=None, n_items=None))]
    fn new(users: Vec<usize>, items: Vec<usize>, values: Vec<f64>, n_users: Option<usize>, n_items: Option<usize>) -> PyResult<Self> {
        let entries = triples(&users, &items, &values)?;
        let nu = n_users.unwrap_or_else(|| users.iter().max().map_or(0, |m| m + 1));
        let ni = n_items.unwrap_or_else(|| items.iter().max().map_or(0, |m| m + 1));
        Ok(PyRatings { inner: SparseRatings::new(nu, ni, entries).py_err()? })
    }

    /// Reads a rating file; ids are remapped to dense indices in order of appearance.
    #[staticmethod]
    #[pyo3(signature = (path, format="csv"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: RatingFormat = format.parse().py_err()?;
        Ok(PyRatings { inner: parse_ratings(&path, format).py_err()?.ratings })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Ratings({} entries, {} users, {} items)", self.inner.len(), self.inner.n_users(), self.inner.n_items())
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    /// (users, items, values) lists.
    fn triples(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let e = self.inner.entries();
        (e.iter().map(|r| r.user).collect(), e.iter().map(|r| r.item).collect(), e.iter().map(|r| r.value).collect())
    }

    /// Returns (train, test). `protocol` is holdout, weak or kfold.
    #[pyo3(signature = (protocol="holdout", fraction=0.9, folds=5, fold=0, seed=0))]
    fn split(&self, protocol: &str, fraction: f64, folds: usize, fold: usize, seed: u64) -> PyResult<(Self, Self)> {
        let mode = match protocol {
            "holdout" => SplitMode::Holdout(fraction),
            "weak" => SplitMode::WeakGeneralization,
            "kfold" => SplitMode::KFold { folds, fold },
            other => return Err(PyValueError::new_err(format!("unknown protocol {other:?}"))),
        };
        let (train, test) = split_dataset(&self.inner, &SplitSpec { mode, seed }).py_err()?;
        Ok((PyRatings { inner: train }, PyRatings { inner: test }))
    }
}

/// Model hyperparameters. `mode` is "printed" or "conjugate".
#[pyclass(name = "Hyperparameters", module = "pyhemf", from_py_object)]
#[derive(Clone)]
struct PyHyperparameters {
    inner: hemf::Hyperparameters,
}

#[pymethods]
impl PyHyperparameters {
    #[new]
    #[pyo3(signature = (latent_dim=5, sigma2=1.0, alpha=1.0, beta=1.0, lambda0=1.0, iota0=None, w0_scale=1.0, mode="printed"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        latent_dim: usize,
        sigma2: f64,
        alpha: f64,
        beta: f64,
        lambda0: f64,
        iota0: Option<f64>,
        w0_scale: f64,
        mode: &str,
    ) -> PyResult<Self> {
        let mut h = hemf::Hyperparameters::new(latent_dim);
        h.sigma2 = sigma2;
        h.alpha = alpha;
        h.beta = beta;
        h.lambda0 = lambda0;
        if let Some(v) = iota0 {
            h.iota0 = v;
        }
        h.w0 = SymmetricPd::scaled_identity(latent_dim.max(1), w0_scale).py_err()?;
        h.community_update = match mode {
            "printed" => CommunityUpdate::Printed,
            "conjugate" => CommunityUpdate::Conjugate,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        h.validate().py_err()?;
        Ok(PyHyperparameters { inner: h })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim
    }
    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn lambda0(&self) -> f64 {
        self.inner.lambda0
    }
    #[getter]
    fn iota0(&self) -> f64 {
        self.inner.iota0
    }

    fn __repr__(&self) -> String {
        let h = &self.inner;
        format!(
            "Hyperparameters(latent_dim={}, sigma2={}, alpha={}, beta={}, lambda0={}, iota0={})",
            h.latent_dim, h.sigma2, h.alpha, h.beta, h.lambda0, h.iota0
        )
    }
}

fn predict_pairs(state: &ModelState, users: &[usize], items: &[usize]) -> PyResult<Vec<f64>> {
    same_len(users.len(), items.len(), items.len())?;
    Ok(users.iter().zip(items).map(|(&u, &i)| predict_with_fallback(state, u, i, None)).collect())
}

/// A fitted model state.
#[pyclass(name = "Model", module = "pyhemf")]
struct PyModel {
    state: ModelState,
}

#[pymethods]
impl PyModel {
    /// Batch variational fit.
    #[staticmethod]
    #[pyo3(signature = (ratings, hyper, d_init=1, k_init=1, seed=0, max_sweeps=200, tolerance=1e-6, empirical=false))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        ratings: &PyRatings,
        hyper: &PyHyperparameters,
        d_init: usize,
        k_init: usize,
        seed: u64,
        max_sweeps: usize,
        tolerance: f64,
        empirical: bool,
    ) -> PyResult<Self> {
        let config = BatchConfig { d_init, k_init, seed, max_sweeps, tolerance, empirical };
        let fit = py.detach(|| hemf::fit_batch(&ratings.inner, &hyper.inner, &config)).py_err()?;
        Ok(PyModel { state: fit.state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { state: load_checkpoint(&path).py_err()?.state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let c = Checkpoint::from_state(self.state.clone(), IdMap::new(), IdMap::new());
        save_checkpoint(&path, &c).py_err()
    }

    /// Predicted ratings; unseen indices use the mixture-mean factor.
    fn predict(&self, users: Vec<usize>, items: Vec<usize>) -> PyResult<Vec<f64>> {
        predict_pairs(&self.state, &users, &items)
    }

    fn rmse(&self, ratings: &PyRatings) -> PyResult<f64> {
        data::rmse(&data::predict_all(&self.state, &ratings.inner, None), &ratings.inner).py_err()
    }

    #[getter]
    fn elbo_trace(&self) -> Vec<f64> {
        self.state.elbo_trace.clone()
    }

    /// (D, K): user and item component counts.
    #[getter]
    fn n_components(&self) -> (usize, usize) {
        (self.state.n_components(Side::User), self.state.n_components(Side::Item))
    }

    /// Most probable component per entity; `side` is "user" or "item".
    fn assignments(&self, side: &str) -> PyResult<Vec<usize>> {
        let side = match side {
            "user" => Side::User,
            "item" => Side::Item,
            other => return Err(PyValueError::new_err(format!("unknown side {other:?}"))),
        };
        Ok(self.state.side(side).memberships.iter().map(|q| q.argmax()).collect())
    }

    #[getter]
    fn hyperparameters(&self) -> PyHyperparameters {
        PyHyperparameters { inner: self.state.hyper.clone() }
    }
}

/// Streaming fit over chunks of (user, item, rating) triples.
#[pyclass(name = "Streamer", module = "pyhemf")]
struct PyStreamer {
    session: OnlineSession,
}

#[pymethods]
impl PyStreamer {
    /// `globals` is "recomputed" or "printed".
    #[new]
    #[pyo3(signature = (hyper, d_init=1, k_init=1, seed=0, globals="recomputed", propagation=0, empirical_every=None, spawn=true, merge=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        hyper: &PyHyperparameters,
        d_init: usize,
        k_init: usize,
        seed: u64,
        globals: &str,
        propagation: usize,
        empirical_every: Option<usize>,
        spawn: bool,
        merge: bool,
    ) -> PyResult<Self> {
        let globals = match globals {
            "recomputed" => GlobalUpdate::Recomputed,
            "printed" => GlobalUpdate::Printed,
            other => return Err(PyValueError::new_err(format!("unknown globals {other:?}"))),
        };
        let config = OnlineConfig { globals, propagation_sweeps: propagation, empirical_every, spawn, merge };
        Ok(PyStreamer { session: OnlineSession::new(&hyper.inner, d_init, k_init, seed, config).py_err()? })
    }

    /// Absorbs one chunk. Pairs seen before become revisions.
    fn process<'py>(
        &mut self,
        py: Python<'py>,
        users: Vec<usize>,
        items: Vec<usize>,
        values: Vec<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let chunk = RatingChunk::classify(triples(&users, &items, &values)?, &self.session.observed);
        let report = self.session.process_chunk(&chunk).py_err()?;
        let d = PyDict::new(py);
        d.set_item("new_users", report.new_users)?;
        d.set_item("new_items", report.new_items)?;
        d.set_item("spawned_users", report.spawned_users)?;
        d.set_item("spawned_items", report.spawned_items)?;
        d.set_item("merged_users", report.merged_users)?;
        d.set_item("merged_items", report.merged_items)?;
        d.set_item("empirical_pass", report.empirical_pass)?;
        Ok(d)
    }

    /// Runs an empirical-Bayes pass now and returns its ELBO.
    fn empirical_pass(&mut self) -> PyResult<f64> {
        self.session.empirical_pass().py_err()
    }

    fn predict(&self, users: Vec<usize>, items: Vec<usize>) -> PyResult<Vec<f64>> {
        predict_pairs(&self.session.state, &users, &items)
    }

    fn rmse(&self, ratings: &PyRatings) -> PyResult<f64> {
        let state = &self.session.state;
        data::rmse(&data::predict_all(state, &ratings.inner, None), &ratings.inner).py_err()
    }

    #[getter]
    fn chunks_processed(&self) -> u64 {
        self.session.chunks_processed
    }

    #[getter]
    fn n_components(&self) -> (usize, usize) {
        let s = &self.session.state;
        (s.n_components(Side::User), s.n_components(Side::Item))
    }

    /// Snapshot of the current state.
    fn model(&self) -> PyModel {
        PyModel { state: self.session.state.clone() }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_session(&self.session, IdMap::new(), IdMap::new())).py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (session, _, _) = load_checkpoint(&path).py_err()?.into_session(None);
        Ok(PyStreamer { session })
    }
}

/// Stochastic gradient descent baseline.
#[pyclass(name = "SgdModel", module = "pyhemf")]
struct PySgdModel {
    inner: hemf::SgdModel,
}

#[pymethods]
impl PySgdModel {
    #[new]
    #[pyo3(signature = (latent_dim=5, step=0.01, decay=1e-4, regularization=0.02, seed=0))]
    fn new(latent_dim: usize, step: f64, decay: f64, regularization: f64, seed: u64) -> PyResult<Self> {
        let config = SgdConfig { latent_dim, schedule: StepSchedule { initial: step, decay }, regularization, seed };
        Ok(PySgdModel { inner: hemf::SgdModel::new(&config).py_err()? })
    }

    fn process(&mut self, users: Vec<usize>, items: Vec<usize>, values: Vec<f64>) -> PyResult<()> {
        let chunk = RatingChunk::fresh(triples(&users, &items, &values)?);
        self.inner.process_chunk(&chunk).py_err()
    }

    /// Predictions; pairs with an unseen entity get `fallback`.
    #[pyo3(signature = (users, items, fallback=0.0))]
    fn predict(&self, users: Vec<usize>, items: Vec<usize>, fallback: f64) -> PyResult<Vec<f64>> {
        same_len(users.len(), items.len(), items.len())?;
        Ok(users.iter().zip(&items).map(|(&u, &i)| self.inner.predict(u, i).unwrap_or(fallback)).collect())
    }
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    hemf::math::digamma(x).py_err()
}

/// Root mean squared error of `predictions` against the entries of `ratings`, in order.
#[pyfunction]
fn rmse(predictions: Vec<f64>, ratings: &PyRatings) -> PyResult<f64> {
    data::rmse(&predictions, &ratings.inner).py_err()
}

/// Samples from the generative model. Returns (ratings, user_labels, item_labels).
#[pyfunction]
#[pyo3(signature = (hyper, d_true, k_true, n_users, n_items, density, seed=0))]
fn sample(
    hyper: &PyHyperparameters,
    d_true: usize,
    k_true: usize,
    n_users: usize,
    n_items: usize,
    density: f64,
    seed: u64,
) -> PyResult<(PyRatings, Vec<usize>, Vec<usize>)> {
    let s = hemf::sample_from_model(&hyper.inner, d_true, k_true, n_users, n_items, density, seed).py_err()?;
    Ok((PyRatings { inner: s.ratings }, s.user_labels, s.item_labels))
}

#[pymodule]
fn pyhemf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRatings>()?;
    m.add_class::<PyHyperparameters>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStreamer>()?;
    m.add_class::<PySgdModel>()?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    Ok(())
}
