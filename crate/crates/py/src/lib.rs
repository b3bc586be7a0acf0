//! Python bindings: datasets, networks, curvature models, and the editing
//! entry points, exposed as the `crispe` extension module.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crispe::curvature::{
    read_curvature_cache, write_curvature_cache, CurvatureKind, CurvatureModel,
};
use crispe::editor::{
    edit_batch, edit_sequential, load_checkpoint, save_checkpoint, EditConfig, OptimizerKind,
};
use crispe::harness::data::{synthetic_tasks, LabeledDataset, Provenance};
use crispe::harness::idx::load_idx;
use crispe::harness::sweep::{build_curvature, pretrain, sweep_gamma, SweepOptions};
use crispe::harness::verify::verify;
use crispe::network::{Activation, FeedForwardNet};

fn to_py_err(e: crispe::Error) -> PyErr {
    match e {
        crispe::Error::Io(_) | crispe::Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A labeled classification dataset with features in [0, 1].
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: LabeledDataset,
}

#[pymethods]
impl Dataset {
    /// Builds a dataset from a row-major feature list and labels.
    #[staticmethod]
    #[pyo3(signature = (features, labels, class_count))]
    fn from_rows(features: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> PyResult<Self> {
        let n = features.len();
        let d = features.first().map(|r| r.len()).unwrap_or(0);
        let mut inputs = Array2::<f64>::zeros((n, d));
        for (i, row) in features.iter().enumerate() {
            if row.len() != d {
                return Err(PyValueError::new_err(format!(
                    "row {i} has {} features, expected {d}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                inputs[[i, j]] = v;
            }
        }
        LabeledDataset::new(inputs, labels, class_count, Provenance::Synthetic)
            .map(|inner| Dataset { inner })
            .map_err(to_py_err)
    }

    /// The synthetic interfering task pair (capability task, edit task).
    #[staticmethod]
    #[pyo3(signature = (seed, n_per_task, dim, classes))]
    fn synthetic_pair(seed: u64, n_per_task: usize, dim: usize, classes: usize) -> PyResult<(Self, Self)> {
        let (a, b) = synthetic_tasks(seed, n_per_task, dim, classes).map_err(to_py_err)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    /// Loads an IDX image/label file pair.
    #[staticmethod]
    fn from_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        load_idx(&images, &labels)
            .map(|inner| Dataset { inner })
            .map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    /// Seeded split into (train, held-out).
    fn split_holdout(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let (train, held) = self.inner.split_holdout(fraction, seed);
        (Dataset { inner: train }, Dataset { inner: held })
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("index {bad} out of range")));
        }
        Ok(Dataset {
            inner: self.inner.subset(&indices),
        })
    }

    fn chunks(&self, chunk_size: usize) -> PyResult<Vec<Dataset>> {
        if chunk_size == 0 {
            return Err(PyValueError::new_err("chunk_size must be positive"));
        }
        Ok(self
            .inner
            .chunks(chunk_size)
            .into_iter()
            .map(|inner| Dataset { inner })
            .collect())
    }
}

/// A dense feed-forward classifier with folded biases.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Network {
    inner: FeedForwardNet,
}

fn parse_activations(names: &[String]) -> PyResult<Vec<Activation>> {
    names
        .iter()
        .map(|n| Activation::from_name(n).map_err(to_py_err))
        .collect()
}

#[pymethods]
impl Network {
    /// Random network: `widths` runs input dimension through hidden widths
    /// to the class count; `activations` has one entry per layer.
    #[staticmethod]
    #[pyo3(signature = (widths, activations, seed))]
    fn random(widths: Vec<usize>, activations: Vec<String>, seed: u64) -> PyResult<Self> {
        let acts = parse_activations(&activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeedForwardNet::random(&widths, &acts, &mut rng)
            .map(|inner| Network { inner })
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path)
            .map(|inner| Network { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }

    fn accuracy(&self, data: &Dataset) -> PyResult<f64> {
        self.inner.accuracy(&data.inner).map_err(to_py_err)
    }

    fn loss(&self, data: &Dataset) -> PyResult<f64> {
        self.inner.dataset_loss(&data.inner).map_err(to_py_err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        let x = ndarray::Array1::from(x);
        let trace = self.inner.forward(&x.view()).map_err(to_py_err)?;
        Ok(crispe::network::argmax(&trace.logits))
    }

    fn probabilities(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = ndarray::Array1::from(x);
        let trace = self.inner.forward(&x.view()).map_err(to_py_err)?;
        Ok(trace.probs.to_vec())
    }
}

/// A capability-curvature model usable as an editing constraint.
#[pyclass]
struct Curvature {
    inner: CurvatureModel,
}

#[pymethods]
impl Curvature {
    /// Estimates curvature of the given kind ("hessian", "gnh", "kfac",
    /// "ekfac", "actcov", or "none") over the tracked layers.
    #[staticmethod]
    #[pyo3(signature = (kind, net, cap_data, layers, mc_samples = 1, seed = 0, empirical_fisher = false))]
    fn estimate(
        kind: &str,
        net: &Network,
        cap_data: &Dataset,
        layers: Vec<usize>,
        mc_samples: usize,
        seed: u64,
        empirical_fisher: bool,
    ) -> PyResult<Self> {
        let kind = CurvatureKind::from_name(kind).map_err(to_py_err)?;
        let config = EditConfig {
            tracked_layers: layers.clone(),
            mc_samples,
            seed,
            empirical_fisher,
            ..EditConfig::default()
        };
        build_curvature(kind, &net.inner, &cap_data.inner, &layers, &config)
            .map(|inner| Curvature { inner })
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf, kind: &str) -> PyResult<Self> {
        let kind = CurvatureKind::from_name(kind).map_err(to_py_err)?;
        read_curvature_cache(&path, kind)
            .map(|inner| Curvature { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_curvature_cache(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn tracked_layers(&self) -> Vec<usize> {
        self.inner.tracked_layers()
    }
}

fn config_from_kwargs(
    gamma: f64,
    layers: Vec<usize>,
    learning_rate: f64,
    max_steps: usize,
    batch_size: usize,
    early_stop_loss: f64,
    optimizer: &str,
    drift_threshold: f64,
    chunk_size: usize,
    mc_samples: usize,
    seed: u64,
    joint: bool,
    refresh_kfac: bool,
) -> PyResult<EditConfig> {
    let optimizer = match optimizer {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::adam_default(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown optimizer '{other}' (sgd or adam)"
            )))
        }
    };
    let config = EditConfig {
        gamma,
        learning_rate,
        max_steps,
        batch_size,
        early_stop_loss,
        optimizer,
        tracked_layers: layers,
        drift_threshold,
        chunk_size,
        mc_samples,
        seed,
        joint,
        refresh_kfac,
        ..EditConfig::default()
    };
    config.validate().map_err(to_py_err)?;
    Ok(config)
}

/// Plain minibatch SGD pretraining; returns the trained network and its
/// training accuracy.
#[pyfunction]
#[pyo3(signature = (net, data, epochs, learning_rate, batch_size = 32, seed = 0))]
fn pretrain_network(
    net: &Network,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Network, f64)> {
    let (trained, report) = pretrain(
        &net.inner,
        &data.inner,
        epochs,
        learning_rate,
        batch_size,
        seed,
        None,
    )
    .map_err(to_py_err)?;
    Ok((Network { inner: trained }, report.train_accuracy))
}

/// Batch editing in the low-curvature subspace. Returns the edited network,
/// the final mean edit loss, and the projector rebuild count.
#[pyfunction]
#[pyo3(signature = (net, edit_data, curvature, gamma, layers, learning_rate = 5e-4,
    max_steps = 25, batch_size = 32, early_stop_loss = 0.01, optimizer = "adam",
    drift_threshold = 0.25, mc_samples = 1, seed = 0, joint = false,
    refresh_kfac = false, cap_data = None))]
#[allow(clippy::too_many_arguments)]
fn edit(
    net: &Network,
    edit_data: &Dataset,
    curvature: &Curvature,
    gamma: f64,
    layers: Vec<usize>,
    learning_rate: f64,
    max_steps: usize,
    batch_size: usize,
    early_stop_loss: f64,
    optimizer: &str,
    drift_threshold: f64,
    mc_samples: usize,
    seed: u64,
    joint: bool,
    refresh_kfac: bool,
    cap_data: Option<&Dataset>,
) -> PyResult<(Network, f64, usize)> {
    let config = config_from_kwargs(
        gamma,
        layers,
        learning_rate,
        max_steps,
        batch_size,
        early_stop_loss,
        optimizer,
        drift_threshold,
        100,
        mc_samples,
        seed,
        joint,
        refresh_kfac,
    )?;
    let (edited, telemetry) = edit_batch(
        &net.inner,
        &edit_data.inner,
        &curvature.inner,
        &config,
        cap_data.map(|d| &d.inner),
    )
    .map_err(to_py_err)?;
    let final_loss = telemetry.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((Network { inner: edited }, final_loss, telemetry.rebuild_count))
}

/// Sequential editing over chunks with streaming factor aggregation. The
/// curvature must be a K-FAC model; returns the model after each chunk.
#[pyfunction]
#[pyo3(signature = (net, chunks, initial_factors, gamma, layers, learning_rate = 5e-4,
    max_steps = 25, batch_size = 32, early_stop_loss = 0.01, optimizer = "adam",
    drift_threshold = 0.25, mc_samples = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn edit_sequentially(
    net: &Network,
    chunks: Vec<Dataset>,
    initial_factors: &Curvature,
    gamma: f64,
    layers: Vec<usize>,
    learning_rate: f64,
    max_steps: usize,
    batch_size: usize,
    early_stop_loss: f64,
    optimizer: &str,
    drift_threshold: f64,
    mc_samples: usize,
    seed: u64,
) -> PyResult<Vec<Network>> {
    let factors = match &initial_factors.inner {
        CurvatureModel::Kfac(f) => f.clone(),
        other => {
            return Err(PyValueError::new_err(format!(
                "sequential editing needs K-FAC factors, got {}",
                other.kind().name()
            )))
        }
    };
    let config = config_from_kwargs(
        gamma,
        layers,
        learning_rate,
        max_steps,
        batch_size,
        early_stop_loss,
        optimizer,
        drift_threshold,
        chunks.first().map(|c| c.inner.len()).unwrap_or(100).max(1),
        mc_samples,
        seed,
        false,
        false,
    )?;
    let data: Vec<LabeledDataset> = chunks.into_iter().map(|c| c.inner).collect();
    let outcome = edit_sequential(&net.inner, &data, &factors, &config).map_err(to_py_err)?;
    Ok(outcome
        .models
        .into_iter()
        .map(|inner| Network { inner })
        .collect())
}

/// The gamma trade-off sweep. Returns one dict per (kind, k) grid point.
#[pyfunction]
#[pyo3(signature = (net, cap_data, edit_data, kinds, k_grid, layers,
    learning_rate = 0.2, max_steps = 25, optimizer = "sgd", seed = 42,
    curvature_examples = 0, mc_samples = 1))]
#[allow(clippy::too_many_arguments)]
fn sweep(
    py: Python<'_>,
    net: &Network,
    cap_data: &Dataset,
    edit_data: &Dataset,
    kinds: Vec<String>,
    k_grid: Vec<f64>,
    layers: Vec<usize>,
    learning_rate: f64,
    max_steps: usize,
    optimizer: &str,
    seed: u64,
    curvature_examples: usize,
    mc_samples: usize,
) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    let kinds = kinds
        .iter()
        .map(|k| CurvatureKind::from_name(k).map_err(to_py_err))
        .collect::<PyResult<Vec<_>>>()?;
    let config = config_from_kwargs(
        0.9,
        layers,
        learning_rate,
        max_steps,
        32,
        0.01,
        optimizer,
        0.25,
        100,
        mc_samples,
        seed,
        false,
        false,
    )?;
    let opts = SweepOptions {
        kinds,
        k_grid,
        config,
        curvature_examples,
        holdout_fraction: 1.0 / 6.0,
        measure_walltime: false,
    };
    let records =
        sweep_gamma(&net.inner, &cap_data.inner, &edit_data.inner, &opts).map_err(to_py_err)?;
    records
        .into_iter()
        .map(|r| {
            let dict = pyo3::types::PyDict::new(py);
            dict.set_item("curvature", r.curvature_kind)?;
            dict.set_item("gamma", r.gamma)?;
            dict.set_item("k", r.k_exponent)?;
            dict.set_item("cap_acc", r.capability_accuracy)?;
            dict.set_item("edit_acc", r.edit_accuracy)?;
            dict.set_item("retained_energy", r.retained_energy)?;
            dict.set_item("rebuilds", r.rebuild_count)?;
            Ok(dict.unbind())
        })
        .collect()
}

/// Runs the invariant verification suite; returns (all_passed, report text).
#[pyfunction]
#[pyo3(signature = (seed = 2024))]
fn run_verification(seed: u64) -> PyResult<(bool, String)> {
    let report = verify(seed).map_err(to_py_err)?;
    Ok((report.all_passed(), report.render()))
}

#[pymodule]
#[pyo3(name = "crispe")]
fn crispe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_class::<Curvature>()?;
    m.add_function(wrap_pyfunction!(pretrain_network, m)?)?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    m.add_function(wrap_pyfunction!(edit_sequentially, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_verification, m)?)?;
    Ok(())
}
