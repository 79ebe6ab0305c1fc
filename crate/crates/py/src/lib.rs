//! Python bindings for the `hrstnet` engine. Volumes cross the boundary as flat
//! channel-first `float32` lists plus their `(d, h, w)` extent.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hrstnet::cli::{load_dataset, RunConfig};
use hrstnet::metrics::{self, BinaryMask};
use hrstnet::topology::{self, Hrstnet};
use hrstnet::training::{self, GradcheckConfig, ScheduleConfig};
use hrstnet::volume_io::{self, LabelVolume, SyntheticSpec, VolumeTensor};
use hrstnet::HrstError;

fn to_py(e: HrstError) -> PyErr {
    match e {
        HrstError::Io { .. } => PyIOError::new_err(e.to_string()),
        HrstError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Dims = (usize, usize, usize);

fn arr(d: Dims) -> [usize; 3] {
    [d.0, d.1, d.2]
}

/// Architecture hyperparameters.
#[pyclass(name = "ModelConfig", module = "hrstnet_py", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: topology::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (variant=4, embed_dim=96, patch=4, window=4, heads=None, in_channels=4, num_classes=4))]
    fn new(
        variant: usize,
        embed_dim: usize,
        patch: usize,
        window: usize,
        heads: Option<Vec<usize>>,
        in_channels: usize,
        num_classes: usize,
    ) -> PyResult<Self> {
        let mut inner = topology::ModelConfig {
            variant,
            embed_dim,
            patch,
            window,
            in_channels,
            num_classes,
            ..Default::default()
        };
        if let Some(h) = heads {
            inner.heads = h;
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// HRSTNet-2 with 8 channels and window 2.
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: topology::ModelConfig::tiny(),
        }
    }

    #[getter]
    fn variant(&self) -> usize {
        self.inner.variant
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    /// Smallest extent every input axis must be a multiple of.
    fn min_multiple(&self) -> usize {
        self.inner.min_multiple()
    }

    fn param_count(&self) -> PyResult<usize> {
        topology::param_count(&self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Network with its parameters.
#[pyclass(name = "Model", module = "hrstnet_py")]
pub struct PyModel {
    net: Hrstnet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            net: Hrstnet::new(config.inner.clone(), seed).map_err(to_py)?,
        })
    }

    /// Loads parameters from a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = training::load_checkpoint(path).map_err(to_py)?;
        Ok(Self {
            net: Hrstnet::from_params(c.model, c.params).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.net.config().clone(),
        }
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Logits `[classes, d, h, w]`, flattened.
    fn forward(&self, image: Vec<f32>, dims: Dims) -> PyResult<Vec<f32>> {
        let vol = VolumeTensor::new(self.net.config().in_channels, arr(dims), image)
            .map_err(to_py)?;
        Ok(self.net.forward(&vol).map_err(to_py)?.into_data())
    }

    /// Tiled inference; returns argmax labels.
    #[pyo3(signature = (image, dims, roi, overlap=0.5))]
    fn predict(&self, image: Vec<f32>, dims: Dims, roi: Dims, overlap: f64) -> PyResult<Vec<u32>> {
        let vol = VolumeTensor::new(self.net.config().in_channels, arr(dims), image)
            .map_err(to_py)?;
        let logits =
            volume_io::sliding_window_infer(&self.net, &vol, arr(roi), overlap).map_err(to_py)?;
        Ok(volume_io::argmax_labels(&logits)
            .map_err(to_py)?
            .data()
            .to_vec())
    }

    /// `(total, dice, ce)` of the combined loss.
    fn loss(&self, image: Vec<f32>, labels: Vec<u32>, dims: Dims) -> PyResult<(f64, f64, f64)> {
        let cfg = self.net.config();
        let vol = VolumeTensor::new(cfg.in_channels, arr(dims), image).map_err(to_py)?;
        let lab = LabelVolume::new(arr(dims), cfg.num_classes, labels).map_err(to_py)?;
        let t = self.net.loss(&vol, &lab).map_err(to_py)?;
        Ok((t.total, t.dice, t.ce))
    }
}

/// Shape trace as a JSON string, or as text with `text=True`.
#[pyfunction]
#[pyo3(signature = (config, dims, text=false))]
fn shape_trace(config: &PyModelConfig, dims: Dims, text: bool) -> PyResult<String> {
    let t = topology::shape_trace(&config.inner, arr(dims)).map_err(to_py)?;
    Ok(if text { t.to_string() } else { t.to_json() })
}

/// `(image, labels)` of a seeded synthetic case.
#[pyfunction]
#[pyo3(signature = (seed, dims, num_classes=2, channels=1, radius=(3.0, 5.0), noise_std=0.1))]
fn synthetic_case(
    seed: u64,
    dims: Dims,
    num_classes: usize,
    channels: usize,
    radius: (f32, f32),
    noise_std: f32,
) -> PyResult<(Vec<f32>, Vec<u32>)> {
    let g = volume_io::generate_synthetic(&SyntheticSpec {
        seed,
        dims: arr(dims),
        channels,
        num_classes,
        radius: [radius.0, radius.1],
        noise_std,
        ..Default::default()
    })
    .map_err(to_py)?;
    Ok((g.image.into_data(), g.labels.data().to_vec()))
}

fn mask(data: Vec<bool>, dims: Dims, spacing: (f32, f32, f32)) -> PyResult<BinaryMask> {
    BinaryMask::new(arr(dims), [spacing.0, spacing.1, spacing.2], data).map_err(to_py)
}

#[pyfunction]
fn dice_score(pred: Vec<bool>, gt: Vec<bool>, dims: Dims) -> PyResult<f64> {
    let (p, g) = (mask(pred, dims, (1.0, 1.0, 1.0))?, mask(gt, dims, (1.0, 1.0, 1.0))?);
    metrics::dice_score(&p, &g).map_err(to_py)
}

/// 95th-percentile symmetric surface distance in physical units.
#[pyfunction]
#[pyo3(signature = (pred, gt, dims, spacing=(1.0, 1.0, 1.0)))]
fn hd95(pred: Vec<bool>, gt: Vec<bool>, dims: Dims, spacing: (f32, f32, f32)) -> PyResult<f64> {
    let (p, g) = (mask(pred, dims, spacing)?, mask(gt, dims, spacing)?);
    metrics::hd95(&p, &g).map_err(to_py)
}

/// Warmup-cosine learning rate at an optimizer step.
#[pyfunction]
#[pyo3(signature = (step, base_lr=1e-4, warmup_epochs=50, total_epochs=300, steps_per_epoch=1, min_lr=0.0))]
fn lr_at(
    step: usize,
    base_lr: f64,
    warmup_epochs: usize,
    total_epochs: usize,
    steps_per_epoch: usize,
    min_lr: f64,
) -> PyResult<f64> {
    let s = ScheduleConfig {
        base_lr,
        warmup_epochs,
        total_epochs,
        steps_per_epoch,
        min_lr,
    };
    s.validate().map_err(to_py)?;
    Ok(training::lr_at(step, &s))
}

/// Runs the finite-difference check on the tiny model; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (seed=0, tolerance=1e-3, samples=216))]
fn gradcheck(py: Python<'_>, seed: u64, tolerance: f64, samples: usize) -> PyResult<Py<PyDict>> {
    let r = training::finite_difference_check(&GradcheckConfig {
        seed,
        tolerance,
        samples,
        ..Default::default()
    })
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("passed", r.passed)?;
    d.set_item("max_rel_err", r.max_rel_err)?;
    d.set_item("checked", r.entries.len())?;
    let fams = PyDict::new(py);
    for (f, s) in &r.families {
        fams.set_item(f.as_str(), (s.checked, s.max_rel_err, s.passed))?;
    }
    d.set_item("families", fams)?;
    Ok(d.unbind())
}

/// Trains from a TOML run config; returns per-step `(step, lr, loss)` rows.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir=None))]
fn train(config_toml: &str, out_dir: Option<&str>) -> PyResult<Vec<(u64, f64, f64)>> {
    let cfg = RunConfig::from_toml(config_toml).map_err(to_py)?;
    let data = load_dataset(&cfg).map_err(to_py)?;
    let out = out_dir.map(std::path::Path::new);
    let o = training::train(&cfg.train, &cfg.model, &data, out).map_err(to_py)?;
    Ok(o.log.iter().map(|r| (r.step, r.lr, r.loss)).collect())
}

#[pymodule]
fn hrstnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(shape_trace, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_case, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
