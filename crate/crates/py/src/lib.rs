//! Python bindings: synthetic data, the trained segmentation model and the
//! refinement operators. Errors from the core crate map onto ValueError,
//! OSError or RuntimeError.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rcf::cli::{self, SequenceData};
use rcf::datagen::{self, Scenario, SequenceParams};
use rcf::error::RcfError;
use rcf::model::{self, Checkpoint, TrainConfig};
use rcf::refine::{self, AffinityMatrix, CrfParams, NCUT_ITERATIONS, NCUT_STEP};

fn to_py(e: RcfError) -> PyErr {
    match e {
        RcfError::Io(e) => PyIOError::new_err(e.to_string()),
        RcfError::Divergence(_) | RcfError::Format(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Applies every `key: value` of an optional dict through a string setter.
fn apply_options(opts: Option<&Bound<'_, PyDict>>, mut set: impl FnMut(&str, &str) -> rcf::Result<()>) -> PyResult<()> {
    if let Some(d) = opts {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) => b.to_string(),
                Err(_) => match v.extract::<Vec<f64>>() {
                    Ok(xs) => xs.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
                    Err(_) => v.str()?.to_string(),
                },
            };
            set(&key, &value).map_err(to_py)?;
        }
    }
    Ok(())
}

fn crf_params(opts: Option<&Bound<'_, PyDict>>) -> PyResult<CrfParams> {
    let mut p = CrfParams::default();
    apply_options(opts, |k, v| p.set(k, v))?;
    p.validate().map_err(to_py)?;
    Ok(p)
}

/// Soft or binary mask, row-major.
#[pyclass(name = "Mask", module = "rcf", from_py_object)]
#[derive(Clone)]
pub struct PyMask(pub datagen::Mask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        datagen::Mask::new(height, width, data).map(Self).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    fn threshold(&self, t: f64) -> Self {
        Self(self.0.threshold(t))
    }

    fn resized(&self, height: usize, width: usize) -> Self {
        Self(self.0.resized(height, width))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{})", self.0.height, self.0.width)
    }
}

/// RGB frame in [0, 1], interleaved row-major.
#[pyclass(name = "Frame", module = "rcf", from_py_object)]
#[derive(Clone)]
pub struct PyFrame(pub datagen::Frame);

#[pymethods]
impl PyFrame {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        datagen::Frame::new(height, width, data).map(Self).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<[f64; 3]> {
        if y >= self.0.height || x >= self.0.width {
            return Err(PyValueError::new_err(format!("pixel ({y}, {x}) outside {}x{}", self.0.height, self.0.width)));
        }
        Ok(self.0.pixel(y, x))
    }

    fn __repr__(&self) -> String {
        format!("Frame({}x{})", self.0.height, self.0.width)
    }
}

/// Dense optical flow in pixels.
#[pyclass(name = "FlowField", module = "rcf", from_py_object)]
#[derive(Clone)]
pub struct PyFlowField(pub datagen::FlowField);

#[pymethods]
impl PyFlowField {
    #[new]
    fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> PyResult<Self> {
        datagen::FlowField::new(height, width, u, v).map(Self).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn u(&self) -> Vec<f64> {
        self.0.u.clone()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.0.v.clone()
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        datagen::read_flo(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        datagen::write_flo(&self.0, path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("FlowField({}x{})", self.0.height, self.0.width)
    }
}

/// Frames, flows and optional features / ground truth for one video.
#[pyclass(name = "Sequence", module = "rcf", from_py_object)]
#[derive(Clone)]
pub struct PySequence(pub SequenceData);

#[pymethods]
impl PySequence {
    /// Renders a synthetic sequence. `params` overrides generator settings,
    /// e.g. `{"flow_noise": 1.0, "object_velocity": [4, 0]}`.
    #[staticmethod]
    #[pyo3(signature = (scenario, seed=0, params=None, name=None))]
    fn synthetic(scenario: &str, seed: u64, params: Option<&Bound<'_, PyDict>>, name: Option<String>) -> PyResult<Self> {
        let scenario: Scenario = scenario.parse().map_err(to_py)?;
        let mut p = SequenceParams::default();
        apply_options(params, |k, v| p.set(k, v))?;
        let s = datagen::gen_sequence(scenario, &p, seed).map_err(to_py)?;
        let name = name.unwrap_or_else(|| format!("{scenario}_{seed}"));
        Ok(Self(SequenceData::from_synthetic(name, &s)))
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn frames(&self) -> Vec<PyFrame> {
        self.0.frames.iter().cloned().map(PyFrame).collect()
    }

    #[getter]
    fn flows(&self) -> Vec<PyFlowField> {
        self.0.flows.iter().cloned().map(PyFlowField).collect()
    }

    #[getter]
    fn gt_masks(&self) -> Option<Vec<PyMask>> {
        self.0.gt_masks.as_ref().map(|m| m.iter().cloned().map(PyMask).collect())
    }

    #[getter]
    fn has_features(&self) -> bool {
        self.0.features.is_some()
    }

    fn __len__(&self) -> usize {
        self.0.frames.len()
    }

    fn __repr__(&self) -> String {
        format!("Sequence({:?}, {} frames)", self.0.name, self.0.frames.len())
    }
}

fn sequences(seqs: Vec<PySequence>) -> Vec<SequenceData> {
    seqs.into_iter().map(|s| s.0).collect()
}

/// A trained model together with its selected object channel.
#[pyclass(name = "Model", module = "rcf")]
pub struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    /// Trains on `sequences`. `config` and `crf` are dicts of hyperparameter
    /// overrides; `stage=1` stops after motion-only training.
    #[staticmethod]
    #[pyo3(signature = (sequences, config=None, crf=None, stage=2))]
    fn train(
        py: Python<'_>,
        sequences: Vec<PySequence>,
        config: Option<&Bound<'_, PyDict>>,
        crf: Option<&Bound<'_, PyDict>>,
        stage: u8,
    ) -> PyResult<Self> {
        if !(1..=2).contains(&stage) {
            return Err(PyValueError::new_err(format!("stage must be 1 or 2, got {stage}")));
        }
        let mut train = TrainConfig::default();
        apply_options(config, |k, v| train.set(k, v))?;
        let crf = crf_params(crf)?;
        let seqs = self::sequences(sequences);
        let ck = py.detach(|| cli::train_on(&train, &crf, stage, &seqs, &mut Vec::new())).map_err(to_py)?;
        Ok(Self(ck))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn object_channel(&self) -> Option<usize> {
        self.0.object_channel
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.config.channels
    }

    /// Training configuration as strings, in the same form `train` accepts.
    #[getter]
    fn config(&self) -> std::collections::BTreeMap<String, String> {
        self.0.config.to_kv()
    }

    /// Soft mask of `channel` (default: the object channel) at frame resolution.
    #[pyo3(signature = (frame, channel=None))]
    fn predict(&mut self, frame: &PyFrame, channel: Option<usize>) -> PyResult<PyMask> {
        let channel = match channel.or(self.0.object_channel) {
            Some(c) => c,
            None => return Err(PyValueError::new_err("model has no object channel; pass channel=")),
        };
        if channel >= self.0.config.channels {
            return Err(PyValueError::new_err(format!("channel {channel} out of range for {} channels", self.0.config.channels)));
        }
        model::predict_mask(&mut self.0.model, &frame.0, channel).map(PyMask).map_err(to_py)
    }

    /// Mean IoU of thresholded object-channel predictions; `crf` adds a
    /// post-processing pass with the given overrides (`{}` for defaults).
    #[pyo3(signature = (sequences, crf=None))]
    fn evaluate(&self, py: Python<'_>, sequences: Vec<PySequence>, crf: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
        let crf = match crf {
            Some(d) => Some(crf_params(Some(d))?),
            None => None,
        };
        let seqs = self::sequences(sequences);
        let ck = &self.0;
        let r = py.detach(|| cli::evaluate_checkpoint(ck, &seqs, crf.as_ref())).map_err(to_py)?;
        Ok(r.mean)
    }

    fn __repr__(&self) -> String {
        format!("Model(channels={}, object_channel={:?})", self.0.config.channels, self.0.object_channel)
    }
}

/// Dense-CRF refinement of a soft mask against a frame of the same size.
#[pyfunction]
#[pyo3(signature = (mask, frame, params=None))]
fn crf_refine(mask: &PyMask, frame: &PyFrame, params: Option<&Bound<'_, PyDict>>) -> PyResult<PyMask> {
    let p = crf_params(params)?;
    refine::crf_refine(&mask.0, &frame.0, &p).map(PyMask).map_err(to_py)
}

fn affinity(n: usize, a: Vec<f64>) -> PyResult<AffinityMatrix> {
    AffinityMatrix::new(n, a).map_err(to_py)
}

/// Soft normalized cut of assignment `x` under a row-major `n x n` affinity.
#[pyfunction]
fn ncut_value(affinity: Vec<f64>, n: usize, x: Vec<f64>) -> PyResult<f64> {
    refine::ncut_value(&self::affinity(n, affinity)?, &x).map_err(to_py)
}

/// Projected gradient descent on the normalized cut starting from `x0`.
#[pyfunction]
#[pyo3(signature = (affinity, n, x0, iterations=NCUT_ITERATIONS, step=NCUT_STEP))]
fn ncut_refine(affinity: Vec<f64>, n: usize, x0: Vec<f64>, iterations: usize, step: f64) -> PyResult<Vec<f64>> {
    refine::ncut_refine(&self::affinity(n, affinity)?, &x0, iterations, step).map_err(to_py)
}

/// IoU of two binary masks (1.0 when both are empty).
#[pyfunction]
fn miou(pred: &PyMask, gt: &PyMask) -> PyResult<f64> {
    cli::miou(&pred.0, &gt.0).map_err(to_py)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("rcf".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule]
#[pyo3(name = "rcf")]
fn rcf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyFlowField>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(crf_refine, m)?)?;
    m.add_function(wrap_pyfunction!(ncut_value, m)?)?;
    m.add_function(wrap_pyfunction!(ncut_refine, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add("SCENARIOS", Scenario::ALL.map(|s| s.to_string()))?;
    Ok(())
}
