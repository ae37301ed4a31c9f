//! Python bindings for the encoder engine.

use std::path::PathBuf;

use mcu_encoder_core as core;
use mcu_encoder_core::kernels::{matmul_reference, matmul_tiled, MatRef};
use mcu_encoder_core::{Arena, ClusterSpec, Error, Mode, SchedulePlan, StagePeaks};
use pyo3::exceptions::{PyIOError, PyMemoryError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pyo3::create_exception!(mcu_encoder, OutOfMemoryError, PyMemoryError);
pyo3::create_exception!(mcu_encoder, ModelFormatError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::OutOfMemory { .. } | Error::InfeasibleBudget { .. } => OutOfMemoryError::new_err(e.to_string()),
        Error::BadMagic(_) | Error::VersionMismatch { .. } | Error::TruncatedSection { .. } => {
            ModelFormatError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "tiled" => Ok(Mode::Tiled),
        "naive" => Ok(Mode::Naive),
        other => Err(PyValueError::new_err(format!("mode must be 'tiled' or 'naive', got {other:?}"))),
    }
}

fn peaks_dict<'py>(py: Python<'py>, p: &StagePeaks) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in p.iter() {
        d.set_item(name, v)?;
    }
    Ok(d)
}

#[pyclass(name = "QuantParams", module = "mcu_encoder", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyQuantParams(core::QuantParams);

#[pymethods]
impl PyQuantParams {
    #[new]
    #[pyo3(signature = (scale, zero_point = 0))]
    fn new(scale: f32, zero_point: i32) -> PyResult<Self> {
        core::QuantParams::new(scale, zero_point).map(Self).map_err(to_py)
    }

    #[getter]
    fn scale(&self) -> f32 {
        self.0.scale
    }

    #[getter]
    fn zero_point(&self) -> i32 {
        self.0.zero_point
    }

    fn quantize_value(&self, x: f32) -> i8 {
        self.0.quantize_value(x)
    }

    fn dequantize_value(&self, q: i8) -> f32 {
        self.0.dequantize_value(q)
    }

    fn __repr__(&self) -> String {
        format!("QuantParams(scale={}, zero_point={})", self.0.scale, self.0.zero_point)
    }
}

#[pyfunction]
fn quantize(values: Vec<f32>, qp: PyQuantParams) -> PyResult<Vec<i8>> {
    let n = values.len();
    Ok(core::qcore::quantize(&values, vec![n], qp.0).map_err(to_py)?.into_data())
}

#[pyfunction]
fn dequantize(codes: Vec<i8>, qp: PyQuantParams) -> PyResult<Vec<f32>> {
    Ok(codes.iter().map(|&q| qp.0.dequantize_value(q)).collect())
}

#[pyfunction]
fn requantize(acc: i32, multiplier: f32, zero_point: i32) -> i8 {
    core::qcore::requantize(acc, multiplier, zero_point)
}

#[pyfunction]
fn embedding_param_count(sizes: Vec<usize>, ranks: Vec<usize>, d: usize) -> usize {
    core::embedding_param_count(&ClusterSpec { sizes, ranks }, d)
}

#[pyclass(name = "EncoderConfig", module = "mcu_encoder", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyEncoderConfig(core::EncoderConfig);

#[pymethods]
impl PyEncoderConfig {
    #[new]
    #[pyo3(signature = (vocab, d_model, heads, layers, d_ffn, max_seq, n_classes))]
    fn new(
        vocab: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        d_ffn: usize,
        max_seq: usize,
        n_classes: usize,
    ) -> PyResult<Self> {
        let c = core::EncoderConfig {
            vocab,
            d_model,
            heads,
            layers,
            d_ffn,
            max_seq,
            n_classes,
        };
        c.validate().map_err(to_py)?;
        Ok(Self(c))
    }

    #[staticmethod]
    fn bert_tiny() -> Self {
        Self(core::EncoderConfig::bert_tiny())
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.0.vocab
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.0.d_model
    }

    #[getter]
    fn heads(&self) -> usize {
        self.0.heads
    }

    #[getter]
    fn layers(&self) -> usize {
        self.0.layers
    }

    #[getter]
    fn d_ffn(&self) -> usize {
        self.0.d_ffn
    }

    #[getter]
    fn max_seq(&self) -> usize {
        self.0.max_seq
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.0.n_classes
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "EncoderConfig(vocab={}, d_model={}, heads={}, layers={}, d_ffn={}, max_seq={}, n_classes={})",
            c.vocab, c.d_model, c.heads, c.layers, c.d_ffn, c.max_seq, c.n_classes
        )
    }
}

/// Per-stage peak bytes predicted for sequence length `s` and tile size `t`.
#[pyfunction]
#[pyo3(signature = (config, s, t, mode = "tiled"))]
fn peak_memory_model<'py>(
    py: Python<'py>,
    config: PyEncoderConfig,
    s: usize,
    t: usize,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = core::peak_memory_model(&config.0, s, t, parse_mode(mode)?).map_err(to_py)?;
    peaks_dict(py, &p)
}

/// Returns `(t, predicted_stage_peaks)`.
#[pyfunction]
fn plan_tile_size<'py>(
    py: Python<'py>,
    config: PyEncoderConfig,
    s: usize,
    sram_budget_bytes: usize,
) -> PyResult<(usize, Bound<'py, PyDict>)> {
    let plan = core::plan_tile_size(&config.0, s, sram_budget_bytes).map_err(to_py)?;
    Ok((plan.t, peaks_dict(py, &plan.stage_peaks)?))
}

/// Int8 matmul of row-major `a` (m x k) and `b` (k x n).
#[pyfunction]
#[pyo3(signature = (a, a_shape, a_qp, b, b_shape, b_qp, out_qp, bias = None, reference = false))]
#[allow(clippy::too_many_arguments)]
fn matmul(
    a: Vec<i8>,
    a_shape: (usize, usize),
    a_qp: PyQuantParams,
    b: Vec<i8>,
    b_shape: (usize, usize),
    b_qp: PyQuantParams,
    out_qp: PyQuantParams,
    bias: Option<Vec<i32>>,
    reference: bool,
) -> PyResult<Vec<i8>> {
    let a = MatRef::row_major(&a, a_shape.0, a_shape.1, a_qp.0).map_err(to_py)?;
    let b = MatRef::row_major(&b, b_shape.0, b_shape.1, b_qp.0).map_err(to_py)?;
    let out = if reference {
        matmul_reference(&a, &b, bias.as_deref(), out_qp.0)
    } else {
        matmul_tiled(&a, &b, bias.as_deref(), out_qp.0, Default::default()).map(|(t, _)| t)
    };
    Ok(out.map_err(to_py)?.into_data())
}

#[pyclass(name = "EncoderModel", module = "mcu_encoder", frozen)]
struct PyEncoderModel(core::EncoderModel);

#[pymethods]
impl PyEncoderModel {
    /// Procedurally generated weights; one full-rank cluster unless given.
    #[staticmethod]
    #[pyo3(signature = (config, sizes = None, ranks = None, seed = 0))]
    fn random(config: PyEncoderConfig, sizes: Option<Vec<usize>>, ranks: Option<Vec<usize>>, seed: u64) -> PyResult<Self> {
        let spec = match (sizes, ranks) {
            (Some(sizes), Some(ranks)) => ClusterSpec { sizes, ranks },
            (None, None) => ClusterSpec::full(config.0.vocab, config.0.d_model),
            _ => return Err(PyValueError::new_err("sizes and ranks must be given together")),
        };
        core::EncoderModel::random(config.0, spec, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        core::load_model_file(&path).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        core::model_from_bytes(data).map(Self).map_err(to_py)
    }

    /// Writes a `.mcub` file and returns its size in bytes.
    fn save(&self, path: PathBuf) -> PyResult<usize> {
        core::write_model_file(&self.0, &path).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        core::model_to_bytes(&self.0).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyEncoderConfig {
        PyEncoderConfig(self.0.config)
    }

    #[getter]
    fn cluster_sizes(&self) -> Vec<usize> {
        self.0.embedding.spec().sizes.clone()
    }

    #[getter]
    fn cluster_ranks(&self) -> Vec<usize> {
        self.0.embedding.spec().ranks.clone()
    }

    fn param_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.0.param_counts();
        let d = PyDict::new(py);
        d.set_item("embedding", c.embedding)?;
        d.set_item("embedding_ln", c.embedding_ln)?;
        d.set_item("encoder", c.encoder)?;
        d.set_item("classifier", c.classifier)?;
        d.set_item("total", c.total)?;
        Ok(d)
    }

    /// Runs one sequence; `tile=None` plans the largest tile that fits.
    #[pyo3(signature = (tokens, sram_budget_bytes, tile = None, naive = false))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<usize>,
        sram_budget_bytes: usize,
        tile: Option<usize>,
        naive: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = &self.0.config;
        let s = tokens.len();
        let plan = match (naive, tile) {
            (true, _) => SchedulePlan::naive(cfg, s),
            (false, Some(t)) => SchedulePlan::tiled(cfg, s, t),
            (false, None) => core::plan_tile_size(cfg, s, sram_budget_bytes),
        }
        .map_err(to_py)?;
        let mut arena = Arena::new(sram_budget_bytes);
        let out = core::run_encoder(&tokens, &self.0, &plan, &mut arena).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("logits", out.logits)?;
        d.set_item("logits_f32", out.logits_f32)?;
        d.set_item("predicted_class", out.predicted)?;
        d.set_item("mode", if plan.mode == Mode::Tiled { "tiled" } else { "naive" })?;
        d.set_item("tile", plan.t)?;
        d.set_item("peak_bytes", out.peak_bytes)?;
        d.set_item("predicted_peak_bytes", plan.predicted_peak())?;
        d.set_item("stage_peaks", peaks_dict(py, &out.stage_peaks)?)?;
        let ops = PyDict::new(py);
        ops.set_item("macs", out.ops.macs)?;
        ops.set_item("dot4_ops", out.ops.dot4_ops)?;
        ops.set_item("loads", out.ops.loads)?;
        ops.set_item("stores", out.ops.stores)?;
        d.set_item("ops", ops)?;
        Ok(d)
    }
}

#[pymodule]
fn mcu_encoder(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantParams>()?;
    m.add_class::<PyEncoderConfig>()?;
    m.add_class::<PyEncoderModel>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(requantize, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(peak_memory_model, m)?)?;
    m.add_function(wrap_pyfunction!(plan_tile_size, m)?)?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add("OutOfMemoryError", m.py().get_type::<OutOfMemoryError>())?;
    m.add("ModelFormatError", m.py().get_type::<ModelFormatError>())?;
    Ok(())
}
