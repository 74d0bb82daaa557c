//! Python module `openseg`: geometry, matching, losses, autodiff tensors and
//! the dataset / training / evaluation pipeline.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use openseg::assignment::{hungarian as hungarian_match, CostMatrix};
use openseg::cli::{self, EvalArgs, GendataConfig};
use openseg::contrastive::{contrastive_loss as con_loss, ObjectCenter};
use openseg::evaluation::SplitSelector;
use openseg::geometry::{self, BBox, Mask};
use openseg::gradsuite;
use openseg::inference::{fuse, FusionMode};
use openseg::tensor::Tensor as CoreTensor;
use openseg::trainer::{self, RunLocation, RunOptions, Variant};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (v.to_string(),))?.unbind())
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::corners(b[0], b[1], b[2], b[3])
}

fn mask(rows: Vec<Vec<bool>>) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(err("mask rows differ in length"));
    }
    Mask::new(h, w, rows.concat()).map_err(err)
}

/// IoU of two `[x0, y0, x1, y1]` boxes.
#[pyfunction]
fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    geometry::box_iou(bbox(a), bbox(b))
}

/// Generalized IoU of two `[x0, y0, x1, y1]` boxes.
#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    geometry::giou(bbox(a), bbox(b))
}

/// IoU of two boolean masks given as lists of rows.
#[pyfunction]
fn mask_iou(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    geometry::mask_iou(&mask(a)?, &mask(b)?).map_err(err)
}

/// Kept indices after greedy NMS, best first.
#[pyfunction]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(err("boxes and scores differ in length"));
    }
    let boxes: Vec<BBox> = boxes.into_iter().map(bbox).collect();
    Ok(geometry::nms_indices(&boxes, &scores, iou_threshold))
}

/// Minimum-cost matching of a `[preds][gts]` cost matrix: `(pairs, total)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let p = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(err("cost rows differ in length"));
    }
    let m = CostMatrix::from_total(p, g, cost.concat()).map_err(err)?;
    let r = hungarian_match(&m);
    let total = r.total_cost(&m);
    Ok((r.pairs, total))
}

/// Proposal score from class, box-IoU and mask-IoU confidences.
#[pyfunction]
#[pyo3(signature = (c_c, c_b, c_m, mode = "geometric"))]
fn fuse_scores(c_c: f64, c_b: f64, c_m: f64, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "geometric" => FusionMode::Geometric,
        "iou-only" => FusionMode::IouOnly,
        "class-only" => FusionMode::ClassOnly,
        other => return Err(err(format!("unknown fusion mode `{other}`"))),
    };
    Ok(fuse(mode, c_c, c_b, c_m))
}

/// Contrastive loss of positive and negative embeddings against a center.
#[pyfunction]
fn contrastive_loss(center: Vec<f64>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>) -> PyResult<Option<f64>> {
    let rows = |v: &Vec<Vec<f64>>| -> PyResult<Option<CoreTensor<f64>>> {
        if v.is_empty() {
            return Ok(None);
        }
        CoreTensor::new(&[v.len(), v[0].len()], v.concat()).map(Some).map_err(err)
    };
    let (pos, neg) = (rows(&positives)?, rows(&negatives)?);
    let l = con_loss(&ObjectCenter(center), pos.as_ref(), neg.as_ref()).map_err(err)?;
    Ok(l.map(|t| t.item()))
}

/// Finite-difference check of every op: list of per-op reports.
#[pyfunction]
#[pyo3(signature = (cases = 10, seed = 0))]
fn gradcheck(py: Python<'_>, cases: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let reports = gradsuite::run(cases, seed).map_err(err)?;
    to_py(py, &serde_json::to_value(reports).map_err(err)?)
}

/// Double-precision autodiff tensor.
#[pyclass(module = "openseg")]
struct Tensor {
    inner: CoreTensor<f64>,
}

fn wrap(t: CoreTensor<f64>) -> Tensor {
    Tensor { inner: t }
}

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (shape, values, requires_grad = false))]
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            CoreTensor::param(&shape, values)
        } else {
            CoreTensor::new(&shape, values)
        };
        t.map(wrap).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn item(&self) -> f64 {
        self.inner.item()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn __add__(&self, o: &Tensor) -> PyResult<Tensor> {
        self.inner.add(&o.inner).map(wrap).map_err(err)
    }

    fn __sub__(&self, o: &Tensor) -> PyResult<Tensor> {
        self.inner.sub(&o.inner).map(wrap).map_err(err)
    }

    fn __mul__(&self, o: &Tensor) -> PyResult<Tensor> {
        self.inner.mul(&o.inner).map(wrap).map_err(err)
    }

    fn __matmul__(&self, o: &Tensor) -> PyResult<Tensor> {
        self.inner.matmul(&o.inner).map(wrap).map_err(err)
    }

    fn transpose(&self) -> PyResult<Tensor> {
        self.inner.transpose().map(wrap).map_err(err)
    }

    fn exp(&self) -> Tensor {
        wrap(self.inner.exp())
    }

    fn log(&self) -> PyResult<Tensor> {
        self.inner.log().map(wrap).map_err(err)
    }

    fn sigmoid(&self) -> Tensor {
        wrap(self.inner.sigmoid())
    }

    fn relu(&self) -> Tensor {
        wrap(self.inner.relu())
    }

    fn tanh(&self) -> Tensor {
        wrap(self.inner.tanh())
    }

    fn sum(&self) -> Tensor {
        wrap(self.inner.sum())
    }

    fn mean(&self) -> Tensor {
        wrap(self.inner.mean())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Training configuration, as in the TOML config files.
#[pyclass(module = "openseg")]
struct TrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => trainer::TrainConfig::from_toml(t).map_err(err)?,
            None => trainer::TrainConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trainer::TrainConfig::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn run_name(&self) -> String {
        self.inner.run_name()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[setter]
    fn set_variant(&mut self, name: &str) -> PyResult<()> {
        let v: Variant = serde_json::from_value(serde_json::Value::String(name.into())).map_err(err)?;
        self.inner.variant = v;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, s: u64) {
        self.inner.seed = s;
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: usize) {
        self.inner.iterations = n;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, n: usize) {
        self.inner.batch_size = n;
    }
}

/// Generates train-base / eval-novel / eval-all files under `out`.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, train_scenes = 2000, eval_scenes = 200, force = false))]
fn generate_data(
    py: Python<'_>,
    out: PathBuf,
    seed: u64,
    train_scenes: usize,
    eval_scenes: usize,
    force: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = GendataConfig {
        train_scenes,
        eval_scenes,
        ..GendataConfig::default()
    };
    to_py(py, &cli::generate_datasets(&cfg, seed, &out, force).map_err(err)?)
}

/// Trains and evaluates one run under `runs`; returns novel and all metrics.
#[pyfunction]
fn train(py: Python<'_>, config: &TrainConfig, data: PathBuf, runs: PathBuf) -> PyResult<Py<PyAny>> {
    let out = trainer::run_experiment(&config.inner, &data, &RunLocation::Under(runs), RunOptions::default())
        .map_err(err)?;
    let v = serde_json::json!({
        "run_dir": out.run_dir,
        "completed_iterations": out.completed_iterations,
        "novel": out.novel,
        "all": out.all,
    });
    to_py(py, &v)
}

/// Evaluates a checkpoint (file or run directory) and writes a report directory.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, report, split = "all", ignore_base = false))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    report: PathBuf,
    split: &str,
    ignore_base: bool,
) -> PyResult<Py<PyAny>> {
    let split: SplitSelector = serde_json::from_value(serde_json::Value::String(split.into())).map_err(err)?;
    let args = EvalArgs {
        checkpoint,
        data,
        split,
        ignore_base,
        report,
        config: None,
        fusion: None,
        nms: None,
        top_k: None,
    };
    to_py(py, &cli::eval(&args).map_err(err)?)
}

#[pymodule]
#[pyo3(name = "openseg")]
fn openseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<TrainConfig>()?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_scores, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
