//! Python bindings: metric primitives, file-level evaluation, data
//! generation, GradCAM and the experiment driver. Structured results are
//! returned as plain dicts and lists.

use std::path::{Path, PathBuf};

use detxai::cli::{cmd_eval_ap, cmd_eval_xai, cmd_synth, parse_config};
use detxai::experiment::{cmd_experiment, ExperimentSpec};
use detxai::io::{image_to_tensor, read_grid as read_npy, read_image, write_grid as write_npy};
use detxai::micromodel::checkpoint::load_params;
use detxai::xaimetrics::XaiEvalConfig;
use detxai::{ApConfig, BBox, BinaryMask, Detection, Grid, GroundTruth};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pydetxai, DetxaiError, PyException, "Error raised by the detxai core.");

create_exception!(pydetxai, UndefinedMetricError, DetxaiError, "The metric is undefined for the inputs.");

fn to_py(e: detxai::Error) -> PyErr {
    if e.exit_code() == 3 {
        UndefinedMetricError::new_err(e.to_string())
    } else {
        DetxaiError::new_err(e.to_string())
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DetxaiError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(to_py)
}

fn grid(rows: Vec<Vec<f64>>) -> PyResult<Grid> {
    Grid::from_rows(&rows).map_err(to_py)
}

fn mask(rows: Vec<Vec<bool>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(DetxaiError::new_err("mask rows differ in length"));
    }
    BinaryMask::new(w, h, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows<T: Copy>(values: &[T], width: usize) -> Vec<Vec<T>> {
    values.chunks(width).map(<[T]>::to_vec).collect()
}

/// IoU of two `[x, y, w, h]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(detxai::iou(&bbox(a)?, &bbox(b)?))
}

/// Share of positive relevance inside the mask.
#[pyfunction]
fn attribution_localization(grid_rows: Vec<Vec<f64>>, mask_rows: Vec<Vec<bool>>) -> PyResult<f64> {
    Ok(detxai::attribution_localization(&grid(grid_rows)?, &mask(mask_rows)?)
        .map_err(to_py)?
        .value)
}

/// Share of the k most relevant pixels inside the mask.
#[pyfunction]
fn topk_intersection(grid_rows: Vec<Vec<f64>>, mask_rows: Vec<Vec<bool>>, k: usize) -> PyResult<f64> {
    Ok(detxai::topk_intersection(&grid(grid_rows)?, &mask(mask_rows)?, k)
        .map_err(to_py)?
        .value)
}

/// The k most relevant pixels as a boolean mask.
#[pyfunction]
fn topk_mask(grid_rows: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<bool>>> {
    let g = grid(grid_rows)?;
    let m = detxai::topk_mask(&g, k).map_err(to_py)?;
    Ok(rows(m.bits(), g.width()))
}

/// COCO-style AP. Detections are `(image_id, category_id, [x, y, w, h],
/// score)`, ground truth `(image_id, category_id, [x, y, w, h])`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truths, recall_samples = 101, max_detections_per_image = 100))]
fn mean_ap<'py>(
    py: Python<'py>,
    detections: Vec<(u64, u32, [f64; 4], f64)>,
    ground_truths: Vec<(u64, u32, [f64; 4])>,
    recall_samples: usize,
    max_detections_per_image: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let dets = detections
        .into_iter()
        .map(|(image_id, category_id, b, score)| {
            Ok(Detection {
                image_id,
                category_id,
                bbox: bbox(b)?,
                score,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let gts = ground_truths
        .into_iter()
        .map(|(image_id, category_id, b)| {
            Ok(GroundTruth {
                image_id,
                category_id,
                bbox: bbox(b)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let config = ApConfig {
        recall_samples,
        max_detections_per_image,
        ..ApConfig::default()
    };
    to_dict(py, &detxai::mean_ap(&dets, &gts, &config).map_err(to_py)?)
}

/// AP of a detection file against an annotation file.
#[pyfunction]
fn eval_ap<'py>(py: Python<'py>, annotations: PathBuf, detections: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &cmd_eval_ap(&annotations, &detections, &ApConfig::default()).map_err(to_py)?)
}

/// AL and TKI of explained detections listed in an attribution manifest.
#[pyfunction]
#[pyo3(signature = (annotations, detections, manifest, k = None))]
fn eval_xai<'py>(
    py: Python<'py>,
    annotations: PathBuf,
    detections: PathBuf,
    manifest: PathBuf,
    k: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut config = XaiEvalConfig::default();
    if let Some(k) = k {
        config.k = k;
    }
    to_dict(py, &cmd_eval_xai(&annotations, &detections, &manifest, &config).map_err(to_py)?)
}

fn spec_from(config: Option<&str>) -> PyResult<ExperimentSpec> {
    match config {
        Some(text) => parse_config(Path::new("<config>"), text.as_bytes()).map_err(to_py),
        None => Ok(ExperimentSpec::default()),
    }
}

/// Writes source, auxiliary and target bundles under `out_dir`. `config` is
/// JSON text overriding experiment defaults.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config = None))]
fn synth(py: Python<'_>, out_dir: PathBuf, seed: u64, config: Option<&str>) -> PyResult<()> {
    let spec = spec_from(config)?;
    py.detach(|| cmd_synth(&spec, seed, &out_dir)).map_err(to_py)
}

/// Runs the experiments and returns the report. `config` is JSON text
/// overriding experiment defaults.
#[pyfunction]
#[pyo3(signature = (config = None, output_dir = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: Option<&str>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = spec_from(config)?;
    if output_dir.is_some() {
        spec.output_dir = output_dir;
    }
    let (report, _) = py.detach(|| cmd_experiment(&spec)).map_err(to_py)?;
    to_dict(py, &report)
}

/// GradCAM map (rows of values in [0, 1]) of a stored model for one image
/// file and 0-based class index.
#[pyfunction]
fn grad_cam(params: PathBuf, image: PathBuf, class_index: usize) -> PyResult<Vec<Vec<f64>>> {
    let model = load_params(&params).map_err(to_py)?;
    let tensor = image_to_tensor(&read_image(&image).map_err(to_py)?);
    let g = detxai::micromodel::grad_cam(&model, &tensor, class_index).map_err(to_py)?;
    Ok(rows(g.values(), g.width()))
}

#[pyfunction]
fn read_grid(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let g = read_npy(&path).map_err(to_py)?;
    Ok(rows(g.values(), g.width()))
}

#[pyfunction]
fn write_grid(grid_rows: Vec<Vec<f64>>, path: PathBuf) -> PyResult<()> {
    write_npy(&grid(grid_rows)?, &path).map_err(to_py)
}

#[pymodule]
fn pydetxai(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DetxaiError", m.py().get_type::<DetxaiError>())?;
    m.add("UndefinedMetricError", m.py().get_type::<UndefinedMetricError>())?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(attribution_localization, m)?)?;
    m.add_function(wrap_pyfunction!(topk_intersection, m)?)?;
    m.add_function(wrap_pyfunction!(topk_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(eval_ap, m)?)?;
    m.add_function(wrap_pyfunction!(eval_xai, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(grad_cam, m)?)?;
    m.add_function(wrap_pyfunction!(read_grid, m)?)?;
    m.add_function(wrap_pyfunction!(write_grid, m)?)?;
    Ok(())
}
