//! Python bindings for the radiance-field pipeline.
//!
//! The module mirrors the pipeline as plain functions operating on dataset
//! directories and checkpoint files (`generate_scene`, `build_confidence`,
//! `train`, `extract`, `evaluate`) and adds in-memory types for poking at
//! results from Python: [`Image`] wraps a float image/map, [`Dataset`] a
//! loaded scene directory, and [`Field`] a trained checkpoint that can
//! answer density queries and render views. The PSNR/SSIM/Chamfer metrics
//! are exposed directly so Python-side experiments can score arbitrary
//! buffers.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use radfield::dataset::{load_dataset, read_image_png, write_dataset};
use radfield::error::Error;
use radfield::extraction::{default_extraction_bounds, extract_mesh};
use radfield::field::checkpoint::load_checkpoint;
use radfield::field::{FieldParams, Stage};
use radfield::geometry::pfm::{read_pfm, write_pfm};
use radfield::geometry::ply::{read_pointcloud_ply, write_pointcloud_ply};
use radfield::geometry::ImageBuffer;
use radfield::metrics;
use radfield::priors::{build_confidence_maps, ConfidenceMode};
use radfield::renderer::{render_image, RenderConfig};
use radfield::synthetic::{
    corrupt_priors, generate_dataset, surface_samples, AnalyticScene, Region,
};
use radfield::training::{self, TrainConfig};

/// Map library errors onto Python exceptions: I/O problems raise `IOError`,
/// everything else `ValueError`.
fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vec3(t: (f64, f64, f64)) -> Vector3<f64> {
    Vector3::new(t.0, t.1, t.2)
}

// ---------------------------------------------------------------------------
// Image
// ---------------------------------------------------------------------------

/// A float image or map: RGB renderings, depth, normals, confidence. Pixels
/// are row-major, `channels` floats per pixel; NaN marks invalid pixels in
/// depth/normal/confidence maps.
#[pyclass]
struct Image {
    inner: ImageBuffer,
}

#[pymethods]
impl Image {
    /// Build an image from a flat row-major buffer.
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        ImageBuffer::from_data(width, height, channels, data)
            .map(|inner| Self { inner })
            .map_err(pyerr)
    }

    /// Load an 8-bit sRGB PNG as linear RGB.
    #[staticmethod]
    fn from_png(path: PathBuf) -> PyResult<Self> {
        read_image_png(&path).map(|inner| Self { inner }).map_err(pyerr)
    }

    /// Load a PFM float map (bit-exact, NaN included).
    #[staticmethod]
    fn from_pfm(path: PathBuf) -> PyResult<Self> {
        read_pfm(&path).map(|inner| Self { inner }).map_err(pyerr)
    }

    /// Write the map as PFM (bit-exact, NaN included).
    fn save_pfm(&self, path: PathBuf) -> PyResult<()> {
        write_pfm(&path, &self.inner).map_err(pyerr)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    /// Channel values at pixel (u, v).
    fn pixel(&self, u: usize, v: usize) -> PyResult<Vec<f32>> {
        if u >= self.inner.width() || v >= self.inner.height() {
            return Err(PyValueError::new_err(format!(
                "pixel ({u}, {v}) outside {}x{}",
                self.inner.width(),
                self.inner.height()
            )));
        }
        Ok(self.inner.pixel(u, v).to_vec())
    }

    /// True when every channel at (u, v) is finite.
    fn is_valid(&self, u: usize, v: usize) -> PyResult<bool> {
        if u >= self.inner.width() || v >= self.inner.height() {
            return Err(PyValueError::new_err(format!(
                "pixel ({u}, {v}) outside {}x{}",
                self.inner.width(),
                self.inner.height()
            )));
        }
        Ok(self.inner.is_valid(u, v))
    }

    /// The flat row-major buffer as a list of floats.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}, {} channels)",
            self.inner.width(),
            self.inner.height(),
            self.inner.channels()
        )
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A loaded dataset directory: per-view images, depth/normal priors,
/// optional confidence maps, and the scene metadata.
#[pyclass]
struct Dataset {
    inner: radfield::dataset::Dataset,
}

#[pymethods]
impl Dataset {
    /// Load a dataset directory. `camera_normals` interprets stored normal
    /// maps as camera-frame vectors and rotates them into the world frame.
    #[staticmethod]
    #[pyo3(signature = (path, camera_normals = false))]
    fn load(path: PathBuf, camera_normals: bool) -> PyResult<Self> {
        load_dataset(&path, camera_normals)
            .map(|inner| Self { inner })
            .map_err(pyerr)
    }

    #[getter]
    fn view_count(&self) -> usize {
        self.inner.view_count()
    }

    fn view_names(&self) -> Vec<String> {
        self.inner
            .priors
            .views
            .iter()
            .map(|v| v.name.clone())
            .collect()
    }

    #[getter]
    fn t_near(&self) -> f64 {
        self.inner.meta.t_near
    }

    #[getter]
    fn t_far(&self) -> f64 {
        self.inner.meta.t_far
    }

    /// Scene bounding box as (min, max) corner tuples.
    fn bbox(&self) -> ((f64, f64, f64), (f64, f64, f64)) {
        let (a, b) = (self.inner.meta.bbox_min, self.inner.meta.bbox_max);
        ((a.x, a.y, a.z), (b.x, b.y, b.z))
    }

    fn image(&self, view: usize) -> PyResult<Image> {
        self.checked(view)?;
        Ok(Image {
            inner: self.inner.images[view].clone(),
        })
    }

    fn depth(&self, view: usize) -> PyResult<Image> {
        self.checked(view)?;
        Ok(Image {
            inner: self.inner.priors.depth[view].clone(),
        })
    }

    fn normal(&self, view: usize) -> PyResult<Image> {
        self.checked(view)?;
        Ok(Image {
            inner: self.inner.priors.normal[view].clone(),
        })
    }

    /// The view's confidence map, or None when the dataset has none.
    fn confidence(&self, view: usize) -> PyResult<Option<Image>> {
        self.checked(view)?;
        Ok(self.inner.priors.confidence.get(view).map(|m| Image {
            inner: m.clone(),
        }))
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} views)", self.inner.view_count())
    }
}

impl Dataset {
    fn checked(&self, view: usize) -> PyResult<()> {
        if view >= self.inner.view_count() {
            return Err(PyValueError::new_err(format!(
                "view {view} outside 0..{}",
                self.inner.view_count()
            )));
        }
        Ok(())
    }

    fn view_index(&self, name: &str) -> PyResult<usize> {
        self.inner
            .priors
            .views
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| {
                PyValueError::new_err(format!(
                    "view `{name}` not in dataset (views: {})",
                    self.view_names().join(", ")
                ))
            })
    }
}

// ---------------------------------------------------------------------------
// Field
// ---------------------------------------------------------------------------

/// A trained radiance field loaded from a checkpoint.
#[pyclass]
struct Field {
    params: FieldParams,
}

fn render_config(preset: &str) -> PyResult<RenderConfig> {
    match preset {
        "full" => Ok(RenderConfig::full()),
        "small" => Ok(RenderConfig::small()),
        other => Err(PyValueError::new_err(format!(
            "unknown preset `{other}`; expected `full` or `small`"
        ))),
    }
}

#[pymethods]
impl Field {
    /// Load a checkpoint file, or a train output directory holding one.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = if path.is_dir() {
            path.join("checkpoint_final.bin")
        } else {
            path
        };
        load_checkpoint(&path)
            .map(|params| Self { params })
            .map_err(pyerr)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Density of the fine field at a world point.
    fn density(&self, x: f64, y: f64, z: f64) -> f64 {
        self.params.stage(Stage::Fine).density(&Vector3::new(x, y, z))
    }

    /// Unit surface normal of the fine field at a world point (from the
    /// negated density gradient), or None where the gradient is degenerate.
    #[pyo3(signature = (x, y, z, step = 1e-3))]
    fn normal(&self, x: f64, y: f64, z: f64, step: f64) -> Option<(f64, f64, f64)> {
        self.params
            .stage(Stage::Fine)
            .normal_at(&Vector3::new(x, y, z), step)
            .map(|n| (n.x, n.y, n.z))
    }

    /// Render one dataset view (by index or name). Returns a dict with
    /// `color`, `depth`, `normal`, and `acc` images; the seed matches the
    /// CLI convention (base seed plus view index).
    #[pyo3(signature = (dataset, view, preset = "small", seed = 0))]
    fn render_view<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        view: &Bound<'py, PyAny>,
        preset: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let index = if let Ok(i) = view.extract::<usize>() {
            dataset.checked(i)?;
            i
        } else {
            dataset.view_index(&view.extract::<String>()?)?
        };
        let cfg = render_config(preset)?;
        let v = &dataset.inner.priors.views[index];
        let render = render_image(
            &self.params,
            &v.camera,
            &v.pose,
            dataset.inner.meta.t_near,
            dataset.inner.meta.t_far,
            &cfg,
            seed.wrapping_add(index as u64),
        )
        .map_err(pyerr)?;
        let out = PyDict::new(py);
        out.set_item("color", Image { inner: render.color })?;
        out.set_item("depth", Image { inner: render.depth })?;
        out.set_item("normal", Image { inner: render.normal })?;
        out.set_item("acc", Image { inner: render.acc })?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Field({} parameters)", self.params.param_count())
    }
}

// ---------------------------------------------------------------------------
// Pipeline functions
// ---------------------------------------------------------------------------

/// Generate the analytic benchmark dataset (images, poses, exact priors,
/// optional ground-truth surface samples and prior corruption).
#[pyfunction]
#[pyo3(signature = (
    out,
    scene = "sphere-box",
    views = 20,
    width = 64,
    height = 64,
    ring_radius = 2.0,
    gt_points = 10_000,
    corrupt_region = None,
    corrupt_sigma = 0.0,
    corrupt_invalid_frac = 0.0,
    corrupt_global_sigma = 0.0,
    seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn generate_scene(
    out: PathBuf,
    scene: &str,
    views: usize,
    width: usize,
    height: usize,
    ring_radius: f64,
    gt_points: usize,
    corrupt_region: Option<(f64, f64, f64, f64)>,
    corrupt_sigma: f64,
    corrupt_invalid_frac: f64,
    corrupt_global_sigma: f64,
    seed: u64,
) -> PyResult<()> {
    let scene = match scene {
        "sphere-box" => AnalyticScene::fixture(),
        "sphere" => AnalyticScene::single_sphere(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown scene `{other}`; expected `sphere-box` or `sphere`"
            )))
        }
    };
    let mut data =
        generate_dataset(&scene, views, width, height, ring_radius).map_err(pyerr)?;
    if corrupt_global_sigma > 0.0 {
        data.priors = corrupt_priors(
            &data.priors,
            &Region::full(),
            corrupt_global_sigma,
            0.0,
            seed.wrapping_add(1),
        )
        .map_err(pyerr)?;
    }
    if let Some((u0, v0, u1, v1)) = corrupt_region {
        let region = Region::new(u0, v0, u1, v1).map_err(pyerr)?;
        data.priors = corrupt_priors(&data.priors, &region, corrupt_sigma, corrupt_invalid_frac, seed)
            .map_err(pyerr)?;
    } else if corrupt_sigma > 0.0 || corrupt_invalid_frac > 0.0 {
        return Err(PyValueError::new_err(
            "corrupt_sigma/corrupt_invalid_frac need corrupt_region; use corrupt_global_sigma for whole-image noise",
        ));
    }
    write_dataset(&out, &data).map_err(pyerr)?;
    if gt_points > 0 {
        let points = surface_samples(&scene, gt_points, seed);
        write_pointcloud_ply(&out.join("gt_points.ply"), &points, None).map_err(pyerr)?;
    }
    Ok(())
}

/// Build reprojection-consistency confidence maps for a dataset; returns the
/// number of maps written.
#[pyfunction]
#[pyo3(signature = (data, out = None, top_k = 4, mode = "continuous", camera_normals = false))]
fn build_confidence(
    data: PathBuf,
    out: Option<PathBuf>,
    top_k: usize,
    mode: &str,
    camera_normals: bool,
) -> PyResult<usize> {
    let out = out.unwrap_or_else(|| data.clone());
    let mode = ConfidenceMode::parse(mode).map_err(pyerr)?;
    let loaded = load_dataset(&data, camera_normals).map_err(pyerr)?;
    let priors = build_confidence_maps(&loaded.priors, top_k, mode).map_err(pyerr)?;
    std::fs::create_dir_all(out.join("confidence"))
        .map_err(|e| pyerr(Error::Io(e)))?;
    for (view, conf) in priors.views.iter().zip(&priors.confidence) {
        write_pfm(
            &out.join("confidence").join(format!("{}.pfm", view.name)),
            conf,
        )
        .map_err(pyerr)?;
    }
    Ok(priors.confidence.len())
}

/// Train the coarse/fine fields on a dataset directory. Writes checkpoints
/// and `loss.csv` into `out` (default `<data>/ckpt`) and returns the final
/// loss record as a dict.
#[pyfunction]
#[pyo3(signature = (
    data,
    out = None,
    iters = 2000,
    preset = "small",
    batch_size = None,
    lr_start = None,
    lr_end = None,
    lambda_geom = None,
    huber_delta_depth = None,
    huber_delta_normal = None,
    checkpoint_interval = 0,
    ignore_confidence = false,
    no_normal_loss = false,
    camera_normals = false,
    quiet = true,
    seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    out: Option<PathBuf>,
    iters: usize,
    preset: &str,
    batch_size: Option<usize>,
    lr_start: Option<f64>,
    lr_end: Option<f64>,
    lambda_geom: Option<f64>,
    huber_delta_depth: Option<f64>,
    huber_delta_normal: Option<f64>,
    checkpoint_interval: usize,
    ignore_confidence: bool,
    no_normal_loss: bool,
    camera_normals: bool,
    quiet: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let out = out.unwrap_or_else(|| data.join("ckpt"));
    let mut cfg = match preset {
        "full" => TrainConfig::full(iters),
        "small" => TrainConfig::small(iters),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown preset `{other}`; expected `full` or `small`"
            )))
        }
    };
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = lr_end {
        cfg.lr_end = v;
    }
    if let Some(v) = lambda_geom {
        cfg.lambda_geom = v;
    }
    cfg.huber_delta_depth = huber_delta_depth;
    if let Some(v) = huber_delta_normal {
        cfg.huber_delta_normal = v;
    }
    cfg.checkpoint_interval = checkpoint_interval;
    cfg.ignore_confidence = ignore_confidence;
    cfg.supervise_normals = !no_normal_loss;
    cfg.verbose = !quiet;
    cfg.seed = seed;

    let loaded = load_dataset(&data, camera_normals).map_err(pyerr)?;
    let result = training::train(&loaded, &cfg, Some(&out)).map_err(pyerr)?;
    let record = PyDict::new(py);
    if let Some(last) = result.history.last() {
        record.set_item("iteration", last.iteration)?;
        record.set_item("l_rgb", last.l_rgb)?;
        record.set_item("l_depth", last.l_depth)?;
        record.set_item("l_norm", last.l_norm)?;
        record.set_item("total", last.total)?;
    }
    Ok(record)
}

/// Extract a triangle mesh from a checkpoint's fine density field and write
/// it as ASCII PLY; returns (vertex count, triangle count). Bounds come from
/// `bbox_min`/`bbox_max`, or are derived from the dataset's cameras.
#[pyfunction]
#[pyo3(signature = (ckpt, out, data = None, bbox_min = None, bbox_max = None, resolution = 256, tau = 50.0))]
fn extract(
    ckpt: PathBuf,
    out: PathBuf,
    data: Option<PathBuf>,
    bbox_min: Option<(f64, f64, f64)>,
    bbox_max: Option<(f64, f64, f64)>,
    resolution: usize,
    tau: f64,
) -> PyResult<(usize, usize)> {
    let ckpt = if ckpt.is_dir() {
        ckpt.join("checkpoint_final.bin")
    } else {
        ckpt
    };
    let (min, max) = match (bbox_min, bbox_max) {
        (Some(min), Some(max)) => (vec3(min), vec3(max)),
        (None, None) => {
            let Some(data) = &data else {
                return Err(PyValueError::new_err(
                    "extraction bounds unknown: pass bbox_min/bbox_max, or data to derive them from the cameras",
                ));
            };
            let loaded = load_dataset(data, false).map_err(pyerr)?;
            default_extraction_bounds(&loaded.priors.views, loaded.meta.t_far).map_err(pyerr)?
        }
        _ => {
            return Err(PyValueError::new_err(
                "bbox_min and bbox_max must be given together",
            ))
        }
    };
    let params = load_checkpoint(&ckpt).map_err(pyerr)?;
    let mesh = extract_mesh(params.stage(Stage::Fine), min, max, [resolution; 3], tau)
        .map_err(pyerr)?;
    radfield::geometry::ply::write_mesh_ply(&out, &mesh.vertices, &mesh.triangles)
        .map_err(pyerr)?;
    Ok((mesh.vertices.len(), mesh.triangles.len()))
}

/// Score rendered views (PSNR/SSIM) and optionally a mesh (Chamfer against
/// a reference point cloud). Returns a dict with per-view rows and means;
/// writes no files (use the CLI for CSV output).
#[pyfunction]
#[pyo3(signature = (data, ckpt, mesh = None, gt_points = None, preset = "small", seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    data: PathBuf,
    ckpt: PathBuf,
    mesh: Option<PathBuf>,
    gt_points: Option<PathBuf>,
    preset: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = if ckpt.is_dir() {
        ckpt.join("checkpoint_final.bin")
    } else {
        ckpt
    };
    let mut cfg = render_config(preset)?;
    cfg.compute_normals = false;
    let params = load_checkpoint(&ckpt).map_err(pyerr)?;
    let loaded = load_dataset(&data, false).map_err(pyerr)?;
    let scores = metrics::eval_views(&params, &loaded, &cfg, seed).map_err(pyerr)?;

    let out = PyDict::new(py);
    let views: Vec<(String, f64, f64)> = scores
        .iter()
        .map(|s| (s.name.clone(), s.psnr, s.ssim))
        .collect();
    let n = scores.len() as f64;
    out.set_item("views", views)?;
    out.set_item(
        "mean_psnr",
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
    )?;
    out.set_item(
        "mean_ssim",
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )?;
    if let Some(mesh) = mesh {
        let gt_path = gt_points.unwrap_or_else(|| data.join("gt_points.ply"));
        let (vertices, _) = read_pointcloud_ply(&mesh).map_err(pyerr)?;
        let (gt, _) = read_pointcloud_ply(&gt_path).map_err(pyerr)?;
        let chamfer = metrics::chamfer_distance(&gt, &vertices).map_err(pyerr)?;
        out.set_item("chamfer", chamfer)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB between two images of the same shape
/// (infinite for identical images).
#[pyfunction]
fn psnr(a: &Image, b: &Image) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(pyerr)
}

/// Mean structural similarity between two images of the same shape
/// (11x11 Gaussian window; images smaller than the window are rejected).
#[pyfunction]
fn ssim(a: &Image, b: &Image) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(pyerr)
}

/// Symmetric Chamfer distance between two point sets given as (x, y, z)
/// tuples: mean squared nearest-neighbor distance, summed over both
/// directions.
#[pyfunction]
fn chamfer_distance(p: Vec<(f64, f64, f64)>, q: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    let p: Vec<Vector3<f64>> = p.into_iter().map(vec3).collect();
    let q: Vec<Vector3<f64>> = q.into_iter().map(vec3).collect();
    metrics::chamfer_distance(&p, &q).map_err(pyerr)
}

/// Read vertex positions from an ASCII PLY file as (x, y, z) tuples.
#[pyfunction]
fn load_points(path: PathBuf) -> PyResult<Vec<(f64, f64, f64)>> {
    let (points, _) = read_pointcloud_ply(Path::new(&path)).map_err(pyerr)?;
    Ok(points.into_iter().map(|p| (p.x, p.y, p.z)).collect())
}

#[pymodule]
fn radfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Field>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(build_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(load_points, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
