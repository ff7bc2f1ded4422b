//! Python bindings: generator construction and inference, masks, crops,
//! metrics, and the train / evaluate entry points.

use std::path::PathBuf;

use numpy::ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use in2::config::Config;
use in2::evaluation::{infer_adapter, AdapterKind, AdapterMode};
use in2::generator::GeneratorConfig;
use in2::image::{Image, Mask};
use in2::rng::SeededRng;
use in2::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Codec { .. } | Error::MissingArtifacts(_) => PyIOError::new_err(e.to_string()),
        Error::TrainingAbort { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_image(a: &PyReadonlyArray3<f64>) -> PyResult<Image> {
    let v = a.as_array();
    let (h, w, c) = v.dim();
    if c != 3 {
        return Err(PyValueError::new_err(format!("image must be HxWx3, got {h}x{w}x{c}")));
    }
    Image::new(h, w, v.iter().copied().collect()).map_err(py_err)
}

fn to_mask(a: &PyReadonlyArray2<u8>) -> PyResult<Mask> {
    let v = a.as_array();
    let (h, w) = v.dim();
    Mask::new(h, w, v.iter().map(|&x| (x != 0) as u8).collect()).map_err(py_err)
}

fn from_image<'py>(py: Python<'py>, img: &Image) -> Bound<'py, PyArray3<f64>> {
    let (h, w) = img.dims();
    Array3::from_shape_vec((h, w, 3), img.data().to_vec())
        .expect("image buffer is HxWx3")
        .into_pyarray(py)
}

fn from_mask<'py>(py: Python<'py>, m: &Mask) -> Bound<'py, PyArray2<u8>> {
    let (h, w) = m.dims();
    Array2::from_shape_vec((h, w), m.data().to_vec())
        .expect("mask buffer is HxW")
        .into_pyarray(py)
}

fn load_config(path: Option<PathBuf>, overrides: Option<Vec<(String, String)>>) -> PyResult<Config> {
    Config::load(path.as_deref(), &overrides.unwrap_or_default()).map_err(py_err)
}

/// Inpainting generator with its parameters.
#[pyclass(module = "in2py")]
struct Generator {
    inner: in2::generator::Generator,
}

#[pymethods]
impl Generator {
    /// `profile` is "default" or "desk"; a config file's `[model]` section wins over both.
    #[new]
    #[pyo3(signature = (seed=0, profile="default", config=None))]
    fn new(seed: u64, profile: &str, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match (config, profile) {
            (Some(p), _) => load_config(Some(p), None)?.model,
            (None, "default") => GeneratorConfig::default(),
            (None, "desk") => GeneratorConfig::desk(),
            (None, other) => return Err(PyValueError::new_err(format!("unknown profile `{other}` (default, desk)"))),
        };
        Ok(Self {
            inner: in2::generator::Generator::new(cfg, seed).map_err(py_err)?,
        })
    }

    /// Loads a generator or training-state archive.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: in2::training::load_generator(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        in2::training::save_generator(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.numel()
    }

    #[getter]
    fn config(&self) -> String {
        toml_of(&self.inner.config)
    }

    /// Raw prediction, optionally decoded at `target = (height, width)`.
    #[pyo3(signature = (image, mask, target=None))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<f64>,
        mask: PyReadonlyArray2<u8>,
        target: Option<(usize, usize)>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let (img, m) = (to_image(&image)?, to_mask(&mask)?);
        let out = self.inner.forward(&img, &m, target).map_err(py_err)?;
        Ok(from_image(py, &out))
    }

    /// Composited result through one of the input adapters.
    #[pyo3(signature = (image, mask, adapter="direct", train_size=512))]
    fn inpaint<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<f64>,
        mask: PyReadonlyArray2<u8>,
        adapter: &str,
        train_size: usize,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let kind: AdapterKind = adapter.parse().map_err(py_err)?;
        let (img, m) = (to_image(&image)?, to_mask(&mask)?);
        let out = infer_adapter(&img, &m, &self.inner, AdapterMode::new(kind, train_size)).map_err(py_err)?;
        Ok(from_image(py, &out))
    }
}

fn toml_of(cfg: &GeneratorConfig) -> String {
    let c = Config {
        model: cfg.clone(),
        ..Config::default()
    };
    c.to_toml()
        .split("[model]")
        .nth(1)
        .map(|rest| format!("[model]{}", rest.split("\n[").next().unwrap_or("")))
        .unwrap_or_default()
}

/// Free-form hole mask (1 = hole) with the default stroke settings.
#[pyfunction]
fn generate_mask(py: Python<'_>, height: usize, width: usize, seed: u64) -> PyResult<Bound<'_, PyArray2<u8>>> {
    let spec = in2::maskgen::MaskSpec::default();
    let m = in2::maskgen::generate_freeform_mask(height, width, &spec, &mut SeededRng::new(seed)).map_err(py_err)?;
    Ok(from_mask(py, &m))
}

/// Adaptive training crop of about `target_area` pixels.
#[pyfunction]
#[pyo3(signature = (image, seed, target_area=262144.0))]
fn ats_crop<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<f64>,
    seed: u64,
    target_area: f64,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let cfg = in2::dataset::AtsConfig {
        target_area,
        ..Default::default()
    };
    let out = in2::dataset::ats_crop(&to_image(&image)?, &mut SeededRng::new(seed), &cfg).map_err(py_err)?;
    Ok(from_image(py, &out))
}

#[pyfunction]
fn psnr(a: PyReadonlyArray3<f64>, b: PyReadonlyArray3<f64>) -> PyResult<f64> {
    in2::evaluation::psnr(&to_image(&a)?, &to_image(&b)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyReadonlyArray3<f64>, b: PyReadonlyArray3<f64>) -> PyResult<f64> {
    in2::evaluation::ssim(&to_image(&a)?, &to_image(&b)?).map_err(py_err)
}

/// Perceptual distance under the seeded desk feature extractor.
#[pyfunction]
#[pyo3(signature = (a, b, seed=0))]
fn lpips(a: PyReadonlyArray3<f64>, b: PyReadonlyArray3<f64>, seed: u64) -> PyResult<f64> {
    let ext = in2::adversarial::ConvPyramid::desk(seed);
    in2::evaluation::lpips(&to_image(&a)?, &to_image(&b)?, &ext).map_err(py_err)
}

/// Trains from a config file plus `section.key` overrides; returns the final
/// training-state archive.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config=None, overrides=None, resume=None))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<Vec<(String, String)>>,
    resume: Option<PathBuf>,
) -> PyResult<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let m = in2::dataset::SampleManifest::load(&manifest).map_err(py_err)?;
    py.detach(|| {
        in2::training::fit(cfg.train, cfg.model, cfg.disc, cfg.masks, m, &out_dir, resume.as_deref())
    })
    .map_err(py_err)
}

/// Runs the configured evaluation; returns the report as JSON lines.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=None))]
fn evaluate(py: Python<'_>, config: Option<PathBuf>, overrides: Option<Vec<(String, String)>>) -> PyResult<String> {
    let cfg = load_config(config, overrides)?;
    let report = py
        .detach(|| in2::evaluation::run_experiment(&cfg.eval, &cfg.model, &cfg.masks))
        .map_err(py_err)?;
    Ok(report.to_jsonl())
}

#[pymodule]
fn in2py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(generate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ats_crop, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lpips, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
