//! Python bindings: configs, waves, control tracks, extractors and the
//! train / generate / evaluate pipeline.
//!
//!     import latch
//!     cfg = latch.Config.load("configs/desk.ini")
//!     latch.train(cfg, "vae")
//!     wave = latch.random_clips(1, 8192, seed=0)[0].wave
//!     beats = latch.extract("beats", wave)

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use latch_core::eval;
use latch_core::guidance::{make_mask as core_make_mask, Backend, MaskMode};
use latch_core::models::NoiseMode;
use latch_core::pipeline;
use latch_core::world::{self, ControlKind};

fn to_py(e: latch_core::Error) -> PyErr {
    use latch_core::Error as E;
    match e {
        E::Missing(m) => PyFileNotFoundError::new_err(m),
        E::Numerical(m) => PyArithmeticError::new_err(m),
        e @ (E::Io { .. } | E::Wav { .. }) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = latch_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn parse_kinds(kinds: Option<Vec<String>>) -> PyResult<Option<Vec<ControlKind>>> {
    kinds.map(|ks| ks.iter().map(|k| parse(k)).collect()).transpose()
}

fn parse_backend(name: &str) -> PyResult<Option<Backend>> {
    if name == "none" {
        Ok(None)
    } else {
        parse(name).map(Some)
    }
}

/// Run configuration; `Config()` holds the built-in defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: latch_core::config::Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: Default::default(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: latch_core::config::Config::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_ini(text: &str) -> PyResult<Self> {
        let inner = latch_core::config::Config::from_ini_str(text, std::path::Path::new(".")).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_ini(&self) -> String {
        self.inner.to_ini_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn jobs(&self) -> usize {
        self.inner.jobs
    }

    #[setter]
    fn set_jobs(&mut self, jobs: usize) -> PyResult<()> {
        if jobs == 0 {
            return Err(PyValueError::new_err("jobs must be at least 1"));
        }
        self.inner.jobs = jobs;
        Ok(())
    }

    /// Artifact directory.
    #[getter]
    fn dir(&self) -> PathBuf {
        self.inner.dir.clone()
    }

    #[setter]
    fn set_dir(&mut self, dir: PathBuf) {
        self.inner.dir = dir;
    }

    /// Clip length in latent frames.
    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    fn __repr__(&self) -> String {
        format!("Config(dir={:?}, seed={}, jobs={})", self.inner.dir, self.inner.seed, self.inner.jobs)
    }
}

/// Mono 16-bit-range waveform at 8 kHz.
#[pyclass(name = "Waveform", from_py_object)]
#[derive(Clone)]
struct PyWaveform {
    inner: world::Waveform,
}

#[pymethods]
impl PyWaveform {
    #[new]
    fn new(samples: Vec<f32>) -> Self {
        Self {
            inner: world::Waveform::new(samples),
        }
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: world::read_wav(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        world::write_wav(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn samples(&self) -> Vec<f32> {
        self.inner.samples.clone()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Waveform({} samples at {} Hz)", self.inner.len(), self.inner.sample_rate)
    }
}

/// Control feature track, values laid out frame by frame.
#[pyclass(name = "ControlTrack", from_py_object)]
#[derive(Clone)]
struct PyControlTrack {
    inner: world::ControlTrack,
}

#[pymethods]
impl PyControlTrack {
    #[new]
    fn new(kind: &str, values: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: world::ControlTrack::new(parse(kind)?, values).map_err(to_py)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn row(&self, frame: usize) -> PyResult<Vec<f32>> {
        if frame >= self.inner.frames {
            return Err(PyValueError::new_err(format!("frame {frame} of {}", self.inner.frames)));
        }
        Ok(self.inner.row(frame).to_vec())
    }

    fn argmax(&self) -> Vec<usize> {
        self.inner.argmax()
    }

    fn __repr__(&self) -> String {
        format!("ControlTrack({}, {} frames x {})", self.inner.kind, self.inner.frames, self.inner.dims())
    }
}

/// Synthetic clip with its ground-truth controls.
#[pyclass(name = "Clip")]
struct PyClip {
    inner: world::Clip,
}

#[pymethods]
impl PyClip {
    #[getter]
    fn wave(&self) -> PyWaveform {
        PyWaveform {
            inner: self.inner.wave.clone(),
        }
    }

    #[getter]
    fn class_id(&self) -> usize {
        self.inner.spec.class
    }

    /// Ground-truth track of `kind`.
    fn truth(&self, kind: &str) -> PyResult<PyControlTrack> {
        let track = match parse(kind)? {
            ControlKind::Intensity => &self.inner.intensity,
            ControlKind::Pitch => &self.inner.pitch,
            ControlKind::Beats => &self.inner.beats,
        };
        Ok(PyControlTrack { inner: track.clone() })
    }
}

#[pyfunction]
#[pyo3(signature = (n, samples, seed=0))]
fn random_clips(n: usize, samples: usize, seed: u64) -> PyResult<Vec<PyClip>> {
    let clips = world::random_clips(n, samples, seed).map_err(to_py)?;
    Ok(clips.into_iter().map(|inner| PyClip { inner }).collect())
}

/// Runs the `kind` extractor on a wave.
#[pyfunction]
fn extract(kind: &str, wave: &PyWaveform) -> PyResult<PyControlTrack> {
    let inner = world::extract(parse(kind)?, &wave.inner).map_err(to_py)?;
    Ok(PyControlTrack { inner })
}

/// MSE for intensity, mean BCE for pitch and beats.
#[pyfunction]
fn alignment(generated: &PyControlTrack, target: &PyControlTrack) -> PyResult<f64> {
    eval::alignment(&generated.inner, &target.inner).map_err(to_py)
}

/// Guided-step mask with the leading `fraction` of `steps` switched on.
#[pyfunction]
fn make_mask(steps: usize, fraction: f64) -> PyResult<Vec<bool>> {
    core_make_mask(steps, MaskMode::FractionFront(fraction)).map_err(to_py)
}

#[pyfunction]
fn read_tracks_csv(path: PathBuf) -> PyResult<Vec<PyControlTrack>> {
    let tracks = world::read_tracks_csv(&path).map_err(to_py)?;
    Ok(tracks.into_iter().map(|inner| PyControlTrack { inner }).collect())
}

#[pyfunction]
fn write_tracks_csv(path: PathBuf, tracks: Vec<PyControlTrack>) -> PyResult<()> {
    let refs: Vec<&world::ControlTrack> = tracks.iter().map(|t| &t.inner).collect();
    world::write_tracks_csv(&path, &refs).map_err(to_py)
}

/// Trains one phase and returns `(checkpoint, sha256, final_loss)` per
/// checkpoint written.
#[pyfunction]
#[pyo3(signature = (config, phase, kinds=None, mode=None))]
fn train(
    py: Python<'_>,
    config: &PyConfig,
    phase: &str,
    kinds: Option<Vec<String>>,
    mode: Option<String>,
) -> PyResult<Vec<(PathBuf, String, f64)>> {
    let phase: pipeline::Phase = parse(phase)?;
    let kinds = parse_kinds(kinds)?.unwrap_or_else(|| ControlKind::ALL.to_vec());
    let mode: Option<NoiseMode> = mode.as_deref().map(parse).transpose()?;
    let cfg = &config.inner;
    let out = py
        .detach(|| pipeline::train_phase(cfg, phase, &kinds, mode, cfg.jobs))
        .map_err(to_py)?;
    Ok(out.into_iter().map(|t| (t.checkpoint, t.sha256, t.final_loss)).collect())
}

/// Builds the trajectory dataset; returns its path and record count.
#[pyfunction]
#[pyo3(signature = (config, runs=None, stride=None))]
fn build_trajectories(
    py: Python<'_>,
    config: &PyConfig,
    runs: Option<usize>,
    stride: Option<usize>,
) -> PyResult<(PathBuf, usize)> {
    let cfg = &config.inner;
    let (path, ds) = py
        .detach(|| pipeline::build_trajectories(cfg, runs, stride, cfg.seed, cfg.jobs))
        .map_err(to_py)?;
    Ok((path, ds.len()))
}

/// Generates `runs` clips into `out` with targets from held-out clips.
/// `backend` is none, latch, end_to_end or readout.
#[pyfunction]
#[pyo3(signature = (config, out, backend="latch", kinds=None, runs=None, mask_fraction=None))]
fn generate(
    py: Python<'_>,
    config: &PyConfig,
    out: PathBuf,
    backend: &str,
    kinds: Option<Vec<String>>,
    runs: Option<usize>,
    mask_fraction: Option<f64>,
) -> PyResult<usize> {
    let cfg = &config.inner;
    let backend = parse_backend(backend)?;
    let kinds = parse_kinds(kinds)?.unwrap_or_else(|| cfg.eval.controls.clone());
    let manifest = py
        .detach(|| {
            let held = pipeline::heldout_clips(cfg)?;
            let specs = eval::plan_runs(&held, &kinds, runs.unwrap_or(cfg.eval.runs), cfg.seed)?;
            eval::generate(cfg, backend, &specs, mask_fraction, &out)
        })
        .map_err(to_py)?;
    Ok(manifest.runs.len())
}

/// Scores a run directory; one dict per run, mirroring report.csv.
#[pyfunction]
#[pyo3(signature = (run_dir, jobs=1))]
fn evaluate<'py>(py: Python<'py>, run_dir: PathBuf, jobs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py.detach(|| eval::evaluate_run_dir(&run_dir, jobs)).map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("run", r.run)?;
            d.set_item("backend", r.backend.map_or("none", Backend::name))?;
            d.set_item("seed", r.seed)?;
            d.set_item("class", r.class)?;
            for (kind, v) in ControlKind::ALL.iter().zip(r.alignment) {
                d.set_item(kind.name(), v)?;
            }
            d.set_item("spectral_fd", r.spectral_fd)?;
            d.set_item("seconds", r.seconds)?;
            d.set_item("peak_bytes", r.peak_bytes)?;
            Ok(d)
        })
        .collect()
}

/// Runs the self-checks; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (scratch, seed=0))]
fn selftest(py: Python<'_>, scratch: PathBuf, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let checks = py
        .detach(|| latch_core::selftest::selftest(seed, &scratch))
        .map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name.to_string(), c.pass, c.detail)).collect())
}

#[pymodule]
fn latch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyWaveform>()?;
    m.add_class::<PyControlTrack>()?;
    m.add_class::<PyClip>()?;
    m.add_function(wrap_pyfunction!(random_clips, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(make_mask, m)?)?;
    m.add_function(wrap_pyfunction!(read_tracks_csv, m)?)?;
    m.add_function(wrap_pyfunction!(write_tracks_csv, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(build_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("SAMPLE_RATE", world::SAMPLE_RATE)?;
    m.add("HOP", world::HOP)?;
    Ok(())
}
