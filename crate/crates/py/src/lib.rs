//! Python bindings: corpora, priors, training, checkpoints and metrics.

use std::path::PathBuf;

use mp::config::RunConfig;
use mp::corpus::{self, Corpus, SegmentConfig, SynthSpec};
use mp::metrics::{self, to_f64, ConfusionMatrix, Level};
use mp::model::FeatureInput;
use mp::priors::CategoryPriors;
use mp::trainer::{self, Checkpoint};
use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: mp::Error) -> PyErr {
    match e {
        mp::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        mp::Error::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f32>>, what: &str) -> PyResult<Array2<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Corpus", module = "mental_perceiver")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Corpus::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Sorted participant ids, optionally restricted to one split.
    #[pyo3(signature = (split=None))]
    fn participant_ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let mut ids: Vec<String> = match split {
            Some(s) => self
                .inner
                .split(parse(s)?)
                .iter()
                .map(|r| r.participant_id.clone())
                .collect(),
            None => self.inner.records.iter().map(|r| r.participant_id.clone()).collect(),
        };
        ids.sort();
        Ok(ids)
    }

    /// Replaces WAV references with mel frames; returns how many were converted.
    fn featurize(&mut self) -> PyResult<usize> {
        self.inner.featurize().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} participants)", self.inner.records.len())
    }
}

#[pyclass(name = "Priors", module = "mental_perceiver")]
struct PyPriors {
    inner: CategoryPriors,
}

#[pymethods]
impl PyPriors {
    #[staticmethod]
    fn from_corpus(corpus: &PyCorpus) -> PyResult<Self> {
        Ok(Self {
            inner: CategoryPriors::from_corpus(&corpus.inner).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CategoryPriors::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn normal(&self) -> Vec<f64> {
        self.inner.normal.clone()
    }

    #[getter]
    fn disorder(&self) -> Vec<f64> {
        self.inner.disorder.clone()
    }

    #[getter]
    fn counts(&self) -> (usize, usize) {
        (self.inner.counts[0], self.inner.counts[1])
    }

    fn __len__(&self) -> usize {
        self.inner.width()
    }
}

#[pyclass(name = "Checkpoint", module = "mental_perceiver")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.meta.epoch
    }

    #[getter]
    fn best_metric(&self) -> f64 {
        self.inner.meta.best_metric
    }

    /// Model, segmentation and training metadata as a dict.
    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.meta)
    }

    fn priors(&self) -> PyResult<PyPriors> {
        Ok(PyPriors {
            inner: self.inner.priors().map_err(to_py)?,
        })
    }

    /// Class-wise outputs for one sample given as lists of rows.
    #[pyo3(signature = (text=None, audio=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        text: Option<Vec<Vec<f32>>>,
        audio: Option<Vec<Vec<f32>>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let input = FeatureInput {
            text: text.map(|t| matrix(t, "text")).transpose()?,
            audio: audio.map(|a| matrix(a, "audio")).transpose()?,
        };
        let out = self.inner.model.predict(&self.inner.params, &input).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("p_disorder", out.p_disorder())?;
        d.set_item("predicted", out.predicted().as_u8())?;
        d.set_item("probabilities", out.probabilities.to_vec())?;
        d.set_item("y_c0", out.y_c0.to_vec())?;
        d.set_item("y_c1", out.y_c1.to_vec())?;
        Ok(d)
    }

    /// Metric reports (one dict per level) on a corpus split.
    #[pyo3(signature = (corpus, split="test", levels=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        split: &str,
        levels: Option<Vec<String>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let levels: Vec<Level> = match levels {
            Some(ls) => ls.iter().map(|l| parse(l)).collect::<PyResult<_>>()?,
            None => vec![Level::Segment, Level::Participant],
        };
        let ev = metrics::evaluate(
            &self.inner.model,
            &self.inner.params,
            &corpus.inner,
            parse(split)?,
            &levels,
            &self.inner.meta.segment,
        )
        .map_err(to_py)?;
        json(py, &ev.reports)
    }
}

/// Class-conditional Gaussian corpus with text and audio-frame features.
#[pyfunction]
#[pyo3(signature = (normal=100, disorder=100, separation=4.0, text_width=768, audio_width=80, seed=0))]
fn generate_synthetic(
    normal: usize,
    disorder: usize,
    separation: f64,
    text_width: usize,
    audio_width: usize,
    seed: u64,
) -> PyResult<PyCorpus> {
    let spec = SynthSpec {
        normal,
        disorder,
        separation,
        text_width,
        audio_width,
        seed,
        ..SynthSpec::default()
    };
    Ok(PyCorpus {
        inner: corpus::generate_synthetic(&spec).map_err(to_py)?,
    })
}

/// Trains on `corpus` and returns the best checkpoint and the epoch log.
///
/// `config` is TOML text in the run-configuration format.
#[pyfunction]
#[pyo3(signature = (corpus, priors=None, config=None, epochs=None, seed=None))]
fn train<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    priors: Option<&PyPriors>,
    config: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let mut cfg = match config {
        Some(text) => RunConfig::parse(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let priors = match priors {
        Some(p) => p.inner.clone(),
        None => CategoryPriors::from_corpus(&corpus.inner).map_err(to_py)?,
    };
    let data = &corpus.inner;
    let outcome = py
        .detach(|| trainer::train(data, &priors, &cfg.model, &cfg.train, &cfg.segment, |_| Ok(())))
        .map_err(to_py)?;
    let log = json(py, &outcome.log)?;
    Ok((PyCheckpoint { inner: outcome.best }, log))
}

/// Exact binary metrics of a confusion matrix, as floats.
#[pyfunction]
#[pyo3(name = "compute_metrics")]
fn py_compute_metrics<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::compute_metrics(ConfusionMatrix::new(tp, fp, fn_, tn)).map_err(to_py)?;
    let pair = |v: &[metrics::Rational; 2]| vec![to_f64(&v[0]), to_f64(&v[1])];
    let d = PyDict::new(py);
    d.set_item("accuracy", to_f64(&m.accuracy))?;
    d.set_item("uar", to_f64(&m.uar))?;
    d.set_item("sensitivity", to_f64(&m.sensitivity))?;
    d.set_item("specificity", to_f64(&m.specificity))?;
    d.set_item("precision", pair(&m.precision))?;
    d.set_item("recall", pair(&m.recall))?;
    d.set_item("f1", pair(&m.f1))?;
    let warnings: Vec<String> = m.warnings.iter().map(ToString::to_string).collect();
    d.set_item("warnings", warnings)?;
    Ok(d)
}

/// `(start_s, end_s)` windows covering a recording.
#[pyfunction]
#[pyo3(signature = (duration_s, window_s=60.0, overlap_s=10.0, min_tail_s=5.0))]
fn segment_windows(duration_s: f64, window_s: f64, overlap_s: f64, min_tail_s: f64) -> PyResult<Vec<(f64, f64)>> {
    let cfg = SegmentConfig {
        window_s,
        overlap_s,
        min_tail_s,
    };
    corpus::segment_windows(duration_s, &cfg).map_err(to_py)
}

/// Log-mel frames (rows × 80) of a mono signal in [-1, 1].
#[pyfunction]
fn mel_spectrogram(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f32>>> {
    let m = corpus::mel_spectrogram(&samples, sample_rate).map_err(to_py)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pymodule]
fn mental_perceiver(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyPriors>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(py_compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(segment_windows, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    Ok(())
}
