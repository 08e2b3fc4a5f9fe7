//! Python bindings: synthetic data, training, the four inference modes and
//! the evaluation report. Boxes cross the boundary as `(x0, y0, x1, y1)`.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ovattr::dataset::{generate_synthetic, read_ppm, ImageRecord, SyntheticData, SyntheticSpec};
use ovattr::evaluation::{evaluate, EvalSpec};
use ovattr::geometry::{self, BoxXyxy};
use ovattr::image::Image;
use ovattr::inference::{self, Detection};
use ovattr::matching::{hungarian_assign, CostMatrix};
use ovattr::model::{Model, ModelConfig};
use ovattr::querygen::{parse_antonyms, LabelCandidateSet, QueryBuilder, Templates, Vocabulary, DEFAULT_ANTONYMS};
use ovattr::trainer::{config_hash, load_checkpoint, run_schedule, save_checkpoint, Checkpoint, TrainConfig, TrainData};

const CHECKPOINT_FILE: &str = "checkpoint.lwa";
const VOCAB_FILE: &str = "vocab.txt";

type Xyxy = (f64, f64, f64, f64);

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_box(b: Xyxy) -> BoxXyxy {
    BoxXyxy::new(b.0, b.1, b.2, b.3)
}

fn from_box(b: &BoxXyxy) -> Xyxy {
    (b.x0, b.y0, b.x1, b.y1)
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("box", from_box(&d.bbox))?;
    out.set_item("query", d.query_index)?;
    out.set_item("score", d.score)?;
    out.set_item("proposal", d.proposal)?;
    Ok(out)
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn box_iou(a: Xyxy, b: Xyxy) -> f64 {
    geometry::iou(&to_box(a), &to_box(b))
}

#[pyfunction]
fn box_giou(a: Xyxy, b: Xyxy) -> f64 {
    geometry::giou(&to_box(a), &to_box(b))
}

/// Minimum-cost assignment of a rectangular cost matrix.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let m = CostMatrix::from_rows(&cost).map_err(err)?;
    let a = hungarian_assign(&m);
    Ok((a.pairs, a.total_cost))
}

/// Greedy NMS over `(box, score, query)` triples.
#[pyfunction]
fn nms(py: Python<'_>, detections: Vec<(Xyxy, f64, usize)>, threshold: f64) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let dets = detections
        .into_iter()
        .enumerate()
        .map(|(i, (b, score, query_index))| Detection {
            bbox: to_box(b),
            query_index,
            score,
            proposal: i,
        })
        .collect();
    inference::nms(dets, threshold).iter().map(|d| detection_dict(py, d)).collect()
}

#[pyclass(name = "Image", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(size: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        Image::new(size, channels, data)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err("data length must equal size * size * channels"))
    }

    #[staticmethod]
    fn read_ppm(path: PathBuf) -> PyResult<Self> {
        read_ppm(&path).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    fn pixels(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn resized(&self, size: usize) -> Self {
        Self { inner: self.inner.resized(size) }
    }
}

/// Synthetic shapes data with both splits.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    spec: SyntheticSpec,
    data: SyntheticData,
}

impl PyDataset {
    fn split(&self, split: &str) -> PyResult<&[ImageRecord]> {
        match split {
            "train" => Ok(&self.data.train),
            "heldout" => Ok(&self.data.heldout),
            other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        }
    }

    fn record(&self, split: &str, index: usize) -> PyResult<&ImageRecord> {
        self.split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("{split} has no image {index}")))
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed, num_train=None, num_heldout=None))]
    fn synthetic(seed: u64, num_train: Option<usize>, num_heldout: Option<usize>) -> PyResult<Self> {
        let mut spec = SyntheticSpec::default();
        spec.num_train = num_train.unwrap_or(spec.num_train);
        spec.num_heldout = num_heldout.unwrap_or(spec.num_heldout);
        let data = generate_synthetic(&spec, seed).map_err(err)?;
        Ok(Self { spec, data })
    }

    fn __len__(&self) -> usize {
        self.data.train.len() + self.data.heldout.len()
    }

    #[pyo3(signature = (split="train"))]
    fn num_images(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    fn image(&self, split: &str, index: usize) -> PyResult<PyImage> {
        Ok(PyImage { inner: self.record(split, index)?.image.clone() })
    }

    /// Instances of one image as dicts with `box`, `class` and `attributes`.
    fn instances<'py>(&self, py: Python<'py>, split: &str, index: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.record(split, index)?
            .instances
            .iter()
            .map(|inst| {
                let d = PyDict::new(py);
                d.set_item("id", inst.id)?;
                d.set_item("box", from_box(&inst.bbox.to_xyxy()))?;
                d.set_item("class", &inst.class_label)?;
                d.set_item("attributes", &inst.attributes)?;
                Ok(d)
            })
            .collect()
    }

    fn novel_phrases(&self) -> Vec<String> {
        self.spec.novel_phrases().into_iter().collect()
    }
}

/// An owned model plus the query builder it was trained with.
#[pyclass(name = "Detector", frozen)]
struct PyDetector {
    ckpt: Checkpoint,
    builder: QueryBuilder,
}

fn builder_for(records: &[ImageRecord]) -> PyResult<(LabelCandidateSet, QueryBuilder)> {
    let candidates = LabelCandidateSet::from_records(records, parse_antonyms(DEFAULT_ANTONYMS).map_err(err)?);
    let templates = Templates::builtin();
    let builder = QueryBuilder::new(candidates.vocabulary(&templates), templates);
    Ok((candidates, builder))
}

impl PyDetector {
    fn detector(&self) -> inference::Detector<'_> {
        inference::Detector::new(&self.ckpt.model, &self.builder)
    }

    fn fit(&self, image: &PyImage) -> Image {
        let size = self.ckpt.model.config.image_size;
        if image.inner.size == size {
            image.inner.clone()
        } else {
            image.inner.resized(size)
        }
    }

    fn dicts<'py>(py: Python<'py>, dets: &[Detection]) -> PyResult<Vec<Bound<'py, PyDict>>> {
        dets.iter().map(|d| detection_dict(py, d)).collect()
    }
}

#[pymethods]
impl PyDetector {
    /// A freshly initialised model whose vocabulary covers `dataset`'s training labels.
    #[staticmethod]
    fn untrained(dataset: &PyDataset, seed: u64) -> PyResult<Self> {
        let (_, builder) = builder_for(&dataset.data.train)?;
        let model = Model::new(ModelConfig::default(), seed).map_err(err)?;
        let cfg = TrainConfig::default();
        let hash = config_hash(&model.config, &builder.vocab, &cfg);
        Ok(Self { ckpt: Checkpoint::new(model, cfg.optimizer, hash), builder })
    }

    /// Trains on the training split; returns the detector and its loss curve.
    #[staticmethod]
    #[pyo3(signature = (dataset, steps=(2000, 2000, 1000), seed=0, batch_size=8))]
    fn train<'py>(
        py: Python<'py>,
        dataset: &PyDataset,
        steps: (u64, u64, u64),
        seed: u64,
        batch_size: usize,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let (candidates, builder) = builder_for(&dataset.data.train)?;
        let cfg = TrainConfig {
            steps_o: steps.0,
            steps_a: steps.1,
            steps_f: steps.2,
            seed,
            batch_size,
            ..TrainConfig::default()
        };
        let model = Model::new(ModelConfig::default(), seed).map_err(err)?;
        let hash = config_hash(&model.config, &builder.vocab, &cfg);
        let mut ckpt = Checkpoint::new(model, cfg.optimizer, hash);
        let data = TrainData { records: &dataset.data.train, candidates, builder };
        let records = py
            .detach(|| run_schedule(&mut ckpt, &data, &cfg, None, |_| {}))
            .map_err(err)?;
        let losses = json_to_py(py, &records)?;
        Ok((Self { ckpt, builder: data.builder }, losses))
    }

    /// Loads a directory written by `save` or by the command-line trainer.
    #[staticmethod]
    fn load(directory: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&directory.join(CHECKPOINT_FILE), None, false).map_err(err)?;
        let text = std::fs::read_to_string(directory.join(VOCAB_FILE)).map_err(err)?;
        let vocab = Vocabulary::parse(&text).map_err(err)?;
        Ok(Self { ckpt, builder: QueryBuilder::new(vocab, Templates::builtin()) })
    }

    fn save(&self, directory: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&directory).map_err(err)?;
        save_checkpoint(&directory.join(CHECKPOINT_FILE), &self.ckpt).map_err(err)?;
        std::fs::write(directory.join(VOCAB_FILE), self.builder.vocab.to_text()).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.ckpt.step
    }

    fn detect_closed<'py>(&self, py: Python<'py>, image: &PyImage, classes: Vec<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let dets = self.detector().detect_closed_vocab(&self.fit(image), &classes).map_err(err)?;
        Self::dicts(py, &dets)
    }

    #[pyo3(signature = (image, texts, threshold=0.5))]
    fn detect_open<'py>(
        &self,
        py: Python<'py>,
        image: &PyImage,
        texts: Vec<String>,
        threshold: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let dets = self
            .detector()
            .detect_open_vocab(&self.fit(image), &texts, threshold)
            .map_err(err)?;
        Self::dicts(py, &dets)
    }

    /// Top-k boxes per attribute.
    #[pyo3(signature = (image, attributes, top_k=10))]
    fn localize<'py>(
        &self,
        py: Python<'py>,
        image: &PyImage,
        attributes: Vec<String>,
        top_k: usize,
    ) -> PyResult<Vec<Vec<Bound<'py, PyDict>>>> {
        let per_attr = self
            .detector()
            .localize_by_attribute(&self.fit(image), &attributes, top_k)
            .map_err(err)?;
        per_attr.iter().map(|dets| Self::dicts(py, dets)).collect()
    }

    /// One score per attribute for the proposal that best overlaps `target`.
    fn classify_attributes(&self, image: &PyImage, target: Xyxy, attributes: Vec<String>) -> PyResult<Vec<f64>> {
        let (_, scores) = self
            .detector()
            .classify_attributes_boxfree(&self.fit(image), &to_box(target), &attributes)
            .map_err(err)?;
        Ok(scores)
    }

    /// Metric report on the held-out split, as a dict.
    #[pyo3(signature = (dataset, k=10))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, k: usize) -> PyResult<Bound<'py, PyAny>> {
        let spec = EvalSpec::synthetic(&dataset.spec, &dataset.data.train, k);
        let report = evaluate(&self.detector(), &dataset.data.heldout, &spec).map_err(err)?;
        json_to_py(py, &report)
    }
}

#[pymodule]
#[pyo3(name = "ovattr")]
fn ovattr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(box_giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyDetector>()?;
    Ok(())
}
