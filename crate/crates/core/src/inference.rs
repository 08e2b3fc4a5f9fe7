//! Task adapters on a trained model: closed-vocabulary detection, box-free
//! attribute classification, attribute localization and open-vocabulary
//! detection. Scores are per-query sigmoids.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxCxcywh, BoxXyxy};
use crate::image::Image;
use crate::model::{Model, ModelError};
use crate::querygen::{Provenance, Query, QueryBuilder, QueryError};
use crate::tensor::{sigmoid, Array, Graph};

pub const NMS_IOU: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("top_k must be at least 1")]
    TopK,
    #[error("query list is empty")]
    NoQueries,
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxXyxy,
    pub query_index: usize,
    pub score: f64,
    /// Proposal (patch) that produced the box.
    pub proposal: usize,
}

/// Boxes and query scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub boxes: Vec<BoxXyxy>,
    /// `P × Q` raw logits.
    pub logits: Array,
}

impl ScoredImage {
    pub fn num_queries(&self) -> usize {
        self.logits.cols()
    }

    pub fn score(&self, proposal: usize, query: usize) -> f64 {
        sigmoid(self.logits.get2(proposal, query))
    }

    /// Keeps query columns `start..start + len`, renumbered from zero.
    pub fn columns(&self, start: usize, len: usize) -> ScoredImage {
        let (p, q) = (self.logits.rows(), self.logits.cols());
        let mut data = Vec::with_capacity(p * len);
        for i in 0..p {
            data.extend_from_slice(&self.logits.data()[i * q + start..i * q + start + len]);
        }
        ScoredImage {
            boxes: self.boxes.clone(),
            logits: Array::new(vec![p, len], data).expect("sizes agree"),
        }
    }
}

/// Greedy NMS: visits detections by descending score (ties by proposal
/// index) and drops any whose IoU with a kept one reaches `threshold`.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    sort_detections(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Descending score, ties by proposal then query index.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.proposal.cmp(&b.proposal))
            .then(a.query_index.cmp(&b.query_index))
    });
}

fn query_detections(s: &ScoredImage, q: usize) -> Vec<Detection> {
    (0..s.boxes.len())
        .map(|p| Detection {
            bbox: s.boxes[p],
            query_index: q,
            score: s.score(p, q),
            proposal: p,
        })
        .collect()
}

/// Each proposal keeps its best class (ties to the lower index); NMS runs
/// within each class. Output is grouped by class, each group by score.
pub fn closed_vocab_from_scores(s: &ScoredImage) -> Vec<Detection> {
    let q = s.num_queries();
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); q];
    for p in 0..s.boxes.len() {
        let best = (0..q).fold(0, |b, j| if s.logits.get2(p, j) > s.logits.get2(p, b) { j } else { b });
        if q > 0 {
            per_class[best].push(Detection {
                bbox: s.boxes[p],
                query_index: best,
                score: s.score(p, best),
                proposal: p,
            });
        }
    }
    per_class.into_iter().flat_map(|d| nms(d, NMS_IOU)).collect()
}

/// Proposal whose box overlaps `target` most; ties go to the lower index.
pub fn best_overlap(boxes: &[BoxXyxy], target: &BoxXyxy) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, b) in boxes.iter().enumerate() {
        let v = iou(b, target);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Scores of the best-overlapping proposal against every query.
pub fn boxfree_from_scores(s: &ScoredImage, target: &BoxXyxy) -> (usize, Vec<f64>) {
    let p = best_overlap(&s.boxes, target);
    (p, (0..s.num_queries()).map(|q| s.score(p, q)).collect())
}

/// Per query: NMS over all proposals, then the `top_k` best.
pub fn localize_from_scores(s: &ScoredImage, top_k: usize) -> Vec<Vec<Detection>> {
    (0..s.num_queries())
        .map(|q| {
            let mut kept = nms(query_detections(s, q), NMS_IOU);
            kept.truncate(top_k);
            kept
        })
        .collect()
}

/// All (proposal, query) pairs scoring at least `threshold`, NMS per query.
pub fn open_vocab_from_scores(s: &ScoredImage, threshold: f64) -> Vec<Detection> {
    (0..s.num_queries())
        .flat_map(|q| {
            let d: Vec<Detection> = query_detections(s, q).into_iter().filter(|d| d.score >= threshold).collect();
            nms(d, NMS_IOU)
        })
        .collect()
}

/// A read-only view of a model plus the tokenizer it was trained with.
pub struct Detector<'m> {
    pub model: &'m Model,
    pub builder: &'m QueryBuilder,
}

impl<'m> Detector<'m> {
    pub fn new(model: &'m Model, builder: &'m QueryBuilder) -> Self {
        Self { model, builder }
    }

    /// Class or attribute labels as first-template queries.
    pub fn label_queries(&self, labels: &[String], provenance: Provenance) -> Result<Vec<Query>> {
        Ok(labels
            .iter()
            .map(|l| self.builder.plain(l, provenance))
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Unit-norm embeddings of `queries`, `Q × D`.
    pub fn embed_queries(&self, queries: &[Query]) -> Result<Array> {
        let g = Graph::new();
        let p = self.model.params.bind(&g, false);
        let ids: Vec<Vec<usize>> = queries.iter().map(|q| q.token_ids.clone()).collect();
        Ok(self.model.encode_texts(&p, &ids)?.value())
    }

    /// Boxes and logits of `image` against precomputed query embeddings.
    pub fn score(&self, image: &Image, query_embeddings: &Array) -> Result<ScoredImage> {
        let g = Graph::new();
        let p = self.model.params.bind(&g, false);
        let emb = self.model.encode_image(&p, image)?;
        let q = g.constant(query_embeddings.clone());
        let out = self.model.predict(&p, &emb, &q)?;
        let boxes = out
            .boxes
            .value()
            .data()
            .chunks(4)
            .map(|b| BoxCxcywh::new(b[0], b[1], b[2], b[3]).to_xyxy())
            .collect();
        Ok(ScoredImage {
            boxes,
            logits: out.logits.value(),
        })
    }

    fn score_labels(&self, image: &Image, labels: &[String], provenance: Provenance) -> Result<ScoredImage> {
        let queries = self.label_queries(labels, provenance)?;
        let e = self.embed_queries(&queries)?;
        self.score(image, &e)
    }

    pub fn detect_closed_vocab(&self, image: &Image, classes: &[String]) -> Result<Vec<Detection>> {
        if classes.is_empty() {
            return Err(InferenceError::NoQueries);
        }
        Ok(closed_vocab_from_scores(&self.score_labels(image, classes, Provenance::Class)?))
    }

    /// Returns the selected proposal and one score per attribute.
    pub fn classify_attributes_boxfree(
        &self,
        image: &Image,
        target: &BoxXyxy,
        attributes: &[String],
    ) -> Result<(usize, Vec<f64>)> {
        let s = self.score_labels(image, attributes, Provenance::Attribute)?;
        Ok(boxfree_from_scores(&s, target))
    }

    pub fn localize_by_attribute(
        &self,
        image: &Image,
        attributes: &[String],
        top_k: usize,
    ) -> Result<Vec<Vec<Detection>>> {
        if top_k == 0 {
            return Err(InferenceError::TopK);
        }
        let s = self.score_labels(image, attributes, Provenance::Attribute)?;
        Ok(localize_from_scores(&s, top_k))
    }

    pub fn detect_open_vocab(&self, image: &Image, texts: &[String], threshold: f64) -> Result<Vec<Detection>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(InferenceError::Threshold(threshold));
        }
        let queries = texts
            .iter()
            .map(|t| self.builder.free_text(t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let e = self.embed_queries(&queries)?;
        Ok(open_vocab_from_scores(&self.score(image, &e)?, threshold))
    }
}

/// One image's predictions in the interchange format read by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub image_id: u64,
    pub detections: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    /// `[x0, y0, x1, y1]`, normalized.
    pub bbox: [f64; 4],
    pub query: String,
    pub score: f64,
}

impl PredictionFile {
    pub fn from_detections(image_id: u64, dets: &[Detection], query_texts: &[String]) -> Self {
        Self {
            image_id,
            detections: dets
                .iter()
                .map(|d| PredictionEntry {
                    bbox: d.bbox.to_array(),
                    query: query_texts[d.query_index].clone(),
                    score: d.score,
                })
                .collect(),
        }
    }
}
