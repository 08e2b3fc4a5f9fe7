//! Held-out evaluation: box-free attribute classification (mAP, mR@K,
//! F1@K, head/medium/tail), attribute localization AR, closed-vocabulary
//! AP50, open-vocabulary AP50 over novel and base phrases, and the
//! normalized logits matrix.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{attribute_category, AttributeFrequencyTable, FrequencySplit, ImageRecord, SyntheticSpec, CLASSES, COLORS};
use crate::geometry::BoxXyxy;
use crate::inference::{
    boxfree_from_scores, closed_vocab_from_scores, localize_from_scores, open_vocab_from_scores, Detection, Detector,
    InferenceError,
};
use crate::querygen::{Provenance, Query, QueryError, WordOrder};

pub use metrics::{
    attribute_localization_ar, average_precision, average_recall_at_k, detection_ap, macro_mean, mean_row_variance,
    minmax_rows, mr_f1_at_k, ovd_ap50, per_attribute_ap, LocalizationAr, OvdAp50, ScoredBox, AR_IOU_THRESHOLDS,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("evaluation spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// An attribute + class phrase scored in open-vocabulary detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub attribute: String,
    pub class: String,
    pub novel: bool,
}

impl Phrase {
    pub fn label(&self) -> String {
        format!("{} {}", self.attribute, self.class)
    }
}

/// What to evaluate and how.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub classes: Vec<String>,
    pub attributes: Vec<String>,
    /// Category of each attribute, parallel to `attributes`.
    pub categories: Vec<String>,
    pub phrases: Vec<Phrase>,
    /// K of mR@K and F1@K.
    pub k: usize,
    /// K of attribute-localization AR.
    pub ar_k: usize,
    pub frequency: AttributeFrequencyTable,
}

impl EvalSpec {
    /// The synthetic label space: four classes, the attribute values seen
    /// in `train`, and every color × class phrase (withheld pairs novel).
    pub fn synthetic(spec: &SyntheticSpec, train: &[ImageRecord], k: usize) -> Self {
        let frequency = AttributeFrequencyTable::from_records(train, 2.0 / 3.0, 1.0 / 3.0);
        let attributes: Vec<String> = frequency.counts.keys().cloned().collect();
        let categories = attributes
            .iter()
            .map(|a| attribute_category(a).unwrap_or("other").to_string())
            .collect();
        let phrases = CLASSES
            .iter()
            .flat_map(|c| {
                COLORS.iter().map(move |(col, _)| Phrase {
                    attribute: col.to_string(),
                    class: c.to_string(),
                    novel: spec.is_withheld(c, col),
                })
            })
            .collect();
        Self {
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            attributes,
            categories,
            phrases,
            k,
            ar_k: 10,
            frequency,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.attributes.is_empty() {
            return Err(EvalError::Spec("classes and attributes must be non-empty".into()));
        }
        if self.categories.len() != self.attributes.len() {
            return Err(EvalError::Spec("one category per attribute is required".into()));
        }
        if self.k == 0 || self.ar_k == 0 {
            return Err(EvalError::Spec("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_images: usize,
    pub num_instances: usize,
    pub k: usize,
    pub map_all: Option<f64>,
    pub map_head: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_tail: Option<f64>,
    pub mr_at_k: f64,
    pub f1_at_k: f64,
    pub per_attribute_ap: BTreeMap<String, Option<f64>>,
    /// Attributes without ground-truth positives, excluded from means.
    pub undefined_attributes: Vec<String>,
    pub ar_k: usize,
    pub ar_per_category: BTreeMap<String, f64>,
    pub ar_mean: Option<f64>,
    pub closed_ap50: Option<f64>,
    pub ap50_novel: Option<f64>,
    pub ap50_base: Option<f64>,
    pub ap50_all: Option<f64>,
    /// Attribute mAP restricted to instances of novel phrases.
    pub novel_map: Option<f64>,
    /// Localization AR restricted to instances of novel phrases.
    pub novel_ar_mean: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl MetricReport {
    /// Human-readable summary, values ×100.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let k = self.k;
        let _ = writeln!(s, "images {}  instances {}", self.num_images, self.num_instances);
        let _ = writeln!(s, "attribute classification (box-free)");
        let _ = writeln!(
            s,
            "  mAP {}  head {}  medium {}  tail {}  mR@{k} {}  F1@{k} {}",
            pct(self.map_all),
            pct(self.map_head),
            pct(self.map_medium),
            pct(self.map_tail),
            pct(Some(self.mr_at_k)),
            pct(Some(self.f1_at_k))
        );
        let _ = writeln!(s, "  novel-phrase instances mAP {}", pct(self.novel_map));
        for (a, ap) in &self.per_attribute_ap {
            let _ = writeln!(s, "    {a:<18} {}", pct(*ap));
        }
        if !self.undefined_attributes.is_empty() {
            let _ = writeln!(s, "  undefined (no positives): {}", self.undefined_attributes.join(", "));
        }
        let _ = writeln!(s, "attribute localization AR@{}", self.ar_k);
        for (c, v) in &self.ar_per_category {
            let _ = writeln!(s, "    {c:<18} {}", pct(Some(*v)));
        }
        let _ = writeln!(s, "  mean {}  novel-phrase instances {}", pct(self.ar_mean), pct(self.novel_ar_mean));
        let _ = writeln!(s, "closed-vocabulary AP50 {}", pct(self.closed_ap50));
        let _ = writeln!(
            s,
            "open-vocabulary AP50  novel {}  base {}  all {}",
            pct(self.ap50_novel),
            pct(self.ap50_base),
            pct(self.ap50_all)
        );
        s
    }
}

fn scored(dets: &[Detection]) -> Vec<ScoredBox> {
    dets.iter()
        .map(|d| ScoredBox {
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

/// The evaluation query set: classes, attributes, then phrases.
pub fn eval_queries(det: &Detector<'_>, spec: &EvalSpec) -> Result<Vec<Query>> {
    let mut q = det.label_queries(&spec.classes, Provenance::Class)?;
    q.extend(det.label_queries(&spec.attributes, Provenance::Attribute)?);
    for p in &spec.phrases {
        q.push(
            det.builder
                .composite(&p.attribute, &p.class, WordOrder::AttrThenObj, BTreeSet::new())?,
        );
    }
    Ok(q)
}

pub fn evaluate(det: &Detector<'_>, records: &[ImageRecord], spec: &EvalSpec) -> Result<MetricReport> {
    spec.validate()?;
    let queries = eval_queries(det, spec)?;
    let embeddings = det.embed_queries(&queries)?;
    let (nc, na, np) = (spec.classes.len(), spec.attributes.len(), spec.phrases.len());
    let attr_index: BTreeMap<&str, usize> = spec.attributes.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let is_novel = |class: &str, attrs: &[String]| {
        spec.phrases
            .iter()
            .any(|p| p.novel && p.class == class && attrs.contains(&p.attribute))
    };

    let mut inst_scores: Vec<Vec<f64>> = Vec::new();
    let mut inst_truth: Vec<Vec<bool>> = Vec::new();
    let mut inst_novel: Vec<bool> = Vec::new();
    let mut closed: Vec<Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>> = vec![Vec::new(); nc];
    let mut loc: Vec<Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>> = vec![Vec::new(); na];
    let mut loc_novel: Vec<Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>> = vec![Vec::new(); na];
    let mut ovd: Vec<Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>> = vec![Vec::new(); np];

    for rec in records {
        let all = det.score(&rec.image, &embeddings)?;
        let classes = all.columns(0, nc);
        let attrs = all.columns(nc, na);
        let phrases = all.columns(nc + na, np);

        for inst in &rec.instances {
            let (_, s) = boxfree_from_scores(&attrs, &inst.bbox.to_xyxy());
            let mut t = vec![false; na];
            for a in &inst.attributes {
                if let Some(&i) = attr_index.get(a.as_str()) {
                    t[i] = true;
                }
            }
            inst_scores.push(s);
            inst_truth.push(t);
            inst_novel.push(is_novel(&inst.class_label, &inst.attributes));
        }

        let dets = closed_vocab_from_scores(&classes);
        for (c, name) in spec.classes.iter().enumerate() {
            let d: Vec<Detection> = dets.iter().filter(|d| d.query_index == c).copied().collect();
            let g = rec
                .instances
                .iter()
                .filter(|i| &i.class_label == name)
                .map(|i| i.bbox.to_xyxy())
                .collect();
            closed[c].push((scored(&d), g));
        }

        let ranked = localize_from_scores(&attrs, spec.ar_k);
        for (a, name) in spec.attributes.iter().enumerate() {
            let holders: Vec<_> = rec.instances.iter().filter(|i| i.attributes.contains(name)).collect();
            let g: Vec<BoxXyxy> = holders.iter().map(|i| i.bbox.to_xyxy()).collect();
            let gn: Vec<BoxXyxy> = holders
                .iter()
                .filter(|i| is_novel(&i.class_label, &i.attributes))
                .map(|i| i.bbox.to_xyxy())
                .collect();
            loc[a].push((scored(&ranked[a]), g));
            loc_novel[a].push((scored(&ranked[a]), gn));
        }

        let open = open_vocab_from_scores(&phrases, 0.0);
        for (p, ph) in spec.phrases.iter().enumerate() {
            let d: Vec<Detection> = open.iter().filter(|d| d.query_index == p).copied().collect();
            let g = rec
                .instances
                .iter()
                .filter(|i| i.class_label == ph.class && i.attributes.contains(&ph.attribute))
                .map(|i| i.bbox.to_xyxy())
                .collect();
            ovd[p].push((scored(&d), g));
        }
    }

    let aps = per_attribute_ap(&inst_scores, &inst_truth, na);
    let split_mean = |split: FrequencySplit| {
        macro_mean(
            &aps.iter()
                .zip(&spec.attributes)
                .filter(|(_, a)| spec.frequency.split_of(a) == Some(split))
                .map(|(ap, _)| *ap)
                .collect::<Vec<_>>(),
        )
    };
    let (mr, f1) = mr_f1_at_k(&inst_scores, &inst_truth, spec.k);
    let pick = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().zip(&inst_novel).filter(|(_, &n)| n).map(|(r, _)| r.clone()).collect() };
    let pick_b = |v: &[Vec<bool>]| -> Vec<Vec<bool>> { v.iter().zip(&inst_novel).filter(|(_, &n)| n).map(|(r, _)| r.clone()).collect() };
    let novel_map = macro_mean(&per_attribute_ap(&pick(&inst_scores), &pick_b(&inst_truth), na));
    let ar = attribute_localization_ar(&loc, &spec.categories, spec.ar_k);
    let ar_novel = attribute_localization_ar(&loc_novel, &spec.categories, spec.ar_k);
    let closed_ap = ovd_ap50(&closed, &vec![false; nc]);
    let novel_flags: Vec<bool> = spec.phrases.iter().map(|p| p.novel).collect();
    let open_ap = ovd_ap50(&ovd, &novel_flags);

    Ok(MetricReport {
        num_images: records.len(),
        num_instances: inst_scores.len(),
        k: spec.k,
        map_all: macro_mean(&aps),
        map_head: split_mean(FrequencySplit::Head),
        map_medium: split_mean(FrequencySplit::Medium),
        map_tail: split_mean(FrequencySplit::Tail),
        mr_at_k: mr,
        f1_at_k: f1,
        undefined_attributes: spec
            .attributes
            .iter()
            .zip(&aps)
            .filter(|(_, ap)| ap.is_none())
            .map(|(a, _)| a.clone())
            .collect(),
        per_attribute_ap: spec.attributes.iter().cloned().zip(aps).collect(),
        ar_k: spec.ar_k,
        ar_per_category: ar.per_category,
        ar_mean: ar.mean,
        closed_ap50: closed_ap.all,
        ap50_novel: open_ap.novel,
        ap50_base: open_ap.base,
        ap50_all: open_ap.all,
        novel_map,
        novel_ar_mean: ar_novel.mean,
    })
}

/// Raw logits of every ground-truth instance (through its best-overlapping
/// proposal) against `queries`: one row per instance, in record order.
pub fn logits_matrix(det: &Detector<'_>, records: &[ImageRecord], queries: &[Query]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let e = det.embed_queries(queries)?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let s = det.score(&rec.image, &e)?;
        for inst in &rec.instances {
            let (p, _) = boxfree_from_scores(&s, &inst.bbox.to_xyxy());
            labels.push(format!("{}:{}", rec.id, inst.id));
            rows.push(s.logits.row(p).to_vec());
        }
    }
    Ok((labels, rows))
}

/// Writes the row-normalized matrix as CSV: header `instance,<query...>`.
/// Returns the normalized rows.
pub fn export_logits_matrix<W: Write>(
    det: &Detector<'_>,
    records: &[ImageRecord],
    queries: &[Query],
    mut out: W,
) -> Result<Vec<Vec<f64>>> {
    let (labels, raw) = logits_matrix(det, records, queries)?;
    let norm = minmax_rows(&raw);
    let header: Vec<String> = std::iter::once("instance".to_string())
        .chain(queries.iter().map(|q| csv_field(&q.label)))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (l, r) in labels.iter().zip(&norm) {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{l},{}", cells.join(","))?;
    }
    Ok(norm)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
