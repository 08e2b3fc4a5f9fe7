//! Ranking and detection metrics. AP is the exact, uninterpolated mean of
//! precision at the rank of every positive.

use std::collections::BTreeMap;

use crate::geometry::{iou, BoxXyxy};

/// Indices ordered by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `None` when there is no positive label.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Per-attribute AP over instances. `scores[i][a]` and `truth[i][a]` refer
/// to instance `i` and attribute `a`; attributes without positives map to
/// `None`.
pub fn per_attribute_ap(scores: &[Vec<f64>], truth: &[Vec<bool>], num_attributes: usize) -> Vec<Option<f64>> {
    (0..num_attributes)
        .map(|a| {
            let s: Vec<f64> = scores.iter().map(|r| r[a]).collect();
            let t: Vec<bool> = truth.iter().map(|r| r[a]).collect();
            average_precision(&s, &t)
        })
        .collect()
}

/// Macro mean of the defined entries.
pub fn macro_mean(values: &[Option<f64>]) -> Option<f64> {
    mean(values.iter().flatten().copied())
}

/// Mean recall and mean F1 over attributes when each instance predicts its
/// `k` highest-scoring attributes (ties to the lower attribute index).
/// Attributes that never occur in the ground truth are left out.
pub fn mr_f1_at_k(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize) -> (f64, f64) {
    assert!(k >= 1, "k must be at least 1");
    let n_attr = scores.first().map_or(0, Vec::len);
    let mut hits = vec![0usize; n_attr];
    let mut predicted = vec![0usize; n_attr];
    let mut actual = vec![0usize; n_attr];
    for (s, t) in scores.iter().zip(truth) {
        for a in ranking(s).into_iter().take(k) {
            predicted[a] += 1;
            hits[a] += t[a] as usize;
        }
        for (a, &p) in t.iter().enumerate() {
            actual[a] += p as usize;
        }
    }
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for a in 0..n_attr {
        if actual[a] == 0 {
            continue;
        }
        let r = hits[a] as f64 / actual[a] as f64;
        let p = if predicted[a] == 0 {
            0.0
        } else {
            hits[a] as f64 / predicted[a] as f64
        };
        recalls.push(r);
        f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    (mean(recalls).unwrap_or(0.0), mean(f1s).unwrap_or(0.0))
}

/// A scored box for one query in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoxXyxy,
    pub score: f64,
}

/// Greedy matching: detections in descending score claim the unmatched
/// ground truth of highest IoU, if it reaches `threshold`. Returns the
/// per-detection match flags (in the given order) and the match count.
fn greedy_match(dets: &[ScoredBox], order: &[usize], gts: &[BoxXyxy], threshold: f64) -> (Vec<bool>, usize) {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut count = 0;
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[d] = true;
            count += 1;
        }
    }
    (tp, count)
}

pub const AR_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Recall of one attribute pooled over images, averaged over IoU
/// thresholds. `images[i] = (detections, ground truth)`; only the `k`
/// best-scoring detections of each image count. `None` without ground truth.
pub fn average_recall_at_k(images: &[(Vec<ScoredBox>, Vec<BoxXyxy>)], k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    let total: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return None;
    }
    let recalls = AR_IOU_THRESHOLDS.iter().map(|&t| {
        let found: usize = images
            .iter()
            .map(|(dets, gts)| {
                let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                let order: Vec<usize> = ranking(&scores).into_iter().take(k).collect();
                greedy_match(dets, &order, gts, t).1
            })
            .sum();
        found as f64 / total as f64
    });
    mean(recalls)
}

/// Attribute-localization AR@k per attribute plus macro means per
/// category and overall. `per_attribute[a][i]` holds image `i`'s
/// detections and ground truth for attribute `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationAr {
    pub per_attribute: Vec<Option<f64>>,
    pub per_category: BTreeMap<String, f64>,
    pub mean: Option<f64>,
}

pub fn attribute_localization_ar(
    per_attribute: &[Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>],
    categories: &[String],
    k: usize,
) -> LocalizationAr {
    let ars: Vec<Option<f64>> = per_attribute.iter().map(|imgs| average_recall_at_k(imgs, k)).collect();
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (ar, cat) in ars.iter().zip(categories) {
        if let Some(v) = ar {
            grouped.entry(cat.clone()).or_default().push(*v);
        }
    }
    let per_category = grouped
        .into_iter()
        .map(|(c, v)| (c, mean(v).expect("non-empty group")))
        .collect();
    LocalizationAr {
        mean: macro_mean(&ars),
        per_attribute: ars,
        per_category,
    }
}

/// Detection AP at one IoU threshold for one class. `images[i]` holds that
/// image's detections and ground-truth boxes of the class. Detections are
/// ranked jointly across images (ties by image, then input order).
pub fn detection_ap(images: &[(Vec<ScoredBox>, Vec<BoxXyxy>)], threshold: f64) -> Option<f64> {
    let total: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in images {
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let order = ranking(&scores);
        let (tp, _) = greedy_match(dets, &order, gts, threshold);
        pooled.extend(dets.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    let scores: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(&scores).iter().enumerate() {
        if pooled[i].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// AP50 macro means over the novel classes, the base classes and both.
#[derive(Debug, Clone, PartialEq)]
pub struct OvdAp50 {
    pub per_class: Vec<Option<f64>>,
    pub novel: Option<f64>,
    pub base: Option<f64>,
    pub all: Option<f64>,
}

/// `per_class[c][i]` = image `i`'s detections and ground truth for class
/// `c`; `novel` flags each class.
pub fn ovd_ap50(per_class: &[Vec<(Vec<ScoredBox>, Vec<BoxXyxy>)>], novel: &[bool]) -> OvdAp50 {
    let aps: Vec<Option<f64>> = per_class.iter().map(|imgs| detection_ap(imgs, 0.5)).collect();
    let pick = |want: Option<bool>| {
        macro_mean(
            &aps.iter()
                .zip(novel)
                .filter(|(_, &n)| want.is_none_or(|w| w == n))
                .map(|(a, _)| *a)
                .collect::<Vec<_>>(),
        )
    };
    OvdAp50 {
        novel: pick(Some(true)),
        base: pick(Some(false)),
        all: pick(None),
        per_class: aps,
    }
}

/// Row-wise min-max scaling to `[0, 1]`; constant rows become zeros.
pub fn minmax_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                r.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

/// Mean over rows of the population variance within each row.
pub fn mean_row_variance(rows: &[Vec<f64>]) -> f64 {
    mean(rows.iter().filter(|r| !r.is_empty()).map(|r| {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64
    }))
    .unwrap_or(0.0)
}
