//! Brute-force reference metrics, written without sharing code with the
//! library. Ties in score are broken by position (earlier ranks higher).

use ovattr::evaluation::ScoredBox;
use ovattr::geometry::BoxXyxy;

/// Overlap by direct area arithmetic.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let area = |x: &BoxXyxy| (x.x1 - x.x0) * (x.y1 - x.y0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// 1-based rank of item `i`: one plus the number of items placed before it.
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let ranks: Vec<usize> = (0..scores.len()).map(|i| rank_of(scores, i)).collect();
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above = pos.iter().filter(|&&j| ranks[j] <= ranks[i]).count();
            above as f64 / ranks[i] as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Mean recall and mean F1 over attributes present in the ground truth.
pub fn mr_f1(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize) -> (f64, f64) {
    let n_attr = scores[0].len();
    let chosen: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| (0..n_attr).map(|a| rank_of(s, a) <= k).collect())
        .collect();
    let (mut rs, mut fs) = (Vec::new(), Vec::new());
    for a in 0..n_attr {
        let actual = truth.iter().filter(|t| t[a]).count();
        if actual == 0 {
            continue;
        }
        let pred = chosen.iter().filter(|c| c[a]).count();
        let hit = (0..scores.len()).filter(|&i| chosen[i][a] && truth[i][a]).count();
        let r = hit as f64 / actual as f64;
        let p = if pred > 0 { hit as f64 / pred as f64 } else { 0.0 };
        rs.push(r);
        fs.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (avg(&rs), avg(&fs))
}

/// True-positive flags of `dets` (by index) when detections are visited by
/// rank and each claims the free ground truth of highest IoU ≥ `thr`
/// (first such ground truth on equal IoU). Detections ranked beyond `limit`
/// are ignored.
pub fn greedy_tp(dets: &[ScoredBox], gts: &[BoxXyxy], thr: f64, limit: usize) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut by_rank: Vec<(usize, usize)> = (0..dets.len()).map(|i| (rank_of(&scores, i), i)).collect();
    by_rank.sort();
    let mut free = vec![true; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &(r, d) in &by_rank {
        if r > limit {
            break;
        }
        let mut best = None;
        let mut best_v = -1.0;
        for g in 0..gts.len() {
            let v = iou(&dets[d].bbox, &gts[g]);
            if free[g] && v >= thr && v > best_v {
                best = Some(g);
                best_v = v;
            }
        }
        if let Some(g) = best {
            free[g] = false;
            tp[d] = true;
        }
    }
    tp
}

pub fn ar_at_k(images: &[(Vec<ScoredBox>, Vec<BoxXyxy>)], k: usize) -> Option<f64> {
    let total: usize = images.iter().map(|x| x.1.len()).sum();
    if total == 0 {
        return None;
    }
    let mut acc = 0.0;
    for step in 0..10 {
        let thr = 0.5 + 0.05 * step as f64;
        let found: usize = images
            .iter()
            .map(|(d, g)| greedy_tp(d, g, thr, k).iter().filter(|&&t| t).count())
            .sum();
        acc += found as f64 / total as f64;
    }
    Some(acc / 10.0)
}

pub fn det_ap(images: &[(Vec<ScoredBox>, Vec<BoxXyxy>)], thr: f64) -> Option<f64> {
    let total: usize = images.iter().map(|x| x.1.len()).sum();
    if total == 0 {
        return None;
    }
    let mut scores = Vec::new();
    let mut tps = Vec::new();
    for (d, g) in images {
        scores.extend(d.iter().map(|x| x.score));
        tps.extend(greedy_tp(d, g, thr, usize::MAX));
    }
    let ranks: Vec<usize> = (0..scores.len()).map(|i| rank_of(&scores, i)).collect();
    let sum: f64 = (0..scores.len())
        .filter(|&i| tps[i])
        .map(|i| (0..scores.len()).filter(|&j| tps[j] && ranks[j] <= ranks[i]).count() as f64 / ranks[i] as f64)
        .sum();
    Some(sum / total as f64)
}

pub fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}
