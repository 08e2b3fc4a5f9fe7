#![allow(dead_code)]

pub mod gradcheck;
pub mod metric_cases;
pub mod oracles;
pub mod sampling;

use ovattr::evaluation::ScoredBox;
use ovattr::geometry::BoxXyxy;
use rand::Rng;

/// Random box with corners on a coarse grid so that IoU ties occur.
pub fn grid_box<R: Rng>(rng: &mut R) -> BoxXyxy {
    let a = rng.random_range(0..8) as f64 / 10.0;
    let b = rng.random_range(0..8) as f64 / 10.0;
    let w = rng.random_range(1..=3) as f64 / 10.0;
    let h = rng.random_range(1..=3) as f64 / 10.0;
    BoxXyxy::new(a, b, a + w, b + h)
}

/// Score from a small set (ties) or continuous, by coin flip per instance.
pub fn score<R: Rng>(rng: &mut R, coarse: bool) -> f64 {
    if coarse {
        rng.random_range(0..5) as f64 / 4.0
    } else {
        rng.random::<f64>()
    }
}

/// One image's detections and ground truth for one class or attribute.
pub fn detection_image<R: Rng>(rng: &mut R, coarse: bool) -> (Vec<ScoredBox>, Vec<BoxXyxy>) {
    let gts: Vec<BoxXyxy> = (0..rng.random_range(0..4)).map(|_| grid_box(rng)).collect();
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..7) {
        let bbox = if !gts.is_empty() && rng.random_bool(0.5) {
            let g = gts[rng.random_range(0..gts.len())];
            let j = |v: f64, r: &mut R| v + rng_jitter(r);
            BoxXyxy::new(j(g.x0, rng), j(g.y0, rng), g.x1 + rng_jitter(rng).abs(), g.y1 + rng_jitter(rng).abs())
        } else {
            grid_box(rng)
        };
        dets.push(ScoredBox { bbox, score: score(rng, coarse) });
    }
    (dets, gts)
}

fn rng_jitter<R: Rng>(rng: &mut R) -> f64 {
    [0.0, 0.0, 0.05, -0.05, 0.1][rng.random_range(0..5)]
}
