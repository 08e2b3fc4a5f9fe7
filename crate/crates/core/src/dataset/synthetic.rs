//! Coloured shapes on dark noise. Every label is a function of how the
//! shape was drawn, so the generator doubles as ground truth.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageRecord, Instance, Result};
use crate::geometry::BoxCxcywh;
use crate::image::Image;

pub const CLASSES: [&str; 4] = ["square", "circle", "triangle", "bar"];

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.95, 0.15, 0.10]),
    ("green", [0.15, 0.85, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("cyan", [0.15, 0.85, 0.90]),
    ("magenta", [0.90, 0.20, 0.85]),
];

pub const SIZES: [&str; 2] = ["small", "large"];
pub const FILLS: [&str; 2] = ["solid", "hollow"];
/// Bars only. Multi-word on purpose.
pub const ORIENTATIONS: [&str; 2] = ["standing upright", "lying flat"];

/// Attribute axis of a synthetic attribute value.
pub fn attribute_category(attribute: &str) -> Option<&'static str> {
    if COLORS.iter().any(|(c, _)| *c == attribute) {
        Some("color")
    } else if SIZES.contains(&attribute) {
        Some("size")
    } else if FILLS.contains(&attribute) {
        Some("fill")
    } else if ORIENTATIONS.contains(&attribute) {
        Some("orientation")
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_train: usize,
    pub num_heldout: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive pixel range of the long side of small shapes.
    pub small_px: (usize, usize),
    pub large_px: (usize, usize),
    /// `(class, color)` pairs never rendered in the training split.
    pub withheld: Vec<(String, String)>,
    /// Probability that a held-out instance uses a withheld pair.
    pub novel_fraction: f64,
    pub background_max: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let pair = |a: &str, b: &str| (a.to_string(), b.to_string());
        Self {
            image_size: 64,
            num_train: 1200,
            num_heldout: 200,
            min_objects: 1,
            max_objects: 3,
            small_px: (10, 14),
            large_px: (20, 28),
            withheld: vec![
                pair("square", "blue"),
                pair("circle", "red"),
                pair("triangle", "yellow"),
                pair("bar", "green"),
            ],
            novel_fraction: 0.5,
            background_max: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<ImageRecord>,
    pub heldout: Vec<ImageRecord>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::Spec(m));
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return bad(format!(
                "object count range {}..={} is empty or allows images without objects",
                self.min_objects, self.max_objects
            ));
        }
        let (s0, s1, l0, l1) = (self.small_px.0, self.small_px.1, self.large_px.0, self.large_px.1);
        if !(4 <= s0 && s0 <= s1 && s1 < l0 && l0 <= l1) {
            return bad("size ranges must satisfy 4 <= small <= small_max < large <= large_max".into());
        }
        if l1 + 2 > self.image_size {
            return bad(format!("large shapes ({l1} px) do not fit a {} px image", self.image_size));
        }
        // Worst case: every object large and square, plus a one-pixel gap.
        let worst = self.max_objects * (l1 + 1) * (l1 + 1);
        if worst * 10 > self.image_size * self.image_size * 7 {
            return bad(format!(
                "{} large objects cannot be placed disjointly in a {} px image",
                self.max_objects, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) {
            return bad("novel_fraction must lie in [0, 1]".into());
        }
        for (cls, col) in &self.withheld {
            if !CLASSES.contains(&cls.as_str()) || !COLORS.iter().any(|(c, _)| c == col) {
                return bad(format!("withheld pair ({cls}, {col}) is not a class/color pair"));
            }
        }
        for cls in CLASSES {
            if COLORS.iter().all(|(c, _)| self.is_withheld(cls, c)) {
                return bad(format!("every color of {cls} is withheld"));
            }
        }
        Ok(())
    }

    pub fn is_withheld(&self, class: &str, color: &str) -> bool {
        self.withheld.iter().any(|(a, b)| a == class && b == color)
    }

    /// Distinct `"color class"` phrases of the withheld pairs.
    pub fn novel_phrases(&self) -> BTreeSet<String> {
        self.withheld.iter().map(|(c, col)| format!("{col} {c}")).collect()
    }
}

#[derive(Debug, Clone)]
struct Shape {
    class: usize,
    color: usize,
    large: bool,
    hollow: bool,
    upright: bool,
    w: usize,
    h: usize,
    x: usize,
    y: usize,
}

impl Shape {
    fn stroke(&self) -> f64 {
        (self.w.max(self.h) as f64 * 0.12).max(1.5)
    }

    /// Is the continuous point `(px, py)` painted?
    fn covers(&self, px: f64, py: f64) -> bool {
        let (x0, y0) = (self.x as f64, self.y as f64);
        let (w, h) = (self.w as f64, self.h as f64);
        let (u, v) = (px - x0, py - y0);
        if u < 0.0 || v < 0.0 || u > w || v > h {
            return false;
        }
        let t = self.stroke();
        match CLASSES[self.class] {
            "circle" => {
                let r = w / 2.0;
                let d = ((u - r).powi(2) + (v - r).powi(2)).sqrt();
                d <= r && (!self.hollow || d > r - t)
            }
            "triangle" => {
                // Apex at top centre, base along the bottom edge.
                let half = w / 2.0;
                let slope_len = (half * half + h * h).sqrt();
                // Signed distances to the two slanted edges and the base.
                let dl = (h * u - half * (h - v)) / slope_len;
                let dr = (h * (w - u) - half * (h - v)) / slope_len;
                let db = h - v;
                let inside = dl >= 0.0 && dr >= 0.0 && db >= 0.0;
                inside && (!self.hollow || dl.min(dr).min(db) < t)
            }
            _ => {
                let edge = u.min(v).min(w - u).min(h - v);
                !self.hollow || edge < t
            }
        }
    }

    fn labels(&self) -> Vec<String> {
        let mut a = vec![
            COLORS[self.color].0.to_string(),
            SIZES[self.large as usize].to_string(),
            FILLS[self.hollow as usize].to_string(),
        ];
        if CLASSES[self.class] == "bar" {
            a.push(ORIENTATIONS[(!self.upright) as usize].to_string());
        }
        a
    }
}

fn sample_shape(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, novel: bool) -> Shape {
    let combos: Vec<(usize, usize)> = (0..CLASSES.len())
        .flat_map(|c| (0..COLORS.len()).map(move |k| (c, k)))
        .filter(|&(c, k)| spec.is_withheld(CLASSES[c], COLORS[k].0) == novel)
        .collect();
    let (class, color) = combos[rng.random_range(0..combos.len())];
    let large = rng.random_bool(0.5);
    let hollow = rng.random_bool(0.5);
    let upright = rng.random_bool(0.5);
    let (lo, hi) = if large { spec.large_px } else { spec.small_px };
    let long = rng.random_range(lo..=hi);
    let (w, h) = match CLASSES[class] {
        "bar" => {
            let short = ((long as f64) * 0.4).round().max(3.0) as usize;
            if upright {
                (short, long)
            } else {
                (long, short)
            }
        }
        _ => (long, long),
    };
    Shape {
        class,
        color,
        large,
        hollow,
        upright,
        w,
        h,
        x: 0,
        y: 0,
    }
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    // One clear pixel between boxes.
    a.x < b.x + b.w + 1 && b.x < a.x + a.w + 1 && a.y < b.y + b.h + 1 && b.y < a.y + a.h + 1
}

fn place(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, heldout: bool) -> Result<Vec<Shape>> {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let kinds: Vec<Shape> = (0..n)
        .map(|_| {
            let novel = heldout && !spec.withheld.is_empty() && rng.random_bool(spec.novel_fraction);
            sample_shape(spec, rng, novel)
        })
        .collect();
    let s = spec.image_size;
    'restart: for _ in 0..100 {
        let mut placed: Vec<Shape> = Vec::with_capacity(n);
        for kind in &kinds {
            let mut ok = false;
            for _ in 0..200 {
                let mut cand = kind.clone();
                cand.x = rng.random_range(1..=s - 1 - cand.w);
                cand.y = rng.random_range(1..=s - 1 - cand.h);
                if placed.iter().all(|p| !overlaps(p, &cand)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'restart;
            }
        }
        return Ok(placed);
    }
    Err(DatasetError::Spec(format!("could not place {n} disjoint objects")))
}

fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, shapes: &[Shape]) -> Image {
    const SS: usize = 4;
    let s = spec.image_size;
    let mut img = Image::filled(s, 3, 0.0);
    for v in img.data.iter_mut() {
        *v = rng.random::<f32>() * spec.background_max;
    }
    for shape in shapes {
        let color = COLORS[shape.color].1;
        for y in shape.y..(shape.y + shape.h).min(s) {
            for x in shape.x..(shape.x + shape.w).min(s) {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        hits += shape.covers(px, py) as usize;
                    }
                }
                let cov = hits as f32 / (SS * SS) as f32;
                for (v, c) in img.pixel_mut(y, x).iter_mut().zip(color) {
                    *v = *v * (1.0 - cov) + c * cov;
                }
            }
        }
    }
    for v in img.data.iter_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
    img
}

fn make_split(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, n: usize, first_id: u64, heldout: bool) -> Result<Vec<ImageRecord>> {
    let size = spec.image_size as f64;
    (0..n)
        .map(|i| {
            let shapes = place(spec, rng, heldout)?;
            let image = render(spec, rng, &shapes);
            let instances = shapes
                .iter()
                .enumerate()
                .map(|(k, sh)| Instance {
                    id: k as u64,
                    bbox: BoxCxcywh::new(
                        (sh.x as f64 + sh.w as f64 / 2.0) / size,
                        (sh.y as f64 + sh.h as f64 / 2.0) / size,
                        sh.w as f64 / size,
                        sh.h as f64 / size,
                    ),
                    class_label: CLASSES[sh.class].to_string(),
                    attributes: sh.labels(),
                })
                .collect();
            Ok(ImageRecord {
                id: first_id + i as u64,
                image,
                instances,
            })
        })
        .collect()
}

/// Renders the training and held-out splits. A pure function of its inputs.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let train = make_split(spec, &mut rng, spec.num_train, 0, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let heldout = make_split(spec, &mut rng, spec.num_heldout, spec.num_train as u64, true)?;
    Ok(SyntheticData { train, heldout })
}
