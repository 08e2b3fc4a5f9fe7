//! Annotated images: the JSON annotation schema, PPM image files, the
//! synthetic shapes generator and attribute frequency strata.
//!
//! Annotation files look like
//!
//! ```json
//! {"images": [{"id": 0, "file": "img/0.ppm",
//!              "instances": [{"id": 0, "bbox": [0.5, 0.5, 0.2, 0.2],
//!                             "class": "square", "attributes": ["red"]}]}]}
//! ```
//!
//! where `bbox` is a normalized `[cx, cy, w, h]` box and an image carries
//! either a `file` (binary PPM, relative to the annotation file) or inline
//! `pixels` as an `H×W×C` nested array of values in `[0, 1]`.

mod frequency;
mod ppm;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::geometry::{BoxCxcywh, GeometryError};
use crate::image::Image;

pub use frequency::{AttributeFrequencyTable, FrequencySplit};
pub use ppm::{read_ppm, write_ppm};
pub use synthetic::{
    attribute_category, generate_synthetic, SyntheticData, SyntheticSpec, CLASSES, COLORS,
    ORIENTATIONS,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image record {record}: field `{field}`: {msg}")]
    Schema { record: String, field: String, msg: String },
    #[error("image {image}, instance {instance}: {source}")]
    BadBox {
        image: u64,
        instance: u64,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {msg}")]
    Ppm { path: PathBuf, msg: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub bbox: BoxCxcywh,
    pub class_label: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub image: Image,
    pub instances: Vec<Instance>,
}

impl ImageRecord {
    /// Distinct class labels, sorted.
    pub fn classes(&self) -> BTreeSet<&str> {
        self.instances.iter().map(|i| i.class_label.as_str()).collect()
    }

    /// Distinct attribute labels over all instances, sorted.
    pub fn attributes(&self) -> BTreeSet<&str> {
        self.instances
            .iter()
            .flat_map(|i| i.attributes.iter().map(String::as_str))
            .collect()
    }
}

/// Where [`save_annotations`] puts pixel data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PixelStorage {
    /// Nested arrays inside the JSON file.
    Inline,
    /// One PPM per image in this directory, relative to the JSON file.
    Files(PathBuf),
}

fn schema(record: impl ToString, field: &str, msg: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        record: record.to_string(),
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn dedup_keep_order(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|a| seen.insert(a.clone())).collect()
}

fn parse_pixels(record: u64, v: &Value) -> Result<Image> {
    let err = |msg: &str| schema(record, "pixels", msg);
    let rows = v.as_array().ok_or_else(|| err("expected an H×W×C array"))?;
    let h = rows.len();
    let mut data = Vec::new();
    let mut channels = None;
    for row in rows {
        let cols = row.as_array().ok_or_else(|| err("row is not an array"))?;
        if cols.len() != h {
            return Err(err("image must be square"));
        }
        for px in cols {
            let px = px.as_array().ok_or_else(|| err("pixel is not an array"))?;
            if *channels.get_or_insert(px.len()) != px.len() || px.is_empty() {
                return Err(err("inconsistent channel count"));
            }
            for c in px {
                let c = c.as_f64().ok_or_else(|| err("pixel value is not a number"))?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(err("pixel value outside [0, 1]"));
                }
                data.push(c as f32);
            }
        }
    }
    let channels = channels.ok_or_else(|| err("empty image"))?;
    Image::new(h, channels, data).ok_or_else(|| err("inconsistent dimensions"))
}

fn parse_instance(record: u64, v: &Value) -> Result<Instance> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(record, "instances", "entry is not an object"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema(record, "instances[].id", "missing or not a non-negative integer"))?;
    let field = |f: &str| format!("instances[{id}].{f}");
    let bbox: Vec<f64> = obj
        .get("bbox")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .filter(|b: &Vec<f64>| b.len() == 4)
        .ok_or_else(|| schema(record, &field("bbox"), "expected four numbers [cx, cy, w, h]"))?;
    let bbox = BoxCxcywh::validated(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(|source| {
        DatasetError::BadBox {
            image: record,
            instance: id,
            source,
        }
    })?;
    let class_label = obj
        .get("class")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| schema(record, &field("class"), "missing or empty"))?
        .to_string();
    let attributes = match obj.get("attributes") {
        None => Vec::new(),
        Some(a) => a
            .as_array()
            .and_then(|a| a.iter().map(|s| s.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| schema(record, &field("attributes"), "expected an array of strings"))?,
    };
    Ok(Instance {
        id,
        bbox,
        class_label,
        attributes: dedup_keep_order(attributes),
    })
}

/// Loads and validates an annotation file, resizing every image to
/// `image_size` with nearest-neighbour sampling.
pub fn load_annotations(path: &Path, image_size: usize) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let images = root
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("<root>", "images", "missing or not an array"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(images.len());
    for (pos, rec) in images.iter().enumerate() {
        let id = rec
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| schema(format!("#{pos}"), "id", "missing or not a non-negative integer"))?;
        let image = match (rec.get("file"), rec.get("pixels")) {
            (Some(f), None) => {
                let f = f.as_str().ok_or_else(|| schema(id, "file", "not a string"))?;
                read_ppm(&base.join(f))?
            }
            (None, Some(p)) => parse_pixels(id, p)?,
            _ => return Err(schema(id, "file|pixels", "exactly one of `file` or `pixels` is required")),
        };
        let instances = rec
            .get("instances")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(id, "instances", "missing or not an array"))?
            .iter()
            .map(|v| parse_instance(id, v))
            .collect::<Result<Vec<_>>>()?;
        let mut ids = BTreeSet::new();
        if let Some(dup) = instances.iter().find(|i| !ids.insert(i.id)) {
            return Err(schema(id, "instances[].id", format!("duplicate instance id {}", dup.id)));
        }
        out.push(ImageRecord {
            id,
            image: image.resized(image_size),
            instances,
        });
    }
    Ok(out)
}

/// Writes an annotation file that [`load_annotations`] reads back unchanged.
pub fn save_annotations(path: &Path, records: &[ImageRecord], storage: &PixelStorage) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DatasetError::Io { path: p, source }
    };
    let mut images = Vec::with_capacity(records.len());
    for rec in records {
        let mut obj = Map::new();
        obj.insert("id".into(), json!(rec.id));
        match storage {
            PixelStorage::Inline => {
                let img = &rec.image;
                let rows: Vec<Value> = (0..img.size)
                    .map(|y| Value::Array((0..img.size).map(|x| json!(img.pixel(y, x))).collect()))
                    .collect();
                obj.insert("pixels".into(), Value::Array(rows));
            }
            PixelStorage::Files(dir) => {
                let rel = dir.join(format!("{}.ppm", rec.id));
                let full = base.join(&rel);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(io(parent))?;
                }
                write_ppm(&full, &rec.image)?;
                obj.insert("file".into(), json!(rel.to_string_lossy().replace('\\', "/")));
            }
        }
        let instances: Vec<Value> = rec
            .instances
            .iter()
            .map(|i| {
                json!({
                    "id": i.id,
                    "bbox": i.bbox.to_array(),
                    "class": i.class_label,
                    "attributes": i.attributes,
                })
            })
            .collect();
        obj.insert("instances".into(), Value::Array(instances));
        images.push(Value::Object(obj));
    }
    let text = serde_json::to_string_pretty(&json!({ "images": images })).expect("values serialize");
    fs::write(path, text + "\n").map_err(io(path))
}
