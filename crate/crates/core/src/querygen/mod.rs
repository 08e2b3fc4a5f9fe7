//! Text queries for the three curriculum phases.
//!
//! Each phase turns an annotated image into a per-image label space:
//! positive queries that name something in the image and negatives that
//! provably do not.

mod samplers;
mod text;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;

pub use samplers::{composite_label, sample_step_a, sample_step_f, sample_step_o, QueryBuilder, COMPOSITE_PREFIX};
pub use text::{apply_template, normalize, Templates, Vocabulary, DEFAULT_TEMPLATES, PAD, UNK};

pub const DEFAULT_ANTONYMS: &str = include_str!("../../resources/antonyms.tsv");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error("text {0:?} has no words")]
    EmptyText(String),
    #[error("template line {line}: {msg}")]
    Template { line: usize, msg: String },
    #[error("antonym line {line}: {msg}")]
    Antonyms { line: usize, msg: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("image {0} has no instances")]
    NoInstances(u64),
}

pub type Result<T> = std::result::Result<T, QueryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Class,
    Attribute,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    None,
    AttrThenObj,
    ObjThenAttr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    /// Prompt fed to the text tower.
    pub text: String,
    /// Bare label before templating.
    pub label: String,
    pub token_ids: Vec<usize>,
    pub provenance: Provenance,
    pub order: WordOrder,
    /// Instance ids this query describes; empty for negatives.
    pub positive_for: BTreeSet<u64>,
}

impl Query {
    pub fn is_negative(&self) -> bool {
        self.positive_for.is_empty()
    }
}

/// Class and attribute vocabularies plus contrastive attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelCandidateSet {
    pub classes: BTreeSet<String>,
    pub attributes: BTreeSet<String>,
    pub antonym_map: BTreeMap<String, BTreeSet<String>>,
}

impl LabelCandidateSet {
    /// Collects every class and attribute label used in `records`.
    pub fn from_records(records: &[ImageRecord], antonym_map: BTreeMap<String, BTreeSet<String>>) -> Self {
        let mut s = Self {
            antonym_map,
            ..Self::default()
        };
        for inst in records.iter().flat_map(|r| &r.instances) {
            s.classes.insert(inst.class_label.clone());
            s.attributes.extend(inst.attributes.iter().cloned());
        }
        s
    }

    /// Every text a query can be built from: labels, templates and the
    /// composite prefix. Feed to [`Vocabulary::from_texts`].
    pub fn vocabulary(&self, templates: &Templates) -> Vocabulary {
        let antonyms = self.antonym_map.values().flatten();
        Vocabulary::from_texts(
            self.classes
                .iter()
                .chain(&self.attributes)
                .chain(antonyms)
                .map(String::as_str)
                .chain(templates.as_slice().iter().map(String::as_str))
                .chain([COMPOSITE_PREFIX]),
        )
    }
}

/// Parses `attribute<TAB>a,b,c` lines.
pub fn parse_antonyms(text: &str) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| QueryError::Antonyms {
            line: no + 1,
            msg: msg.to_string(),
        };
        let (attr, list) = line.split_once('\t').ok_or_else(|| err("expected attribute<TAB>antonyms"))?;
        let attr = attr.trim();
        if attr.is_empty() {
            return Err(err("empty attribute"));
        }
        let set: BTreeSet<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if set.contains(attr) {
            return Err(err("an attribute cannot be its own antonym"));
        }
        map.entry(attr.to_string()).or_default().extend(set);
    }
    Ok(map)
}
