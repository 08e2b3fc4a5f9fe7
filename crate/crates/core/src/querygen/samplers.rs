//! Step O, A and F query samplers.
//!
//! "Non-overlapping" is read image-globally: a negative never repeats any
//! positive label of any instance in the image.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;

use super::{LabelCandidateSet, Provenance, Query, QueryError, Result, Templates, Vocabulary, WordOrder};
use crate::dataset::ImageRecord;

/// Fixed prompt prefix for composite queries; templates are not used there
/// because they would stack a second adjective-bearing phrase on top.
pub const COMPOSITE_PREFIX: &str = "a photo of";

pub fn composite_label(attribute: &str, class: &str, order: WordOrder) -> String {
    match order {
        WordOrder::ObjThenAttr => format!("{class} {attribute}"),
        _ => format!("{attribute} {class}"),
    }
}

/// Turns labels into tokenized queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBuilder {
    pub vocab: Vocabulary,
    pub templates: Templates,
}

impl QueryBuilder {
    pub fn new(vocab: Vocabulary, templates: Templates) -> Self {
        Self { vocab, templates }
    }

    fn build(
        &self,
        label: &str,
        text: String,
        provenance: Provenance,
        order: WordOrder,
        positive_for: BTreeSet<u64>,
    ) -> Result<Query> {
        Ok(Query {
            token_ids: self.vocab.tokenize(&text)?,
            text,
            label: label.to_string(),
            provenance,
            order,
            positive_for,
        })
    }

    /// A class or attribute query through a randomly drawn template.
    pub fn templated<R: Rng + ?Sized>(
        &self,
        label: &str,
        provenance: Provenance,
        positive_for: BTreeSet<u64>,
        rng: &mut R,
    ) -> Result<Query> {
        let text = self.templates.apply(label, rng);
        self.build(label, text, provenance, WordOrder::None, positive_for)
    }

    /// A class or attribute query through the first template, as used at
    /// inference time.
    pub fn plain(&self, label: &str, provenance: Provenance) -> Result<Query> {
        let text = self.templates.fill(0, label);
        self.build(label, text, provenance, WordOrder::None, BTreeSet::new())
    }

    /// A composite query, `"a photo of <composite>"`.
    pub fn composite(
        &self,
        attribute: &str,
        class: &str,
        order: WordOrder,
        positive_for: BTreeSet<u64>,
    ) -> Result<Query> {
        let label = composite_label(attribute, class, order);
        let text = format!("{COMPOSITE_PREFIX} {label}");
        self.build(&label, text, Provenance::Composite, order, positive_for)
    }

    /// Free text behind the composite prefix, matching the Step F prompts.
    pub fn free_text(&self, text: &str) -> Result<Query> {
        if super::normalize(text).is_empty() {
            return Err(QueryError::EmptyText(text.to_string()));
        }
        let prompt = format!("{COMPOSITE_PREFIX} {}", text.trim());
        self.build(text, prompt, Provenance::Composite, WordOrder::None, BTreeSet::new())
    }
}

fn check_image(image: &ImageRecord) -> Result<()> {
    if image.instances.is_empty() {
        return Err(QueryError::NoInstances(image.id));
    }
    Ok(())
}

/// Draws up to `n` items without replacement, warning when the pool is short.
fn draw<'a, R: Rng + ?Sized>(pool: &[&'a str], n: usize, what: &str, image: u64, rng: &mut R) -> Vec<&'a str> {
    if pool.len() < n {
        log::warn!(
            "image {image}: only {} eligible {what} negatives, {n} requested",
            pool.len()
        );
    }
    let k = n.min(pool.len());
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// One templated positive per distinct class, then up to `n_neg` class
/// negatives drawn from classes absent from the image.
pub fn sample_step_o<R: Rng + ?Sized>(
    image: &ImageRecord,
    candidates: &LabelCandidateSet,
    n_neg: usize,
    builder: &QueryBuilder,
    rng: &mut R,
) -> Result<Vec<Query>> {
    check_image(image)?;
    let mut by_class: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for inst in &image.instances {
        by_class.entry(&inst.class_label).or_default().insert(inst.id);
    }
    let mut out = Vec::new();
    for (class, ids) in &by_class {
        out.push(builder.templated(class, Provenance::Class, ids.clone(), rng)?);
    }
    let pool: Vec<&str> = candidates
        .classes
        .iter()
        .map(String::as_str)
        .filter(|c| !by_class.contains_key(c))
        .collect();
    for c in draw(&pool, n_neg, "class", image.id, rng) {
        out.push(builder.templated(c, Provenance::Class, BTreeSet::new(), rng)?);
    }
    Ok(out)
}

/// Class and attribute labels of every instance as multi-label positives,
/// negatives from the merged class and attribute pool.
pub fn sample_step_a<R: Rng + ?Sized>(
    image: &ImageRecord,
    candidates: &LabelCandidateSet,
    n_neg: usize,
    builder: &QueryBuilder,
    rng: &mut R,
) -> Result<Vec<Query>> {
    check_image(image)?;
    // Identical labels from different instances share one query so that no
    // two columns of the label space carry the same text.
    let mut positives: BTreeMap<(Provenance, &str), BTreeSet<u64>> = BTreeMap::new();
    for inst in &image.instances {
        positives
            .entry((Provenance::Class, &inst.class_label))
            .or_default()
            .insert(inst.id);
        for a in &inst.attributes {
            positives.entry((Provenance::Attribute, a)).or_default().insert(inst.id);
        }
    }
    let mut out = Vec::new();
    for ((prov, label), ids) in &positives {
        out.push(builder.templated(label, *prov, ids.clone(), rng)?);
    }
    let taken: BTreeSet<&str> = positives.keys().map(|(_, l)| *l).collect();
    let pool: Vec<(Provenance, &str)> = candidates
        .classes
        .iter()
        .map(|c| (Provenance::Class, c.as_str()))
        .chain(candidates.attributes.iter().map(|a| (Provenance::Attribute, a.as_str())))
        .filter(|(_, l)| !taken.contains(l))
        .collect();
    if pool.len() < n_neg {
        log::warn!(
            "image {}: only {} eligible label negatives, {n_neg} requested",
            image.id,
            pool.len()
        );
    }
    for i in sample(rng, pool.len(), n_neg.min(pool.len())) {
        let (prov, label) = pool[i];
        out.push(builder.templated(label, prov, BTreeSet::new(), rng)?);
    }
    Ok(out)
}

/// One composite positive per instance (one attribute, one class, random
/// word order); negatives copy a positive and swap exactly one side for a
/// label foreign to the image, antonyms first.
pub fn sample_step_f<R: Rng + ?Sized>(
    image: &ImageRecord,
    candidates: &LabelCandidateSet,
    n_neg: usize,
    builder: &QueryBuilder,
    rng: &mut R,
) -> Result<Vec<Query>> {
    check_image(image)?;
    let image_classes = image.classes();
    let image_attrs = image.attributes();
    let mut out = Vec::new();
    // (attribute, class, order) of composite positives, deduplicated on the
    // unordered pair.
    let mut composites: Vec<(&str, &str, WordOrder)> = Vec::new();
    let mut class_only: BTreeSet<&str> = BTreeSet::new();
    for inst in &image.instances {
        if inst.attributes.is_empty() {
            class_only.insert(&inst.class_label);
            continue;
        }
        let attr = inst.attributes[rng.random_range(0..inst.attributes.len())].as_str();
        let order = if rng.random_bool(0.5) {
            WordOrder::AttrThenObj
        } else {
            WordOrder::ObjThenAttr
        };
        let class = inst.class_label.as_str();
        if !composites.iter().any(|&(a, c, _)| a == attr && c == class) {
            composites.push((attr, class, order));
        }
    }
    // A composite describes every instance carrying both of its labels.
    let holders = |attr: &str, class: &str| -> BTreeSet<u64> {
        image
            .instances
            .iter()
            .filter(|i| i.class_label == class && i.attributes.iter().any(|a| a == attr))
            .map(|i| i.id)
            .collect()
    };
    for &(a, c, order) in &composites {
        out.push(builder.composite(a, c, order, holders(a, c))?);
    }
    for c in &class_only {
        let ids = image
            .instances
            .iter()
            .filter(|i| i.class_label == *c)
            .map(|i| i.id)
            .collect();
        out.push(builder.templated(c, Provenance::Class, ids, rng)?);
    }

    let class_pool: Vec<&str> = candidates
        .classes
        .iter()
        .map(String::as_str)
        .filter(|c| !image_classes.contains(c))
        .collect();
    if composites.is_empty() {
        for c in draw(&class_pool, n_neg, "class", image.id, rng) {
            out.push(builder.templated(c, Provenance::Class, BTreeSet::new(), rng)?);
        }
        return Ok(out);
    }
    let attr_pool: Vec<&str> = candidates
        .attributes
        .iter()
        .map(String::as_str)
        .filter(|a| !image_attrs.contains(a))
        .collect();

    let mut used: BTreeSet<(String, String)> = BTreeSet::new();
    let mut made = 0;
    let mut attempts = 0;
    while made < n_neg && attempts < 20 * n_neg.max(1) {
        attempts += 1;
        let (attr, class, order) = composites[rng.random_range(0..composites.len())];
        let replace_class = rng.random_bool(0.5);
        let fresh_classes: Vec<&str> = class_pool
            .iter()
            .copied()
            .filter(|c| !used.contains(&(attr.to_string(), c.to_string())))
            .collect();
        let antonyms: Vec<&str> = candidates
            .antonym_map
            .get(attr)
            .into_iter()
            .flatten()
            .map(String::as_str)
            .filter(|a| !image_attrs.contains(a) && !used.contains(&(a.to_string(), class.to_string())))
            .collect();
        let fresh_attrs: Vec<&str> = if antonyms.is_empty() {
            attr_pool
                .iter()
                .copied()
                .filter(|a| !used.contains(&(a.to_string(), class.to_string())))
                .collect()
        } else {
            antonyms
        };
        let (new_attr, new_class) = match (replace_class, fresh_classes.is_empty(), fresh_attrs.is_empty()) {
            (_, true, true) => continue,
            (true, false, _) | (false, false, true) => {
                (attr, fresh_classes[rng.random_range(0..fresh_classes.len())])
            }
            _ => (fresh_attrs[rng.random_range(0..fresh_attrs.len())], class),
        };
        used.insert((new_attr.to_string(), new_class.to_string()));
        out.push(builder.composite(new_attr, new_class, order, BTreeSet::new())?);
        made += 1;
    }
    if made < n_neg {
        log::warn!("image {}: built {made} of {n_neg} composite negatives", image.id);
    }
    Ok(out)
}
