//! Sampler fixture and the collision oracle shared by the curriculum tests.

use std::collections::BTreeSet;

use ovattr::dataset::{generate_synthetic, ImageRecord, SyntheticSpec};
use ovattr::querygen::{
    parse_antonyms, LabelCandidateSet, Provenance, Query, QueryBuilder, Templates, WordOrder, DEFAULT_ANTONYMS,
};

pub struct Fixture {
    pub records: Vec<ImageRecord>,
    pub candidates: LabelCandidateSet,
    pub builder: QueryBuilder,
}

pub fn fixture(num_train: usize, seed: u64) -> Fixture {
    let spec = SyntheticSpec {
        num_train,
        num_heldout: 1,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec, seed).unwrap().train;
    let candidates = LabelCandidateSet::from_records(&records, parse_antonyms(DEFAULT_ANTONYMS).unwrap());
    let templates = Templates::builtin();
    let builder = QueryBuilder::new(candidates.vocabulary(&templates), templates);
    Fixture {
        records,
        candidates,
        builder,
    }
}

/// Does `q` describe at least one instance of `rec`?
pub fn describes_some_instance(rec: &ImageRecord, q: &Query, fx: &Fixture) -> bool {
    rec.instances.iter().any(|i| match q.provenance {
        Provenance::Class => i.class_label == q.label,
        Provenance::Attribute => i.attributes.contains(&q.label),
        Provenance::Composite => {
            let (a, c) = split_composite(&q.label, q.order, fx).expect("well-formed composite");
            i.class_label == c && i.attributes.iter().any(|x| *x == a)
        }
    })
}

/// The unique (attribute, class) decomposition of a composite label.
pub fn split_composite(label: &str, order: WordOrder, fx: &Fixture) -> Option<(String, String)> {
    let mut found = Vec::new();
    for a in &fx.candidates.attributes {
        for c in &fx.candidates.classes {
            let l = match order {
                WordOrder::ObjThenAttr => format!("{c} {a}"),
                _ => format!("{a} {c}"),
            };
            if l == label {
                found.push((a.clone(), c.clone()));
            }
        }
    }
    (found.len() == 1).then(|| found.pop().unwrap())
}

/// Checks one sampled label space against the image it was drawn for:
/// labels are distinct, negatives describe no instance, and each positive
/// describes every instance it claims.
pub fn check_collisions(rec: &ImageRecord, qs: &[Query], fx: &Fixture) -> Result<(), String> {
    let labels: Vec<&str> = qs.iter().map(|q| q.label.as_str()).collect();
    let distinct: BTreeSet<&str> = labels.iter().copied().collect();
    if distinct.len() != labels.len() {
        return Err(format!("duplicate label in {labels:?}"));
    }
    for q in qs {
        if q.is_negative() {
            if describes_some_instance(rec, q, fx) {
                return Err(format!("negative `{}` describes image {}", q.label, rec.id));
            }
            continue;
        }
        for id in &q.positive_for {
            let inst = rec.instances.iter().find(|i| i.id == *id).ok_or("unknown instance id")?;
            let single = ImageRecord {
                id: rec.id,
                image: rec.image.clone(),
                instances: vec![inst.clone()],
            };
            if !describes_some_instance(&single, q, fx) {
                return Err(format!("positive `{}` misses instance {id}", q.label));
            }
        }
    }
    Ok(())
}
