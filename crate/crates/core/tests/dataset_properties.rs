use std::collections::{BTreeMap, BTreeSet};

use ovattr::dataset::{
    generate_synthetic, load_annotations, save_annotations, AttributeFrequencyTable, FrequencySplit, ImageRecord,
    PixelStorage, SyntheticSpec, COLORS,
};

fn small_spec(n: usize) -> SyntheticSpec {
    SyntheticSpec { num_train: n, num_heldout: n / 2, ..SyntheticSpec::default() }
}

/// Majority palette color among clearly painted pixels inside the box.
fn dominant_color(record: &ImageRecord, k: usize) -> &'static str {
    let img = &record.image;
    let b = record.instances[k].bbox.to_xyxy();
    let s = img.size as f64;
    let (x0, y0) = ((b.x0 * s).round() as usize, (b.y0 * s).round() as usize);
    let (x1, y1) = ((b.x1 * s).round() as usize, (b.y1 * s).round() as usize);
    let mut votes = [0usize; COLORS.len()];
    for y in y0..y1 {
        for x in x0..x1 {
            let px = img.pixel(y, x);
            if px.iter().copied().fold(0.0f32, f32::max) < 0.6 {
                continue;
            }
            let nearest = (0..COLORS.len())
                .min_by(|&a, &c| {
                    let d = |i: usize| COLORS[i].1.iter().zip(px).map(|(p, q)| (p - q).powi(2)).sum::<f32>();
                    d(a).total_cmp(&d(c))
                })
                .unwrap();
            votes[nearest] += 1;
        }
    }
    let best = (0..votes.len()).max_by_key(|&i| votes[i]).unwrap();
    assert!(votes[best] > 0, "no painted pixel in instance {k} of image {}", record.id);
    COLORS[best].0
}

#[test]
fn painted_color_matches_the_color_label() {
    let d = generate_synthetic(&small_spec(150), 7).unwrap();
    let mut n = 0;
    for r in d.train.iter().chain(&d.heldout) {
        for (k, inst) in r.instances.iter().enumerate() {
            let color = dominant_color(r, k);
            assert!(inst.attributes.iter().any(|a| a == color), "image {} instance {k}: painted {color}, labels {:?}", r.id, inst.attributes);
            n += 1;
        }
    }
    assert!(n > 200);
}

#[test]
fn generation_is_a_pure_function_of_spec_and_seed() {
    let a = generate_synthetic(&small_spec(20), 3).unwrap();
    let b = generate_synthetic(&small_spec(20), 3).unwrap();
    let c = generate_synthetic(&small_spec(20), 4).unwrap();
    assert_eq!(a, b);
    let bits = |d: &ovattr::dataset::SyntheticData| -> Vec<u32> {
        d.train.iter().flat_map(|r| r.image.data.iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, c);
}

#[test]
fn withheld_pairs_appear_only_in_the_heldout_split() {
    let spec = small_spec(400);
    let d = generate_synthetic(&spec, 0).unwrap();
    let pairs = |rs: &[ImageRecord]| -> BTreeSet<(String, String)> {
        rs.iter()
            .flat_map(|r| &r.instances)
            .flat_map(|i| i.attributes.iter().map(move |a| (i.class_label.clone(), a.clone())))
            .filter(|(_, a)| COLORS.iter().any(|(c, _)| c == a))
            .collect()
    };
    let withheld: BTreeSet<(String, String)> = spec.withheld.iter().cloned().collect();
    let (train, held) = (pairs(&d.train), pairs(&d.heldout));
    assert!(train.is_disjoint(&withheld));
    assert!(withheld.is_subset(&held), "held-out split misses some withheld pair");

    let attrs = |rs: &[ImageRecord]| -> BTreeSet<String> {
        rs.iter().flat_map(|r| &r.instances).flat_map(|i| i.attributes.clone()).collect()
    };
    assert_eq!(attrs(&d.train), attrs(&d.heldout));
}

#[test]
fn annotations_round_trip_inline_and_as_files() {
    let d = generate_synthetic(&small_spec(6), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inline = dir.path().join("inline.json");
    save_annotations(&inline, &d.train, &PixelStorage::Inline).unwrap();
    assert_eq!(load_annotations(&inline, 64).unwrap(), d.train);

    let files = dir.path().join("files.json");
    save_annotations(&files, &d.train, &PixelStorage::Files("images".into())).unwrap();
    let loaded = load_annotations(&files, 64).unwrap();
    assert_eq!(loaded, d.train);
    assert!(dir.path().join("images").read_dir().unwrap().count() >= d.train.len());

    let again = dir.path().join("again.json");
    save_annotations(&again, &loaded, &PixelStorage::Inline).unwrap();
    assert_eq!(std::fs::read(&inline).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn images_are_resized_on_load() {
    let d = generate_synthetic(&small_spec(2), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.json");
    save_annotations(&p, &d.train, &PixelStorage::Inline).unwrap();
    let small = load_annotations(&p, 32).unwrap();
    assert!(small.iter().all(|r| r.image.size == 32));
    assert_eq!(small[0].instances, d.train[0].instances);
}

#[test]
fn frequency_split_matches_a_hand_ranking() {
    // Ranking: red 9, blue 7, large 7, solid 4, hollow 2, cyan 1.
    let counts: BTreeMap<String, usize> = [("red", 9), ("blue", 7), ("large", 7), ("solid", 4), ("hollow", 2), ("cyan", 1)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    let t = AttributeFrequencyTable::from_counts(counts, 2.0 / 3.0, 1.0 / 3.0);
    let want = [
        ("red", FrequencySplit::Head),
        ("blue", FrequencySplit::Head),
        ("large", FrequencySplit::Medium),
        ("solid", FrequencySplit::Medium),
        ("hollow", FrequencySplit::Tail),
        ("cyan", FrequencySplit::Tail),
    ];
    for (a, s) in want {
        assert_eq!(t.split_of(a), Some(s), "{a}");
    }
}

#[test]
fn synthetic_frequency_splits_partition_the_attributes() {
    let d = generate_synthetic(&small_spec(100), 2).unwrap();
    let t = AttributeFrequencyTable::from_records(&d.train, 2.0 / 3.0, 1.0 / 3.0);
    let mut all: Vec<&str> = Vec::new();
    for s in [FrequencySplit::Head, FrequencySplit::Medium, FrequencySplit::Tail] {
        let m = t.members(s);
        assert!(!m.is_empty());
        all.extend(m);
    }
    all.sort_unstable();
    let keys: Vec<&str> = t.counts.keys().map(String::as_str).collect();
    assert_eq!(all, keys);
    // Every head attribute is at least as frequent as every tail attribute.
    let min_head = t.members(FrequencySplit::Head).iter().map(|a| t.counts[*a]).min().unwrap();
    let max_tail = t.members(FrequencySplit::Tail).iter().map(|a| t.counts[*a]).max().unwrap();
    assert!(min_head >= max_tail);
}
