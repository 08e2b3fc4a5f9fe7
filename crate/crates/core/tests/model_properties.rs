use ovattr::image::Image;
use ovattr::model::{Model, ModelConfig};
use ovattr::tensor::{Array, Graph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(cfg: &ModelConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Image::new(cfg.image_size, cfg.channels, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Copies patch `a` of `src` into patch `b` of `dst`.
fn move_patch(cfg: &ModelConfig, src: &Image, dst: &mut Image, a: usize, b: usize) {
    let (g, ps) = (cfg.image_size / cfg.patch_size, cfg.patch_size);
    for dy in 0..ps {
        for dx in 0..ps {
            let (ya, xa) = ((a / g) * ps + dy, (a % g) * ps + dx);
            let (yb, xb) = ((b / g) * ps + dy, (b % g) * ps + dx);
            let px = src.pixel(ya, xa).to_vec();
            dst.pixel_mut(yb, xb).copy_from_slice(&px);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn proposal_count_follows_patch_grid() {
    let cfg = ModelConfig { image_size: 32, ..ModelConfig::default() };
    assert_eq!(cfg.num_proposals(), 16);
    assert_eq!(ModelConfig::full_scale_reference().num_proposals(), 3600);
    assert_eq!(ModelConfig::default().num_proposals(), 64);
}

#[test]
fn patch_permutation_is_equivariant_without_position_embeddings() {
    let cfg = ModelConfig { image_size: 32, embed_dim: 16, mlp_hidden: 32, proj_dim: 8, ..ModelConfig::default() };
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    let pos = model.params.get_mut("image.pos").unwrap();
    pos.data_mut().iter_mut().for_each(|v| *v = 0.0);

    let img = noise_image(&cfg, 9);
    let np = cfg.num_proposals();
    // A fixed derangement of the patches.
    let perm: Vec<usize> = (0..np).map(|i| (i * 5 + 3) % np).collect();
    let mut shuffled = img.clone();
    for (from, &to) in perm.iter().enumerate() {
        move_patch(&cfg, &img, &mut shuffled, from, to);
    }

    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let a = model.encode_image(&p, &img).unwrap().value();
    let b = model.encode_image(&p, &shuffled).unwrap().value();
    for (from, &to) in perm.iter().enumerate() {
        for (x, y) in a.row(from).iter().zip(b.row(to)) {
            assert!((x - y).abs() < 1e-9, "patch {from} -> {to}: {x} vs {y}");
        }
    }
}

#[test]
fn position_embeddings_break_the_symmetry() {
    let cfg = ModelConfig { image_size: 32, ..ModelConfig::default() };
    let model = Model::new(cfg.clone(), 4).unwrap();
    let img = Image::filled(32, 3, 0.5);
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let e = model.encode_image(&p, &img).unwrap().value();
    assert_ne!(e.row(0), e.row(1));
}

#[test]
fn logits_match_hand_computed_scaled_cosines() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let emb = model.encode_image(&p, &noise_image(&cfg, 1)).unwrap();
    let q = model.encode_texts(&p, &[vec![1, 2, 3], vec![4, 5], vec![1, 2, 3]]).unwrap();
    let out = model.predict(&p, &emb, &q).unwrap();

    let vis = out.visual_embeddings.value();
    let qv = q.value();
    let logits = out.logits.value();
    let scale = model.logit_scale();
    assert!((scale - 1.0 / 0.07).abs() < 1e-9);
    for i in 0..cfg.num_proposals() {
        assert!((dot(vis.row(i), vis.row(i)).sqrt() - 1.0).abs() < 1e-6);
        for j in 0..3 {
            let want = scale * dot(vis.row(i), qv.row(j));
            assert!((logits.get2(i, j) - want).abs() < 1e-9);
        }
        // Duplicated query, duplicated column.
        assert_eq!(logits.get2(i, 0), logits.get2(i, 2));
    }
    let boxes = out.boxes.value();
    assert_eq!(boxes.shape(), &[cfg.num_proposals(), 4]);
    assert!(boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn disjoint_token_strings_are_not_parallel_at_init() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let e = model.encode_texts(&p, &[vec![1, 2, 3], vec![7, 8, 9, 10]]).unwrap().value();
    assert!(dot(e.row(0), e.row(1)) < 1.0 - 1e-6);
}

#[test]
fn equal_seeds_give_identical_outputs() {
    let cfg = ModelConfig::micro();
    let run = || {
        let m = Model::new(cfg.clone(), 21).unwrap();
        let g = Graph::new();
        let p = m.params.bind(&g, false);
        let emb = m.encode_image(&p, &noise_image(&cfg, 2)).unwrap();
        let q = m.encode_texts(&p, &[vec![1, 2]]).unwrap();
        let out = m.predict(&p, &emb, &q).unwrap();
        (out.boxes.value(), out.logits.value())
    };
    let (a, b) = (run(), run());
    let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn query_embeddings_have_unit_norm(
        seqs in prop::collection::vec(prop::collection::vec(0usize..64, 1..=16), 1..6),
        seed in 0u64..1000,
    ) {
        let model = Model::new(ModelConfig::default(), seed).unwrap();
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let e = model.encode_texts(&p, &seqs).unwrap().value();
        for r in 0..seqs.len() {
            prop_assert!((dot(e.row(r), e.row(r)).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_text_encoding_matches_single(seqs in prop::collection::vec(prop::collection::vec(0usize..12, 1..=6), 2..5)) {
        let model = Model::new(ModelConfig::micro(), 3).unwrap();
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let batch = model.encode_texts(&p, &seqs).unwrap().value();
        for (i, s) in seqs.iter().enumerate() {
            let one = model.encode_text(&p, s).unwrap().value();
            for (x, y) in one.row(0).iter().zip(batch.row(i)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
