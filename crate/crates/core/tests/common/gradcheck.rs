//! End-to-end gradient check of the matching loss through both towers.

use std::collections::BTreeSet;

use ovattr::dataset::{ImageRecord, Instance};
use ovattr::geometry::BoxCxcywh;
use ovattr::image::Image;
use ovattr::losses::LossConfig;
use ovattr::model::{Model, ModelConfig};
use ovattr::querygen::{Provenance, Query, WordOrder};
use ovattr::trainer::{batch_gradients, BatchItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn query(tokens: &[usize], positive_for: &[u64]) -> Query {
    Query {
        text: format!("{tokens:?}"),
        label: format!("{tokens:?}"),
        token_ids: tokens.to_vec(),
        provenance: Provenance::Class,
        order: WordOrder::None,
        positive_for: positive_for.iter().copied().collect::<BTreeSet<_>>(),
    }
}

fn record(rng: &mut ChaCha8Rng, id: u64, boxes: &[[f64; 4]]) -> ImageRecord {
    let data = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
    ImageRecord {
        id,
        image: Image::new(16, 3, data).unwrap(),
        instances: boxes
            .iter()
            .enumerate()
            .map(|(k, b)| Instance {
                id: id * 10 + k as u64,
                bbox: BoxCxcywh::new(b[0], b[1], b[2], b[3]),
                class_label: "c".into(),
                attributes: vec![],
            })
            .collect(),
    }
}

/// Largest norm-wise relative error between the tape gradient of the
/// batch matching loss and central differences, over every parameter of a
/// perturbed micro model. Errors if a perturbation flips the matching.
pub fn matching_loss_gradient_error() -> Result<(f64, String), String> {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::new(cfg, 5).unwrap();
    // Larger weights than the default init give gradients well above noise.
    for v in model.params.values_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let r0 = record(&mut rng, 1, &[[0.3, 0.3, 0.3, 0.4], [0.7, 0.6, 0.2, 0.3]]);
    let r1 = record(&mut rng, 2, &[[0.5, 0.4, 0.5, 0.3]]);
    let batch = vec![
        BatchItem {
            record: &r0,
            queries: vec![query(&[2, 3, 4], &[10]), query(&[5, 6], &[11]), query(&[2, 7], &[])],
        },
        BatchItem {
            record: &r1,
            queries: vec![query(&[8, 9, 10, 11], &[20]), query(&[5, 6], &[])],
        },
    ];
    let loss_cfg = LossConfig::default();
    let (outcome, grads) = batch_gradients(&model, &batch, &loss_cfg).unwrap();
    let pairs = |a: &[ovattr::matching::Assignment]| a.iter().map(|x| x.pairs.clone()).collect::<Vec<_>>();
    let base = pairs(&outcome.assignments);

    let h = 1e-5;
    let mut flipped = false;
    let names: Vec<String> = model.params.names().to_vec();
    let mut worst: (f64, String) = (0.0, String::new());
    for (i, name) in names.iter().enumerate() {
        let analytic = grads[i].clone().ok_or_else(|| format!("{name} receives no gradient"))?;
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for k in 0..n {
            let orig = model.params.values()[i].data()[k];
            let mut eval = |v: f64| {
                model.params.values_mut()[i].data_mut()[k] = v;
                let (o, _) = batch_gradients(&model, &batch, &loss_cfg).unwrap();
                if pairs(&o.assignments) != base {
                    flipped = true;
                }
                o.record.total
            };
            numeric[k] = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            model.params.values_mut()[i].data_mut()[k] = orig;
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = diff / norm.max(1e-6);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    if flipped {
        return Err("a finite-difference probe changed the matching".into());
    }
    Ok(worst)
}
