//! Criteria that need no trained model.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ovattr::dataset::{generate_synthetic, SyntheticSpec};
use ovattr::losses::{focal_loss, giou_box_loss, l1_box_loss};
use ovattr::matching::{hungarian_assign, CostMatrix};
use ovattr::model::{Model, ModelConfig};
use ovattr::querygen::{sample_step_a, sample_step_f, sample_step_o, Provenance, WordOrder};
use ovattr::tensor::{numeric_gradient, Array, Graph, Tensor};
use ovattr::trainer::{run_schedule, Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{gradcheck, metric_cases, sampling};
use crate::{within, Outcome};

/// Minimum over all ways of pairing `min(rows, cols)` rows with distinct
/// columns, summed in ascending row order.
fn exhaustive_min(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, row: usize, left: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if c.rows - row < left {
            return;
        }
        for j in 0..c.cols {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, left - 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
        go(c, row + 1, left, used, acc, best);
    }
    let mut best = f64::INFINITY;
    go(c, 0, c.rows.min(c.cols), &mut vec![false; c.cols], 0.0, &mut best);
    best
}

pub fn matcher_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let integer = rng.random_bool(0.5);
        let rows: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| if integer { rng.random_range(0..6) as f64 } else { rng.random_range(-5.0..10.0) })
                    .collect()
            })
            .collect();
        let m = CostMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let got = hungarian_assign(&m).total_cost;
        let want = exhaustive_min(&m);
        if got != want {
            return Err(format!("case {case} ({r}x{c}): hungarian {got} vs exhaustive {want}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "1000 matchings")?;
    Ok("1000/1000 exact".into())
}

type Scalar = for<'g> fn(&'g Graph, Tensor<'g>, &Array) -> ovattr::losses::Result<Tensor<'g>>;

/// `|analytic - numeric| / max(|numeric|, 1e-6)` in the Euclidean norm.
fn relative_error(f: Scalar, x: &Array, aux: &Array) -> Result<f64, String> {
    let g = Graph::new();
    let leaf = g.param(x.clone());
    let y = f(&g, leaf, aux).map_err(|e| e.to_string())?;
    y.backward().map_err(|e| e.to_string())?;
    let analytic = leaf.grad().unwrap_or_else(|| Array::zeros(x.shape()));
    let numeric = numeric_gradient(
        |p| {
            let g = Graph::new();
            f(&g, g.constant(p.clone()), aux).map(|y| y.item()).unwrap_or(f64::NAN)
        },
        x,
        1e-6,
    );
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).powi(2)).sum();
    let norm: f64 = numeric.data().iter().map(|n| n * n).sum();
    Ok(diff.sqrt() / norm.sqrt().max(1e-6))
}

fn random_boxes(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 4]> {
    (0..m)
        .map(|_| {
            [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.2..0.4),
                rng.random_range(0.2..0.4),
            ]
        })
        .collect()
}

/// Boxes near `t` whose edges stay clear of `t`'s edges, so every max/min
/// and absolute value in the losses is differentiable.
fn smooth_perturbation(rng: &mut ChaCha8Rng, t: &[[f64; 4]]) -> Vec<[f64; 4]> {
    t.iter()
        .map(|b| {
            let mut out = [0.0; 4];
            for (o, v) in out.iter_mut().zip(b) {
                let d: f64 = rng.random_range(0.005..0.05);
                *o = v + if rng.random_bool(0.5) { d } else { -d };
            }
            out
        })
        .collect()
}

pub fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: [f64; 3] = [0.0; 3];
    let l1: Scalar = |g, x, t| l1_box_loss(&x, &g.constant(t.clone()));
    let gi: Scalar = |g, x, t| giou_box_loss(&x, &g.constant(t.clone()));
    let fo: Scalar = |_, x, t| focal_loss(&x, t, 0.25, 2.0);
    for _ in 0..50 {
        let m = rng.random_range(1..5);
        let target = random_boxes(&mut rng, m);
        let pred = smooth_perturbation(&mut rng, &target);
        let (p, t) = (Array::from_rows(&pred).unwrap(), Array::from_rows(&target).unwrap());
        worst[0] = worst[0].max(relative_error(l1, &p, &t)?);
        worst[1] = worst[1].max(relative_error(gi, &p, &t)?);

        let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..5));
        let logits = Array::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let targets = Array::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_bool(0.3) as u8 as f64).collect()).unwrap();
        worst[2] = worst[2].max(relative_error(fo, &logits, &targets)?);
    }
    let names = ["l1", "giou", "focal"];
    for (n, w) in names.iter().zip(worst) {
        if w >= 1e-3 {
            return Err(format!("{n} relative error {w:e} >= 1e-3"));
        }
    }
    let (e2e, param) = gradcheck::matching_loss_gradient_error()?;
    if e2e >= 1e-2 {
        return Err(format!("matching loss: {param} relative error {e2e:e} >= 1e-2"));
    }
    within(start.elapsed(), Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "worst rel err l1 {:.1e}, giou {:.1e}, focal {:.1e}, end-to-end {e2e:.1e} ({param})",
        worst[0], worst[1], worst[2]
    ))
}

pub fn metric_oracles() -> Outcome {
    metric_cases::average_precision_cases(31, 500)?;
    metric_cases::mr_f1_cases(32, 500)?;
    metric_cases::localization_ar_cases(33, 500)?;
    metric_cases::ovd_ap50_cases(34, 500)?;
    Ok("4 × 500 instances agree".into())
}

pub fn loss_identity() -> Outcome {
    let spec = SyntheticSpec { num_train: 200, num_heldout: 1, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, 4).map_err(|e| e.to_string())?;
    let td = crate::training::train_data(&data.train);
    let cfg = TrainConfig { steps_o: 200, steps_a: 200, steps_f: 100, seed: 4, ..TrainConfig::default() };
    let model = Model::new(ModelConfig::default(), cfg.seed).map_err(|e| e.to_string())?;
    let mut ck = Checkpoint::new(model, cfg.optimizer, [0; 32]);
    let mut worst = 0.0f64;
    let records = run_schedule(&mut ck, &td, &cfg, None, |_| {}).map_err(|e| e.to_string())?;
    for r in &records {
        let l = r.loss;
        worst = worst.max((l.total - (l.l1 + l.giou + l.focal)).abs());
    }
    if records.len() != 500 {
        return Err(format!("{} steps recorded", records.len()));
    }
    if worst > 1e-12 {
        return Err(format!("max |total - (l1 + giou + focal)| = {worst:e}"));
    }
    Ok(format!("500 steps, max deviation {worst:e}"))
}

pub fn curriculum() -> Outcome {
    let fx = sampling::fixture(200, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut attr_first, mut composites) = (0usize, 0usize);
    for draw in 0..10_000 {
        let rec = &fx.records[draw % fx.records.len()];
        let n_neg = rng.random_range(0..10);
        let o = sample_step_o(rec, &fx.candidates, n_neg, &fx.builder, &mut rng).map_err(|e| e.to_string())?;
        let a = sample_step_a(rec, &fx.candidates, n_neg, &fx.builder, &mut rng).map_err(|e| e.to_string())?;
        let f = sample_step_f(rec, &fx.candidates, n_neg, &fx.builder, &mut rng).map_err(|e| e.to_string())?;
        for qs in [&o, &a, &f] {
            sampling::check_collisions(rec, qs, &fx).map_err(|e| format!("draw {draw}: {e}"))?;
        }
        for q in f.iter().filter(|q| q.provenance == Provenance::Composite) {
            if sampling::split_composite(&q.label, q.order, &fx).is_none() {
                return Err(format!("composite `{}` is not one attribute plus one class", q.label));
            }
            composites += 1;
            attr_first += (q.order == WordOrder::AttrThenObj) as usize;
        }
    }
    let freq = attr_first as f64 / composites as f64;
    if (freq - 0.5).abs() > 0.02 {
        return Err(format!("attribute-first frequency {freq:.4} outside 0.5 ± 0.02"));
    }
    Ok(format!("3 × 10000 draws, 0 collisions, {composites} composites, attribute-first {freq:.4}"))
}

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ovattr"))
        .args(args)
        .current_dir(dir)
        .env_remove("LOWA_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`ovattr {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let config = "[data]\nnum_train = 24\nnum_heldout = 8\n[train]\nsteps_o = 10\nsteps_a = 10\nsteps_f = 10\nbatch_size = 4\n";
    std::fs::write(dir.join("c.ini"), config).map_err(|e| e.to_string())?;
    for r in ["a", "b"] {
        let (data, model, eval) = (format!("data_{r}"), format!("model_{r}"), format!("eval_{r}"));
        run(dir, &["--config", "c.ini", "synth", "--out", &data, "--seed", "3"])?;
        run(dir, &["--config", "c.ini", "train", "--data", &data, "--out", &model, "--seed", "3"])?;
        run(dir, &["--config", "c.ini", "eval", "--checkpoint", &model, "--data", &data, "--out", &eval, "--logits-matrix"])?;
        let img = format!("{data}/images/24.ppm");
        let pred = format!("{eval}/open.json");
        run(dir, &["infer", "--checkpoint", &model, "--image", &img, "--mode", "open", "--queries", "red square;small", "--threshold", "0.01", "--out", &pred])?;
    }
    let files = [
        "data_{}/train.json",
        "data_{}/heldout.json",
        "data_{}/images/0.ppm",
        "model_{}/checkpoint.lwa",
        "model_{}/loss.csv",
        "model_{}/vocab.txt",
        "eval_{}/report.json",
        "eval_{}/report.txt",
        "eval_{}/logits_matrix.csv",
        "eval_{}/open.json",
    ];
    for f in files {
        let read = |r: &str| std::fs::read(dir.join(f.replace("{}", r))).map_err(|e| format!("{f}: {e}"));
        if read("a")? != read("b")? {
            return Err(format!("{} differs between identical runs", f.replace("{}", "*")));
        }
    }
    Ok(format!("{} artifacts byte-identical across repeated synth/train/eval/infer", files.len()))
}
