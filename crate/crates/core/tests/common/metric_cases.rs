//! Seeded comparisons of the library metrics against `oracles`. Each
//! returns the first disagreement as an error.

use ovattr::evaluation::{
    attribute_localization_ar, average_precision, average_recall_at_k, detection_ap, mr_f1_at_k, ovd_ap50,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{detection_image, oracles, score};

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn average_precision_cases(seed: u64, n_cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_cases {
        let n = rng.random_range(1..25);
        let coarse = rng.random_bool(0.5);
        let s: Vec<f64> = (0..n).map(|_| score(&mut rng, coarse)).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (got, want) = (average_precision(&s, &l), oracles::ap(&s, &l));
        check(close(got, want, 1e-12), || format!("AP {s:?} {l:?}: {got:?} vs {want:?}"))?;
    }
    Ok(())
}

pub fn mr_f1_cases(seed: u64, n_cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_cases {
        let n = rng.random_range(1..12);
        let a = rng.random_range(1..8);
        let k = rng.random_range(1..=a + 1);
        let coarse = rng.random_bool(0.5);
        let s: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| score(&mut rng, coarse)).collect()).collect();
        let t: Vec<Vec<bool>> = (0..n).map(|_| (0..a).map(|_| rng.random_bool(0.3)).collect()).collect();
        let (r, f) = mr_f1_at_k(&s, &t, k);
        let (ro, fo) = oracles::mr_f1(&s, &t, k);
        check((r - ro).abs() < 1e-9 && (f - fo).abs() < 1e-9, || format!("mR/F1 k={k}: ({r},{f}) vs ({ro},{fo})"))?;
    }
    Ok(())
}

pub fn localization_ar_cases(seed: u64, n_cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_cases {
        let n_attr = rng.random_range(1..5);
        let n_img = rng.random_range(1..4);
        let k = rng.random_range(1..6);
        let coarse = rng.random_bool(0.5);
        let per_attr: Vec<Vec<_>> = (0..n_attr)
            .map(|_| (0..n_img).map(|_| detection_image(&mut rng, coarse)).collect())
            .collect();
        let cats: Vec<String> = (0..n_attr).map(|a| ["x", "y"][a % 2].to_string()).collect();
        let got = attribute_localization_ar(&per_attr, &cats, k);
        let want: Vec<Option<f64>> = per_attr.iter().map(|imgs| oracles::ar_at_k(imgs, k)).collect();
        for (g, w) in got.per_attribute.iter().zip(&want) {
            check(close(*g, *w, 1e-9), || format!("AR per attribute {g:?} vs {w:?}"))?;
        }
        check(close(got.mean, oracles::mean_defined(&want), 1e-9), || "AR mean".into())?;
        for (cat, v) in &got.per_category {
            let vals: Vec<Option<f64>> =
                want.iter().zip(&cats).filter(|(_, c)| *c == cat).map(|(w, _)| *w).collect();
            check(close(Some(*v), oracles::mean_defined(&vals), 1e-9), || format!("AR category {cat}"))?;
        }
        for imgs in &per_attr {
            check(close(average_recall_at_k(imgs, k), oracles::ar_at_k(imgs, k), 1e-9), || "AR@k".into())?;
        }
    }
    Ok(())
}

pub fn ovd_ap50_cases(seed: u64, n_cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_cases {
        let n_cls = rng.random_range(1..5);
        let n_img = rng.random_range(1..4);
        let coarse = rng.random_bool(0.5);
        let per_class: Vec<Vec<_>> = (0..n_cls)
            .map(|_| (0..n_img).map(|_| detection_image(&mut rng, coarse)).collect())
            .collect();
        let novel: Vec<bool> = (0..n_cls).map(|_| rng.random_bool(0.5)).collect();
        let got = ovd_ap50(&per_class, &novel);
        let want: Vec<Option<f64>> = per_class.iter().map(|imgs| oracles::det_ap(imgs, 0.5)).collect();
        for (g, w) in got.per_class.iter().zip(&want) {
            check(close(*g, *w, 1e-12), || format!("AP50 per class {g:?} vs {w:?}"))?;
        }
        let subset = |flag: Option<bool>| {
            let v: Vec<Option<f64>> = want
                .iter()
                .zip(&novel)
                .filter(|(_, n)| flag.is_none_or(|f| f == **n))
                .map(|(w, _)| *w)
                .collect();
            oracles::mean_defined(&v)
        };
        check(close(got.novel, subset(Some(true)), 1e-9), || "AP50 novel".into())?;
        check(close(got.base, subset(Some(false)), 1e-9), || "AP50 base".into())?;
        check(close(got.all, subset(None), 1e-9), || "AP50 all".into())?;
        for imgs in &per_class {
            check(close(detection_ap(imgs, 0.75), oracles::det_ap(imgs, 0.75), 1e-12), || "AP75".into())?;
        }
    }
    Ok(())
}
