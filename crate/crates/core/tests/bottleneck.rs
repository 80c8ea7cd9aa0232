// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_cbm::bottleneck::{
    cubic_cos_loss, cubic_cos_loss_grad, project_batch, train_bottleneck, BottleneckWeights, CblTrainConfig,
    WeightInit,
};
use spatial_cbm::toy::linear_concept_task;
use spatial_cbm::Error;

fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// Straight transcription: gather, center, cube, cosine, negate, sum.
fn loop_loss(c: &Array4<f64>, p: &Array4<f64>) -> f64 {
    let (b, m, h, w) = c.dim();
    let mut total = 0.0;
    for j in 0..m {
        for y in 0..h {
            for x in 0..w {
                let q: Vec<f64> = (0..b).map(|i| c[[i, j, y, x]]).collect();
                let t: Vec<f64> = (0..b).map(|i| p[[i, j, y, x]]).collect();
                let qm = q.iter().sum::<f64>() / b as f64;
                let tm = t.iter().sum::<f64>() / b as f64;
                let u: Vec<f64> = q.iter().map(|v| (v - qm).powi(3)).collect();
                let v: Vec<f64> = t.iter().map(|v| (v - tm).powi(3)).collect();
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nu > 0.0 && nv > 0.0 {
                    total -= dot / (nu * nv);
                }
            }
        }
    }
    total
}

fn f32s(a: &Array4<f64>) -> Array4<f32> {
    a.mapv(|v| v as f32)
}

#[test]
fn loss_matches_loop_oracle() {
    for seed in 0..5 {
        let c = random4((6, 4, 3, 2), seed);
        let p = random4((6, 4, 3, 2), seed + 100);
        let (c32, p32) = (f32s(&c), f32s(&p));
        let oracle = loop_loss(&c32.mapv(f64::from), &p32.mapv(f64::from));
        let got = cubic_cos_loss(c32.view(), p32.view()).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        let (g64, _) = cubic_cos_loss_grad(c.view(), p.view()).unwrap();
        assert!((g64 - loop_loss(&c, &p)).abs() < 1e-9);
    }
}

#[test]
fn extremes_attained() {
    let p = f32s(&random4((5, 3, 2, 2), 9));
    let cells = (3 * 2 * 2) as f64;
    assert!((cubic_cos_loss(p.view(), p.view()).unwrap() + cells).abs() < 1e-9);
    let neg = p.mapv(|v| -v);
    assert!((cubic_cos_loss(neg.view(), p.view()).unwrap() - cells).abs() < 1e-9);
    // Perturbing one cell breaks the optimum.
    let mut c = p.clone();
    c[[0, 1, 1, 0]] += 0.5;
    assert!(cubic_cos_loss(c.view(), p.view()).unwrap() > -cells + 1e-6);
}

#[test]
fn gradient_matches_central_differences() {
    let c = random4((8, 3, 2, 2), 1);
    let p = random4((8, 3, 2, 2), 2);
    let (_, grad) = cubic_cos_loss_grad(c.view(), p.view()).unwrap();
    let h = 1e-6;
    let mut num = Array4::<f64>::zeros(c.dim());
    for idx in ndarray::indices(c.dim()) {
        let mut plus = c.clone();
        let mut minus = c.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let lp = cubic_cos_loss_grad(plus.view(), p.view()).unwrap().0;
        let lm = cubic_cos_loss_grad(minus.view(), p.view()).unwrap().0;
        num[idx] = (lp - lm) / (2.0 * h);
    }
    let diff = (&grad - &num).mapv(|v| v * v).sum().sqrt();
    let scale = num.mapv(|v| v * v).sum().sqrt();
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    for (a, b) in grad.iter().zip(num.iter()) {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "{a} vs {b}");
    }
}

#[test]
fn weight_gradient_through_projection_matches_differences() {
    // dL/dW = sum over batch and cells of dL/dC * feature.
    let feats = random4((8, 4, 2, 2), 3).mapv(|v| v as f32);
    let p = random4((8, 3, 2, 2), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0f64));
    let loss_at = |w: &Array2<f64>| {
        let bw = BottleneckWeights::new(w.mapv(|v| v as f32), "c", "b", "l", (2, 2)).unwrap();
        let c = project_batch(feats.view(), &bw).unwrap().mapv(f64::from);
        cubic_cos_loss_grad(c.view(), p.view()).unwrap()
    };
    let (_, dc) = loss_at(&w);
    let mut analytic = Array2::<f64>::zeros((3, 4));
    for ((i, j, y, x), g) in dc.indexed_iter() {
        for k in 0..4 {
            analytic[[j, k]] += g * feats[[i, k, y, x]] as f64;
        }
    }
    let h = 1e-3;
    for j in 0..3 {
        for k in 0..4 {
            let mut a = w.clone();
            let mut b = w.clone();
            a[[j, k]] += h;
            b[[j, k]] -= h;
            let fd = (loss_at(&a).0 - loss_at(&b).0) / (2.0 * h);
            assert!((fd - analytic[[j, k]]).abs() < 1e-3 * analytic[[j, k]].abs().max(1.0));
        }
    }
}

#[test]
fn shift_and_scale_invariance() {
    let c = random4((6, 2, 2, 2), 7);
    let p = random4((6, 2, 2, 2), 8);
    let base = cubic_cos_loss_grad(c.view(), p.view()).unwrap().0;
    let mut shifted = c.clone();
    for j in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                let k = (j * 4 + y * 2 + x) as f64 * 0.37 - 1.0;
                for i in 0..6 {
                    shifted[[i, j, y, x]] += k;
                }
            }
        }
    }
    assert!((cubic_cos_loss_grad(shifted.view(), p.view()).unwrap().0 - base).abs() < 1e-12);
    let scaled = c.mapv(|v| v * 3.5);
    assert!((cubic_cos_loss_grad(scaled.view(), p.view()).unwrap().0 - base).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_bounded(seed in 0u64..500, b in 2usize..6, m in 1usize..4) {
        let c = random4((b, m, 2, 3), seed);
        let p = random4((b, m, 2, 3), seed ^ 0xff);
        let l = cubic_cos_loss_grad(c.view(), p.view()).unwrap().0;
        let bound = (m * 6) as f64;
        prop_assert!(l >= -bound - 1e-9 && l <= bound + 1e-9);
    }
}

fn quick_cfg(steps: usize, batch: usize) -> CblTrainConfig {
    CblTrainConfig { step_size: 1e-2, steps, batch_size: batch, validation_fraction: 0.2, seed: 3, ..Default::default() }
}

#[test]
fn zero_init_zero_steps_hits_guard() {
    let task = linear_concept_task(40, 6, 3, (2, 2), 0.01, 1);
    let (bank, p) = task.to_artifacts().unwrap();
    let cfg = CblTrainConfig { init: WeightInit::Zero, ..quick_cfg(0, 4) };
    let (w, report) = train_bottleneck(&bank, &p, &cfg).unwrap();
    assert!(w.weight().iter().all(|&v| v == 0.0));
    assert_eq!(report.final_validation_loss, Some(0.0));
    assert_eq!(w.parameter_count(), 3 * 6);
}

#[test]
fn deterministic_given_seed() {
    let task = linear_concept_task(60, 5, 3, (2, 2), 0.01, 2);
    let (bank, p) = task.to_artifacts().unwrap();
    let a = train_bottleneck(&bank, &p, &quick_cfg(30, 8)).unwrap();
    let b = train_bottleneck(&bank, &p, &quick_cfg(30, 8)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = train_bottleneck(&bank, &p, &CblTrainConfig { seed: 4, ..quick_cfg(30, 8) }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn insufficient_data_and_misaligned_manifest() {
    let task = linear_concept_task(20, 4, 2, (2, 2), 0.01, 3);
    let (bank, mut p) = task.to_artifacts().unwrap();
    let err = train_bottleneck(&bank, &p, &quick_cfg(5, 16)).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)));
    p.image_manifest.swap(0, 1);
    assert!(matches!(train_bottleneck(&bank, &p, &quick_cfg(5, 2)), Err(Error::Data(_))));
    let bad = CblTrainConfig { batch_size: 1, ..quick_cfg(5, 1) };
    assert!(matches!(train_bottleneck(&bank, &p, &bad), Err(Error::Config(_))));
}

#[test]
fn divergence_reports_step() {
    let task = linear_concept_task(40, 4, 2, (2, 2), 0.0, 4);
    let (bank, p) = task.to_artifacts().unwrap();
    let cfg = CblTrainConfig { validation_fraction: 0.0, step_size: 1e200, cosine_decay: false, ..quick_cfg(50, 20) };
    match train_bottleneck(&bank, &p, &cfg) {
        Err(Error::Divergence { step, .. }) => assert!(step >= 1 && step < 50),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn recovers_hidden_linear_map() {
    let task = linear_concept_task(500, 12, 6, (3, 3), 0.01, 5);
    let (bank, p) = task.to_artifacts().unwrap();
    let cfg = CblTrainConfig {
        step_size: 2e-2,
        steps: 800,
        batch_size: 64,
        validation_fraction: 0.2,
        seed: 11,
        ..Default::default()
    };
    let (_, report) = train_bottleneck(&bank, &p, &cfg).unwrap();
    let good = report.validation_concept_similarity.iter().filter(|&&s| s >= 0.95).count();
    assert!(good * 10 >= 6 * 9, "similarities {:?}", report.validation_concept_similarity);
    assert!(report.step_losses.last().unwrap() < &report.step_losses[0]);
}
