// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{array, Array1, Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_cbm::head::{
    fit_stats, kkt_residual, objective, regularization_path, solve, train_head, ActivationStats, ElasticNet,
    HeadParams, HeadSolver, PoolMode, SolverConfig, SparseHead,
};
use spatial_cbm::toy::gaussian_classes;
use spatial_cbm::Error;

fn standardized(x: &Array2<f64>) -> Array2<f64> {
    fit_stats(x.view()).unwrap().normalize_rows(x.view()).unwrap()
}

/// Objective and gradient of the smooth part plus the ridge term, written
/// out per sample without matrix helpers.
fn smooth_parts(x: ArrayView2<'_, f64>, y: &[usize], w: &Array2<f64>, b: &Array1<f64>, ridge: f64) -> (f64, Array2<f64>, Array1<f64>) {
    let (l, m) = w.dim();
    let mut f = 0.0;
    let mut gw = Array2::zeros((l, m));
    let mut gb = Array1::zeros(l);
    for (n, row) in x.outer_iter().enumerate() {
        let z: Vec<f64> = (0..l).map(|c| (0..m).map(|k| w[[c, k]] * row[k]).sum::<f64>() + b[c]).collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        f += mx + s.ln() - z[y[n]];
        for c in 0..l {
            let p = (z[c] - mx).exp() / s - if c == y[n] { 1.0 } else { 0.0 };
            gb[c] += p;
            for k in 0..m {
                gw[[c, k]] += p * row[k];
            }
        }
    }
    f += 0.5 * ridge * w.iter().map(|v| v * v).sum::<f64>();
    gw = gw + w * ridge;
    (f, gw, gb)
}

/// Plain ISTA with a fixed step from a power-iteration Lipschitz bound.
fn reference_solver(x: ArrayView2<'_, f64>, y: &[usize], l: usize, reg: &ElasticNet, iters: usize) -> (Array2<f64>, Array1<f64>, f64) {
    let (n, m) = x.dim();
    let mut aug = Array2::ones((n, m + 1));
    aug.slice_mut(ndarray::s![.., ..m]).assign(&x);
    let gram = aug.t().dot(&aug);
    let mut v = Array1::from_elem(m + 1, 1.0);
    let mut sigma = 0.0;
    for _ in 0..500 {
        let nv = gram.dot(&v);
        sigma = nv.dot(&nv).sqrt() / v.dot(&v).sqrt();
        v = &nv / nv.dot(&nv).sqrt();
    }
    let lip = 0.5 * sigma * 1.05 + reg.lambda * (1.0 - reg.alpha);
    let t = 1.0 / lip;
    let mut w = Array2::zeros((l, m));
    let mut b = Array1::zeros(l);
    for _ in 0..iters {
        let (_, gw, gb) = smooth_parts(x, y, &w, &b, reg.lambda * (1.0 - reg.alpha));
        b = &b - &(gb * t);
        w = (&w - &(gw * t)).mapv(|v: f64| v.signum() * (v.abs() - t * reg.lambda * reg.alpha).max(0.0));
    }
    let (f, _, _) = smooth_parts(x, y, &w, &b, reg.lambda * (1.0 - reg.alpha));
    let f = f + reg.lambda * reg.alpha * w.iter().map(|v| v.abs()).sum::<f64>();
    (w, b, f)
}

fn tight() -> SolverConfig {
    SolverConfig { tol: 1e-8, ..Default::default() }
}

#[test]
fn huge_lambda_zeroes_weights_and_bias_tracks_frequencies() {
    let (x, mut y) = gaussian_classes(60, 5, 3, 2.0, 1);
    for label in y.iter_mut().take(30) {
        *label = 2;
    }
    let x = standardized(&x);
    let reg = ElasticNet { alpha: 0.5, lambda: 1e6 };
    let (p, report) = solve(x.view(), &y, 3, &reg, &tight(), None).unwrap();
    assert!(p.w.iter().all(|&v| v == 0.0));
    assert!(report.kkt_residual <= 1e-4);
    let counts: Vec<usize> = (0..3).map(|c| y.iter().filter(|&&v| v == c).count()).collect();
    let logf: Vec<f64> = counts.iter().map(|&c| (c as f64 / 60.0).ln()).collect();
    for c in 0..3 {
        // softmax(b) equals class frequencies, so b - mean(b) = log f - mean(log f)
        let db = p.b[c] - p.b.mean().unwrap();
        let dl = logf[c] - logf.iter().sum::<f64>() / 3.0;
        assert!((db - dl).abs() < 1e-6);
    }
    let head = SparseHead::new(p, fit_stats(x.view()).unwrap(), reg, PoolMode::Mean, "h").unwrap();
    let pred = head.predict(array![9.0, -3.0, 1.0, 0.0, 4.0].view()).unwrap();
    assert_eq!(pred.y_hat, 2);
}

#[test]
fn ridge_matches_dense_gradient_descent() {
    let x = array![[0.5, -1.0], [1.5, 0.2], [-0.3, 0.8], [2.0, 1.0], [-1.2, -0.7], [0.1, 0.4], [1.1, -0.5], [-0.9, 1.3]];
    let y = [0, 1, 0, 1, 0, 1, 1, 0];
    let reg = ElasticNet { alpha: 0.0, lambda: 0.5 };
    let (_, report) = solve(x.view(), &y, 2, &reg, &tight(), None).unwrap();
    // Dense reference: gradient descent on the full smooth objective.
    let mut w = Array2::<f64>::zeros((2, 2));
    let mut b = Array1::<f64>::zeros(2);
    for _ in 0..200_000 {
        let (_, gw, gb) = smooth_parts(x.view(), &y, &w, &b, 0.5);
        w = &w - &(gw * 0.05);
        b = &b - &(gb * 0.05);
    }
    let (f_ref, _, _) = smooth_parts(x.view(), &y, &w, &b, 0.5);
    assert!(((report.objective - f_ref) / f_ref).abs() <= 1e-6, "{} vs {f_ref}", report.objective);
}

#[test]
fn unregularized_matches_reference() {
    let (x, y) = gaussian_classes(40, 3, 2, 0.5, 2);
    let x = standardized(&x);
    let reg = ElasticNet { alpha: 0.5, lambda: 0.0 };
    let (p, report) = solve(x.view(), &y, 2, &reg, &tight(), None).unwrap();
    let (_, _, f_ref) = reference_solver(x.view(), &y, 2, &reg, 100_000);
    assert!(((report.objective - f_ref) / f_ref).abs() <= 1e-6);
    assert!(kkt_residual(x.view(), &y, &p, &reg) <= 1e-4);
}

#[test]
fn lasso_on_separable_toy_is_sparse_and_stationary() {
    let x = array![[2.0, 0.1], [1.5, -0.2], [1.8, 0.3], [-2.0, 0.2], [-1.7, -0.1], [-1.6, 0.05]];
    let y = [0, 0, 0, 1, 1, 1];
    let reg = ElasticNet { alpha: 1.0, lambda: 1.0 };
    let (p, report) = solve(x.view(), &y, 2, &reg, &tight(), None).unwrap();
    let nnz = p.w.iter().filter(|&&v| v != 0.0).count();
    assert!(nnz < 4, "{:?}", p.w);
    assert!(report.kkt_residual <= 1e-4);
    // Independent KKT evaluation from the per-sample gradient.
    let (_, gw, gb) = smooth_parts(x.view(), &y, &p.w, &p.b, 0.0);
    for ((idx, &w), g) in p.w.indexed_iter().zip(gw.iter()) {
        if w == 0.0 {
            assert!(g.abs() <= 1.0 + 1e-4, "{idx:?}");
        } else {
            assert!((g + w.signum()).abs() <= 1e-4, "{idx:?}");
        }
    }
    assert!(gb.iter().all(|g| g.abs() <= 1e-4));
}

#[test]
fn solvers_agree_with_reference_on_toys() {
    for (seed, (n, m, l)) in [(10, (200, 20, 5)), (11, (120, 8, 3)), (12, (80, 12, 4))] {
        let (x, y) = gaussian_classes(n, m, l, 0.6, seed);
        let x = standardized(&x);
        let reg = ElasticNet { alpha: 0.5, lambda: 2.0 };
        let (_, _, f_ref) = reference_solver(x.view(), &y, l, &reg, 20_000);
        for solver in [HeadSolver::ProxGradient, HeadSolver::Saga] {
            let cfg = SolverConfig { solver, max_iter: 20_000, tol: 1e-6, seed: 1 };
            let (p, report) = solve(x.view(), &y, l, &reg, &cfg, None).unwrap();
            assert!(report.kkt_residual <= 1e-4, "{solver:?} kkt {}", report.kkt_residual);
            let f = objective(x.view(), &y, &p, &reg);
            assert!(((f - f_ref) / f_ref).abs() <= 1e-6, "{solver:?}: {f} vs {f_ref}");
        }
    }
}

#[test]
fn path_sparsity_non_increasing() {
    let (x, y) = gaussian_classes(150, 10, 3, 0.8, 4);
    let lambdas = [0.5, 2.0, 8.0, 32.0, 1e6];
    let (heads, table) =
        regularization_path(x.view(), &y, None, 3, 1.0, &lambdas, PoolMode::Mean, &tight(), "h").unwrap();
    assert_eq!(heads.len(), 5);
    for pair in table.windows(2) {
        assert!(pair[1].nnz <= pair[0].nnz, "{table:?}");
    }
    assert_eq!(table.last().unwrap().nnz, 0);
    assert!(table.iter().all(|e| e.kkt_residual <= 1e-4));

    let single = regularization_path(x.view(), &y, None, 3, 1.0, &[2.0], PoolMode::Mean, &tight(), "h").unwrap();
    let (direct, _) = train_head(x.view(), &y, 3, ElasticNet { alpha: 1.0, lambda: 2.0 }, PoolMode::Mean, &tight(), "h").unwrap();
    assert_eq!(single.0[0], direct);
    assert!(regularization_path(x.view(), &y, None, 3, 1.0, &[2.0, 1.0], PoolMode::Mean, &tight(), "h").is_err());
}

#[test]
fn prediction_matches_loop_and_is_scale_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0f64));
    let b = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0f64));
    let stats = ActivationStats { mean: vec![0.1, -0.2, 0.3, 0.0], std: vec![1.0, 2.0, 0.5, 1.5] };
    let head = SparseHead::new(HeadParams { w, b }, stats.clone(), ElasticNet { alpha: 0.5, lambda: 1.0 }, PoolMode::Mean, "h").unwrap();
    let a = array![0.7, -1.1, 0.4, 2.0];
    let pred = head.predict(a.view()).unwrap();
    for l in 0..3 {
        let mut z = head.bias()[l];
        for m in 0..4 {
            z += head.weight(m, l) * (a[m] - stats.mean[m]) / stats.std[m];
        }
        assert!((pred.logits[l] - z).abs() < 1e-12);
    }
    let doubled = ActivationStats { mean: stats.mean.clone(), std: stats.std.iter().map(|s| s * 2.0).collect() };
    let head2 = SparseHead::new(head.params(), doubled, head.reg, PoolMode::Mean, "h").unwrap();
    let pred2 = head2.predict(a.view()).unwrap();
    for l in 0..3 {
        let expect = head.bias()[l] + (pred.logits[l] - head.bias()[l]) / 2.0;
        assert!((pred2.logits[l] - expect).abs() < 1e-12);
    }
    assert!(matches!(head.predict(array![1.0].view()), Err(Error::Geometry(_))));
}

#[test]
fn save_load_round_trip_and_tamper() {
    let (x, y) = gaussian_classes(60, 6, 3, 1.5, 5);
    let (mut head, _) = train_head(x.view(), &y, 3, ElasticNet { alpha: 0.9, lambda: 3.0 }, PoolMode::Mean, &tight(), "cat").unwrap();
    head.provenance.insert("seed".into(), "7".into());
    let dir = tempfile::tempdir().unwrap();
    head.save(dir.path()).unwrap();
    let back = SparseHead::load(dir.path()).unwrap();
    assert_eq!(back, head);
    assert_eq!(back.content_hash(), head.content_hash());
    let coo = std::fs::read(dir.path().join("head_weights.coo")).unwrap();
    assert_eq!(coo.len(), head.nnz() * 12);
    let mut bias = std::fs::read(dir.path().join("head_bias.bin")).unwrap();
    bias[1] ^= 0x40;
    std::fs::write(dir.path().join("head_bias.bin"), bias).unwrap();
    assert!(matches!(SparseHead::load(dir.path()), Err(Error::Provenance { .. })));
}

#[test]
fn invalid_inputs() {
    let x = array![[1.0, 2.0], [0.0, 1.0]];
    let reg = ElasticNet { alpha: 0.5, lambda: 1.0 };
    assert!(matches!(solve(x.view(), &[0, 3], 2, &reg, &tight(), None), Err(Error::Data(_))));
    assert!(matches!(solve(x.view(), &[0], 2, &reg, &tight(), None), Err(Error::Geometry(_))));
    let bad = ElasticNet { alpha: 1.5, lambda: 1.0 };
    assert!(matches!(solve(x.view(), &[0, 1], 2, &bad, &tight(), None), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn prox_matches_grid_search(w in -5.0f64..5.0, t in 0.01f64..2.0, lambda in 0.0f64..3.0, alpha in 0.0f64..=1.0) {
        let reg = ElasticNet { alpha, lambda };
        let p = reg.prox(w, t);
        let obj = |u: f64| 0.5 * (u - w).powi(2) + t * lambda * ((1.0 - alpha) * 0.5 * u * u + alpha * u.abs());
        // Candidates: stationary point of each smooth piece, and the kink at 0.
        let scale = 1.0 + t * lambda * (1.0 - alpha);
        let mut cands = vec![0.0];
        let pos = (w - t * lambda * alpha) / scale;
        let neg = (w + t * lambda * alpha) / scale;
        if pos > 0.0 { cands.push(pos); }
        if neg < 0.0 { cands.push(neg); }
        let best = cands.iter().cloned().fold(0.0, |a: f64, u| if obj(u) < obj(a) { u } else { a });
        for i in -2000..=2000 {
            prop_assert!(obj(i as f64 * 0.005) >= obj(best) - 1e-12);
        }
        prop_assert!((p - best).abs() <= 1e-8, "prox {p} grid {best}");
    }
}
