// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy problems for tests, demos and the acceptance harness.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::FeatureBank;
use crate::bottleneck::ConceptMaps;
use crate::catalog::{CatalogSource, ConceptCatalog};
use crate::head::{ActivationStats, ElasticNet, HeadParams, PoolMode, SparseHead};
use crate::similarity::grid::make_grid;
use crate::similarity::SimilarityMatrix;

/// Gaussian class clusters: `(activations [N, M], labels)`.
///
/// Class means are drawn with std `spread`; samples add unit noise, so
/// small `spread` gives overlapping (non-separable) classes.
pub fn gaussian_classes(n: usize, m: usize, l: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means = Array2::from_shape_simple_fn((l, m), || spread * unit.sample(&mut rng));
    let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
    let x = Array2::from_shape_fn((n, m), |(i, j)| means[[labels[i], j]] + unit.sample(&mut rng));
    (x, labels)
}

/// Synthetic bottleneck task.
///
/// Features are `[N, D, H, W]` standard normal; targets are a hidden linear
/// map `[M, D]` applied per cell (values with std 0.25) plus Gaussian noise
/// `noise_std`, clamped to `[-1, 1]`.
pub struct LinearConceptTask {
    pub features: Array4<f32>,
    pub targets: Array4<f32>,
    pub hidden: Array2<f64>,
}

pub fn linear_concept_task(
    n: usize,
    d: usize,
    m: usize,
    grid: (usize, usize),
    noise_std: f64,
    seed: u64,
) -> LinearConceptTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (h, w) = grid;
    let hidden = Array2::from_shape_simple_fn((m, d), || unit.sample(&mut rng) / (d as f64).sqrt());
    let features = Array4::from_shape_simple_fn((n, d, h, w), || unit.sample(&mut rng) as f32);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("noise std");
    let mut targets = Array4::zeros((n, m, h, w));
    for i in 0..n {
        for j in 0..m {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += hidden[[j, k]] * features[[i, k, y, x]] as f64;
                    }
                    let eps = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    targets[[i, j, y, x]] = (0.25 * s + eps).clamp(-1.0, 1.0) as f32;
                }
            }
        }
    }
    LinearConceptTask { features, targets, hidden }
}

impl LinearConceptTask {
    /// Wraps the arrays as a feature bank and similarity matrix with
    /// matching image ids, on a 64x64 pixel grid.
    pub fn to_artifacts(&self) -> crate::Result<(FeatureBank, SimilarityMatrix)> {
        let (n, _, h, w) = self.features.dim();
        let ids: Vec<String> = (0..n).map(|i| format!("synthetic-{i:05}")).collect();
        let bank = FeatureBank::from_array(self.features.clone(), ids.clone(), "synthetic", "features")?;
        let grid = make_grid(64, 64, h, w, 8)?;
        let p = SimilarityMatrix {
            values: self.targets.clone(),
            grid,
            catalog_hash: "synthetic".into(),
            encoder_id: "synthetic".into(),
            image_manifest: ids,
        };
        Ok((bank, p))
    }
}

/// Catalog with concepts `"concept {i}"` and classes `"class {j}"`.
pub fn numbered_catalog(m: usize, l: usize) -> ConceptCatalog {
    ConceptCatalog::new(
        (0..m).map(|i| format!("concept {i}")).collect(),
        (0..l).map(|j| format!("class {j}")).collect(),
        CatalogSource::UserProvided,
        Vec::new(),
    )
    .expect("numbered concepts are valid")
}

/// Random head over `m` concepts and `l` classes; about a third of the
/// weights are exactly zero. Tied to `numbered_catalog(m, l)`.
pub fn random_head(m: usize, l: usize, seed: u64) -> SparseHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((l, m), || {
        if rng.random_range(0..3) == 0 {
            0.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let b = Array1::from_shape_simple_fn(l, || rng.random_range(-0.5..0.5));
    let stats = ActivationStats {
        mean: (0..m).map(|_| rng.random_range(-0.2..0.2)).collect(),
        std: (0..m).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let reg = ElasticNet { alpha: 0.5, lambda: 1.0 };
    SparseHead::new(HeadParams { w, b }, stats, reg, PoolMode::Mean, numbered_catalog(m, l).content_hash)
        .expect("finite parameters")
}

/// Uniform random concept maps `[m, h, w]` in `[-1, 1]`.
pub fn random_maps(m: usize, h: usize, w: usize, seed: u64) -> ConceptMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConceptMaps::new(Array3::from_shape_simple_fn((m, h, w), || rng.random_range(-1.0..1.0f32))).expect("finite")
}
