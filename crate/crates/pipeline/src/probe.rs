// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear probe on globally pooled backbone features, the baseline
//! the sparse concept model is compared against.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spatial_cbm::backbone::{extract_features, prepare_image, Backbone};
use spatial_cbm::eval::{load_manifest, DatasetEntry};
use spatial_cbm::head::{argmax, fit_stats, solve, ElasticNet, SolverConfig};
use spatial_cbm::{Error, Result};

use crate::config::{derive_seed, RunConfig};
use crate::stages::load_rgb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambda: f64,
    pub feature_dim: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub kkt_residual: f64,
}

fn pooled_features(backbone: &dyn Backbone, cfg: &RunConfig, entries: &[DatasetEntry]) -> Result<Array2<f64>> {
    let size = cfg.backbone.config.input_size;
    let rows: Vec<Vec<f64>> = entries
        .par_iter()
        .map(|e| {
            let fm = extract_features(backbone, &prepare_image(&load_rgb(&e.image)?, size), &cfg.backbone.config)?;
            let cells = (fm.values.shape()[1] * fm.values.shape()[2]) as f64;
            Ok(fm.values.outer_iter().map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / cells).collect())
        })
        .collect::<Result<_>>()?;
    let d = rows.first().map_or(0, Vec::len);
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("equal widths"))
}

/// Fits an L2-regularized multinomial probe on the training manifest and
/// scores it on the validation manifest.
pub fn linear_probe(cfg: &RunConfig, lambda: f64) -> Result<ProbeReport> {
    let val = cfg.dataset.val.as_ref().ok_or_else(|| Error::Config("probe needs dataset.val".into()))?;
    let train = load_manifest(&cfg.dataset.train)?;
    let val = load_manifest(val)?;
    let backbone = cfg.backbone.source.build(std::path::Path::new("."))?;
    let l = cfg.dataset.classes.len();
    let xt = pooled_features(backbone.as_ref(), cfg, &train)?;
    let xv = pooled_features(backbone.as_ref(), cfg, &val)?;
    let stats = fit_stats(xt.view())?;
    let (xt, xv) = (stats.normalize_rows(xt.view())?, stats.normalize_rows(xv.view())?);
    let yt: Vec<usize> = train.iter().map(|e| e.label).collect();
    let yv: Vec<usize> = val.iter().map(|e| e.label).collect();
    let solver = SolverConfig { seed: derive_seed(cfg.seed, "probe"), ..cfg.head.solver_config(0) };
    let (p, report) = solve(xt.view(), &yt, l, &ElasticNet { alpha: 0.0, lambda }, &solver, None)?;
    let acc = |x: &Array2<f64>, y: &[usize]| {
        let hits = x
            .outer_iter()
            .zip(y)
            .filter(|(row, &t)| {
                let logits: Vec<f64> = (0..l).map(|c| p.w.row(c).dot(row) + p.b[c]).collect();
                argmax(&logits) == t
            })
            .count();
        hits as f64 / y.len().max(1) as f64
    };
    Ok(ProbeReport {
        lambda,
        feature_dim: xt.ncols(),
        train_accuracy: acc(&xt, &yt),
        val_accuracy: acc(&xv, &yv),
        kkt_residual: report.kkt_residual,
    })
}
