// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial concept bottleneck: a bias-free 1x1 projection from backbone
//! features to one map per concept, trained with the cubic cosine loss
//! against the similarity targets.
//!
//! For every concept `m` and cell `(h, w)`, the loss compares the vector of
//! activations across the batch, `q = C[:, m, h, w]`, with the matching
//! target vector `p = P[:, m, h, w]`. Both are centered over the batch and
//! cubed elementwise before taking the cosine; the loss is the negated sum
//! of these cosines.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureBank;
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, le_bytes_to_f32s, read_artifact, sha256_hex, write_atomic};
use crate::similarity::SimilarityMatrix;

/// Concept maps for one image, `[M, H~, W~]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMaps {
    pub values: Array3<f32>,
}

impl ConceptMaps {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("concept maps contain non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn num_concepts(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

/// The `[M, D]` kernel of the 1x1 convolution plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckWeights {
    weight: Array2<f32>,
    pub catalog_hash: String,
    pub backbone_id: String,
    pub layer_tag: String,
    pub grid: (usize, usize),
}

impl BottleneckWeights {
    pub fn new(
        weight: Array2<f32>,
        catalog_hash: impl Into<String>,
        backbone_id: impl Into<String>,
        layer_tag: impl Into<String>,
        grid: (usize, usize),
    ) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("bottleneck weights are not finite".into()));
        }
        Ok(Self {
            weight,
            catalog_hash: catalog_hash.into(),
            backbone_id: backbone_id.into(),
            layer_tag: layer_tag.into(),
            grid,
        })
    }

    pub fn weight(&self) -> ArrayView2<'_, f32> {
        self.weight.view()
    }

    pub fn num_concepts(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Exactly `M * D`: the same count as a fully-connected bottleneck.
    pub fn parameter_count(&self) -> usize {
        self.weight.len()
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.blob())
    }

    fn blob(&self) -> Vec<u8> {
        f32s_to_le_bytes(self.weight.as_standard_layout().iter().copied())
    }
}

/// `c[m, h, w] = sum_d weight[m, d] * feat[d, h, w]`.
pub fn project(features: ArrayView3<'_, f32>, weights: &BottleneckWeights) -> Result<ConceptMaps> {
    let (d, h, w) = features.dim();
    if d != weights.feature_dim() {
        return Err(Error::geometry(format!(
            "features have {d} channels, bottleneck expects {}",
            weights.feature_dim()
        )));
    }
    let flat = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((d, h * w))
        .expect("contiguous");
    let out = weights.weight.dot(&flat);
    ConceptMaps::new(out.into_shape_with_order((weights.num_concepts(), h, w)).expect("sizes agree"))
}

/// Projects a `[B, D, H, W]` batch to `[B, M, H, W]`.
pub fn project_batch(features: ArrayView4<'_, f32>, weights: &BottleneckWeights) -> Result<Array4<f32>> {
    let (b, _, h, w) = features.dim();
    let mut out = Array4::zeros((b, weights.num_concepts(), h, w));
    for i in 0..b {
        let maps = project(features.index_axis(Axis(0), i), weights)?;
        out.index_axis_mut(Axis(0), i).assign(&maps.values);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Cosine between the centered, cubed `q` and `p`, and its gradient with
/// respect to `q`. Zero-norm cubed vectors contribute 0 with zero gradient.
fn cell_similarity(q: &[f64], p: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let b = q.len() as f64;
    let qm = q.iter().sum::<f64>() / b;
    let pm = p.iter().sum::<f64>() / b;
    let qc: Vec<f64> = q.iter().map(|x| x - qm).collect();
    let u: Vec<f64> = qc.iter().map(|x| x * x * x).collect();
    let v: Vec<f64> = p.iter().map(|x| (x - pm).powi(3)).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        return 0.0;
    }
    let dot: f64 = u.iter().zip(&v).map(|(a, c)| a * c).sum();
    let cos = dot / (nu * nv);
    if let Some(g) = grad {
        // d cos / d u = v / (|u||v|) - cos * u / |u|^2, chained through
        // u = qc^3 and the centering projection.
        let mut mean = 0.0;
        for k in 0..q.len() {
            let du = v[k] / (nu * nv) - cos * u[k] / (nu * nu);
            g[k] = du * 3.0 * qc[k] * qc[k];
            mean += g[k];
        }
        mean /= b;
        g.iter_mut().for_each(|x| *x -= mean);
    }
    cos
}

fn check_loss_shapes(c: &[usize], p: &[usize]) -> Result<()> {
    if c != p {
        return Err(Error::geometry(format!("loss inputs have shapes {c:?} and {p:?}")));
    }
    if c[0] < 2 {
        return Err(Error::geometry("cubic cosine loss needs a batch of at least 2"));
    }
    Ok(())
}

/// `-sum_{m,h,w} cos(center(q)^3, center(p)^3)` over `[B, M, H, W]` inputs.
pub fn cubic_cos_loss(c: ArrayView4<'_, f32>, p: ArrayView4<'_, f32>) -> Result<f64> {
    check_loss_shapes(c.shape(), p.shape())?;
    let (b, m, h, w) = c.dim();
    let mut q = vec![0f64; b];
    let mut t = vec![0f64; b];
    let mut total = 0.0;
    for j in 0..m {
        for y in 0..h {
            for x in 0..w {
                for i in 0..b {
                    q[i] = c[[i, j, y, x]] as f64;
                    t[i] = p[[i, j, y, x]] as f64;
                }
                total -= cell_similarity(&q, &t, None);
            }
        }
    }
    Ok(total)
}

/// Loss and `dL/dC` for `[B, M, H, W]` inputs.
pub fn cubic_cos_loss_grad(c: ArrayView4<'_, f64>, p: ArrayView4<'_, f64>) -> Result<(f64, Array4<f64>)> {
    check_loss_shapes(c.shape(), p.shape())?;
    let (b, m, h, w) = c.dim();
    let mut grad = Array4::zeros((b, m, h, w));
    let mut q = vec![0f64; b];
    let mut t = vec![0f64; b];
    let mut g = vec![0f64; b];
    let mut total = 0.0;
    for j in 0..m {
        for y in 0..h {
            for x in 0..w {
                for i in 0..b {
                    q[i] = c[[i, j, y, x]];
                    t[i] = p[[i, j, y, x]];
                }
                total -= cell_similarity(&q, &t, Some(&mut g));
                for i in 0..b {
                    grad[[i, j, y, x]] = -g[i];
                }
            }
        }
    }
    Ok((total, grad))
}

/// Mean over cells of the per-cell similarity, per concept.
pub fn per_concept_similarity(c: ArrayView4<'_, f32>, p: ArrayView4<'_, f32>) -> Result<Vec<f64>> {
    check_loss_shapes(c.shape(), p.shape())?;
    let (b, m, h, w) = c.dim();
    let mut q = vec![0f64; b];
    let mut t = vec![0f64; b];
    Ok((0..m)
        .map(|j| {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    for i in 0..b {
                        q[i] = c[[i, j, y, x]] as f64;
                        t[i] = p[[i, j, y, x]] as f64;
                    }
                    s += cell_similarity(&q, &t, None);
                }
            }
            s / (h * w) as f64
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightInit {
    Zero,
    /// Normal with std `scale / sqrt(D)`.
    Normal { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CblTrainConfig {
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: WeightInit,
    #[serde(default = "default_true")]
    pub cosine_decay: bool,
    /// Evaluate held-out loss every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

fn default_init() -> WeightInit {
    WeightInit::Normal { scale: 1.0 }
}

fn default_true() -> bool {
    true
}

impl Default for CblTrainConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            steps: 5000,
            batch_size: 256,
            validation_fraction: 0.1,
            seed: 0,
            init: default_init(),
            cosine_decay: true,
            eval_every: 0,
        }
    }
}

impl CblTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("CBL batch size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CblTrainReport {
    /// Loss of every minibatch, before the update at that step.
    pub step_losses: Vec<f64>,
    /// `(step, held-out loss)` checkpoints.
    pub validation_losses: Vec<(usize, f64)>,
    pub final_validation_loss: Option<f64>,
    /// Held-out per-concept similarity, averaged over cells.
    pub validation_concept_similarity: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Self { m: Array2::zeros(shape), v: Array2::zeros(shape), t: 0 }
    }

    fn step(&mut self, w: &mut Array2<f64>, g: &Array2<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        ndarray::Zip::from(w).and(&mut self.m).and(&mut self.v).and(g).for_each(|w, m, v, &g| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        });
    }
}

/// Gathers `[D, B*cells]` features and `[M, B*cells]` targets for `idx`,
/// columns ordered `(b, cell)`.
fn gather(bank: &FeatureBank, p: &SimilarityMatrix, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let d = bank.channels();
    let m = p.num_concepts();
    let cells = p.grid.cells();
    let mut f = Array2::zeros((d, idx.len() * cells));
    let mut t = Array2::zeros((m, idx.len() * cells));
    for (b, &n) in idx.iter().enumerate() {
        let fv = bank.values.index_axis(Axis(0), n);
        let pv = p.values.index_axis(Axis(0), n);
        for k in 0..d {
            for (cell, v) in fv.index_axis(Axis(0), k).iter().enumerate() {
                f[[k, b * cells + cell]] = *v as f64;
            }
        }
        for j in 0..m {
            for (cell, v) in pv.index_axis(Axis(0), j).iter().enumerate() {
                t[[j, b * cells + cell]] = *v as f64;
            }
        }
    }
    (f, t)
}

/// Loss and weight gradient on gathered matrices.
fn batch_loss_grad(w: &Array2<f64>, f: &Array2<f64>, t: &Array2<f64>, batch: usize, cells: usize) -> (f64, Array2<f64>) {
    let c = w.dot(f);
    let m = w.shape()[0];
    let mut dc = Array2::<f64>::zeros(c.dim());
    let mut q = vec![0f64; batch];
    let mut p = vec![0f64; batch];
    let mut g = vec![0f64; batch];
    let mut loss = 0.0;
    for j in 0..m {
        for cell in 0..cells {
            for b in 0..batch {
                q[b] = c[[j, b * cells + cell]];
                p[b] = t[[j, b * cells + cell]];
            }
            loss -= cell_similarity(&q, &p, Some(&mut g));
            for b in 0..batch {
                dc[[j, b * cells + cell]] = -g[b];
            }
        }
    }
    (loss, dc.dot(&f.t()))
}

fn eval_loss(w: &Array2<f64>, f: &Array2<f64>, t: &Array2<f64>, batch: usize, cells: usize) -> f64 {
    let c = w.dot(f);
    let mut q = vec![0f64; batch];
    let mut p = vec![0f64; batch];
    let mut loss = 0.0;
    for j in 0..w.shape()[0] {
        for cell in 0..cells {
            for b in 0..batch {
                q[b] = c[[j, b * cells + cell]];
                p[b] = t[[j, b * cells + cell]];
            }
            loss -= cell_similarity(&q, &p, None);
        }
    }
    loss
}

/// Trains the bottleneck with Adam on minibatch-centered cubic cosine.
///
/// The image order of `bank` must match `p`'s manifest. Deterministic for
/// a given seed.
pub fn train_bottleneck(
    bank: &FeatureBank,
    p: &SimilarityMatrix,
    cfg: &CblTrainConfig,
) -> Result<(BottleneckWeights, CblTrainReport)> {
    cfg.validate()?;
    if bank.image_ids != p.image_manifest {
        return Err(Error::Data("feature bank image order does not match the similarity manifest".into()));
    }
    let (gh, gw) = (p.grid.grid_h, p.grid.grid_w);
    if bank.values.shape()[2..] != [gh, gw] {
        return Err(Error::geometry("feature bank is not at grid resolution"));
    }
    let n = bank.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    if train_idx.len() < 2 * cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training images for batch size {} (need at least {})",
            train_idx.len(),
            cfg.batch_size,
            2 * cfg.batch_size
        )));
    }
    if n_val == 1 {
        return Err(Error::InsufficientData("validation split must hold at least 2 images".into()));
    }

    let (m, d, cells) = (p.num_concepts(), bank.channels(), p.grid.cells());
    let mut w = match cfg.init {
        WeightInit::Zero => Array2::zeros((m, d)),
        WeightInit::Normal { scale } => {
            let normal = Normal::new(0.0, scale / (d as f64).sqrt())
                .map_err(|e| Error::Config(format!("init scale: {e}")))?;
            Array2::from_shape_simple_fn((m, d), || normal.sample(&mut rng))
        }
    };
    let val_data = (!val_idx.is_empty()).then(|| gather(bank, p, &val_idx));
    let mut adam = Adam::new((m, d));
    let mut report = CblTrainReport {
        step_losses: Vec::with_capacity(cfg.steps),
        validation_losses: Vec::new(),
        final_validation_loss: None,
        validation_concept_similarity: Vec::new(),
        train_indices: train_idx.clone(),
        validation_indices: val_idx.clone(),
    };

    let mut cursor = train_idx.len();
    let mut perm = train_idx.clone();
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > perm.len() {
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &perm[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (f, t) = gather(bank, p, batch);
        let (loss, grad) = batch_loss_grad(&w, &f, &t, batch.len(), cells);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, message: format!("loss is {loss}") });
        }
        report.step_losses.push(loss);
        let lr = if cfg.cosine_decay {
            cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.step_size
        };
        adam.step(&mut w, &grad, lr);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            if let Some((vf, vt)) = &val_data {
                report.validation_losses.push((step + 1, eval_loss(&w, vf, vt, val_idx.len(), cells)));
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: cfg.steps, message: "weights are not finite".into() });
    }

    let weight = w.mapv(|v| v as f32);
    let weights = BottleneckWeights::new(weight, p.catalog_hash.clone(), bank.backbone_id.clone(), bank.layer_tag.clone(), (gh, gw))?;
    if let Some((vf, vt)) = &val_data {
        let wv = weights.weight.mapv(|v| v as f64);
        report.final_validation_loss = Some(eval_loss(&wv, vf, vt, val_idx.len(), cells));
        let sub_f = bank.values.select(Axis(0), &val_idx);
        let sub_p = p.values.select(Axis(0), &val_idx);
        let c = project_batch(sub_f.view(), &weights)?;
        report.validation_concept_similarity = per_concept_similarity(c.view(), sub_p.view())?;
    }
    Ok((weights, report))
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

/// JSON sidecar stored next to the weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSidecar {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub catalog_hash: String,
    pub backbone_id: String,
    pub layer_tag: String,
    pub grid: [usize; 2],
    pub blob_sha256: String,
    #[serde(default)]
    pub similarity_hash: Option<String>,
    #[serde(default)]
    pub train_config: Option<CblTrainConfig>,
    #[serde(default)]
    pub final_losses: Option<FinalLosses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub train: Option<f64>,
    pub validation: Option<f64>,
}

impl BottleneckWeights {
    pub fn sidecar(&self) -> BottleneckSidecar {
        BottleneckSidecar {
            m: self.num_concepts(),
            d: self.feature_dim(),
            catalog_hash: self.catalog_hash.clone(),
            backbone_id: self.backbone_id.clone(),
            layer_tag: self.layer_tag.clone(),
            grid: [self.grid.0, self.grid.1],
            blob_sha256: self.checksum(),
            similarity_hash: None,
            train_config: None,
            final_losses: None,
        }
    }

    /// Writes `<blob>` (M x D f32le, row-major) and its JSON sidecar.
    pub fn save(&self, blob_path: &Path, sidecar_path: &Path, sidecar: &BottleneckSidecar) -> Result<()> {
        write_atomic(blob_path, &self.blob())?;
        let mut bytes = serde_json::to_vec_pretty(sidecar)?;
        bytes.push(b'\n');
        write_atomic(sidecar_path, &bytes)
    }

    /// Loads and verifies the blob against its sidecar checksum.
    pub fn load(blob_path: &Path, sidecar_path: &Path) -> Result<(Self, BottleneckSidecar)> {
        let sidecar: BottleneckSidecar = serde_json::from_slice(&read_artifact(sidecar_path)?)?;
        let blob = read_artifact(blob_path)?;
        let found = sha256_hex(&blob);
        if found != sidecar.blob_sha256 {
            return Err(Error::Provenance {
                artifact: format!("bottleneck weights {}", blob_path.display()),
                expected: sidecar.blob_sha256,
                found,
            });
        }
        let values = le_bytes_to_f32s(&blob)?;
        if values.len() != sidecar.m * sidecar.d {
            return Err(Error::integrity(format!(
                "bottleneck blob holds {} values, sidecar declares {}x{}",
                values.len(),
                sidecar.m,
                sidecar.d
            )));
        }
        let weight = Array2::from_shape_vec((sidecar.m, sidecar.d), values).expect("sizes agree");
        let w = Self::new(
            weight,
            sidecar.catalog_hash.clone(),
            sidecar.backbone_id.clone(),
            sidecar.layer_tag.clone(),
            (sidecar.grid[0], sidecar.grid[1]),
        )?;
        Ok((w, sidecar))
    }
}
