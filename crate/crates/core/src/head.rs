// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse linear head over pooled, standardized concept activations.
//!
//! The head minimizes
//!
//! ```text
//! sum_n CE(W a_n + b, y_n) + lambda * ((1 - alpha) / 2 * ||W||_F^2 + alpha * ||W||_1)
//! ```
//!
//! with an unregularized bias, using either accelerated full-batch proximal
//! gradient (FISTA with backtracking and adaptive restart) or SAGA.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::ConceptMaps;
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, le_bytes_to_f32s, read_artifact, sha256_hex, write_atomic};

/// Floor applied to per-concept standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

pub const HEAD_SIDECAR: &str = "head.json";
pub const HEAD_WEIGHTS: &str = "head_weights.coo";
pub const HEAD_BIAS: &str = "head_bias.bin";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

/// Global activation per concept.
pub fn pool(maps: &ConceptMaps, mode: PoolMode) -> Array1<f64> {
    maps.values
        .outer_iter()
        .map(|plane| match mode {
            PoolMode::Mean => plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64,
            PoolMode::Max => plane.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActivationStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if a.len() != self.len() {
            return Err(Error::geometry(format!("{} activations for {} concepts", a.len(), self.len())));
        }
        Ok(Array1::from_shape_fn(a.len(), |m| (a[m] - self.mean[m]) / self.std[m]))
    }

    pub fn normalize_rows(&self, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if a.ncols() != self.len() {
            return Err(Error::geometry(format!("{} activation columns for {} concepts", a.ncols(), self.len())));
        }
        Ok(Array2::from_shape_fn(a.dim(), |(n, m)| (a[[n, m]] - self.mean[m]) / self.std[m]))
    }
}

/// Per-concept mean and population standard deviation over `[N, M]` rows.
pub fn fit_stats(pooled: ArrayView2<'_, f64>) -> Result<ActivationStats> {
    let n = pooled.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("activation statistics need N >= 2, got {n}")));
    }
    let mean: Vec<f64> = pooled.axis_iter(Axis(1)).map(|c| c.sum() / n as f64).collect();
    let std = pooled
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, mu)| {
            let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    Ok(ActivationStats { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNet {
    pub alpha: f64,
    pub lambda: f64,
}

impl ElasticNet {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }

    pub fn penalty(&self, w: ArrayView2<'_, f64>) -> f64 {
        let l2: f64 = w.iter().map(|v| v * v).sum();
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        self.lambda * ((1.0 - self.alpha) * 0.5 * l2 + self.alpha * l1)
    }

    /// Proximal map of `step * penalty` at scalar `w`.
    pub fn prox(&self, w: f64, step: f64) -> f64 {
        let shrunk = w.signum() * (w.abs() - step * self.lambda * self.alpha).max(0.0);
        shrunk / (1.0 + step * self.lambda * (1.0 - self.alpha))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSolver {
    #[default]
    ProxGradient,
    Saga,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default)]
    pub solver: HeadSolver,
    /// Iterations (proximal gradient) or epochs (SAGA).
    pub max_iter: usize,
    /// Stop once the KKT residual drops to this value.
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { solver: HeadSolver::ProxGradient, max_iter: 50_000, tol: 1e-7, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solver: HeadSolver,
    pub iterations: usize,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub converged: bool,
}

/// Dense head parameters, `w` is `[L, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(num_classes: usize, num_concepts: usize) -> Self {
        Self { w: Array2::zeros((num_classes, num_concepts)), b: Array1::zeros(num_classes) }
    }
}

fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let mx = z.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Summed cross-entropy and, optionally, the softmax residual `P - Y` `[N, L]`.
fn cross_entropy(x: ArrayView2<'_, f64>, y: &[usize], p: &HeadParams, residual: bool) -> (f64, Option<Array2<f64>>) {
    let mut z = x.dot(&p.w.t());
    z += &p.b;
    let mut loss = 0.0;
    for (n, row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let lse = log_sum_exp(row.view());
        loss += lse - row[y[n]];
        if residual {
            let mut row = row;
            row.mapv_inplace(|v| (v - lse).exp());
            row[y[n]] -= 1.0;
        }
    }
    (loss, residual.then_some(z))
}

fn gradient(x: ArrayView2<'_, f64>, residual: &Array2<f64>) -> HeadParams {
    HeadParams { w: residual.t().dot(&x), b: residual.sum_axis(Axis(0)) }
}

/// Full objective value.
pub fn objective(x: ArrayView2<'_, f64>, y: &[usize], p: &HeadParams, reg: &ElasticNet) -> f64 {
    cross_entropy(x, y, p, false).0 + reg.penalty(p.w.view())
}

/// Largest violation of the elastic-net optimality conditions.
pub fn kkt_residual(x: ArrayView2<'_, f64>, y: &[usize], p: &HeadParams, reg: &ElasticNet) -> f64 {
    let (_, r) = cross_entropy(x, y, p, true);
    let g = gradient(x, &r.expect("residual requested"));
    let l1 = reg.lambda * reg.alpha;
    let l2 = reg.lambda * (1.0 - reg.alpha);
    let mut worst = g.b.iter().fold(0f64, |a, v| a.max(v.abs()));
    for (gw, &w) in g.w.iter().zip(p.w.iter()) {
        let smooth = gw + l2 * w;
        let v = if w == 0.0 { (smooth.abs() - l1).max(0.0) } else { (smooth + l1 * w.signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

fn check_problem(x: ArrayView2<'_, f64>, y: &[usize], num_classes: usize, reg: &ElasticNet) -> Result<()> {
    reg.validate()?;
    if num_classes < 2 {
        return Err(Error::InvalidTask(format!("a classifier needs at least 2 classes, got {num_classes}")));
    }
    if x.nrows() != y.len() {
        return Err(Error::geometry(format!("{} activation rows for {} labels", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    if let Some((n, l)) = y.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::Data(format!("label {l} of sample {n} is outside 0..{num_classes}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("activations contain non-finite values".into()));
    }
    Ok(())
}

/// Solves the elastic-net multinomial problem from `warm` (or zeros).
pub fn solve(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    reg: &ElasticNet,
    cfg: &SolverConfig,
    warm: Option<&HeadParams>,
) -> Result<(HeadParams, SolverReport)> {
    check_problem(x, y, num_classes, reg)?;
    let start = match warm {
        Some(p) if p.w.dim() == (num_classes, x.ncols()) && p.b.len() == num_classes => p.clone(),
        Some(_) => return Err(Error::geometry("warm start has the wrong shape")),
        None => HeadParams::zeros(num_classes, x.ncols()),
    };
    match cfg.solver {
        HeadSolver::ProxGradient => fista(x, y, reg, cfg, start),
        HeadSolver::Saga => saga(x, y, reg, cfg, start),
    }
}

fn prox_step(p: &HeadParams, g: &HeadParams, step: f64, reg: &ElasticNet) -> HeadParams {
    let w = ndarray::Zip::from(&p.w).and(&g.w).map_collect(|&w, &gw| reg.prox(w - step * gw, step));
    let b = &p.b - &(&g.b * step);
    HeadParams { w, b }
}

fn fista(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    reg: &ElasticNet,
    cfg: &SolverConfig,
    start: HeadParams,
) -> Result<(HeadParams, SolverReport)> {
    let mut cur = start;
    let mut f_cur = objective(x, y, &cur, reg);
    let mut ahead = cur.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut trace = vec![f_cur];
    let mut kkt = kkt_residual(x, y, &cur, reg);
    let mut iterations = 0;
    while iterations < cfg.max_iter && kkt > cfg.tol {
        iterations += 1;
        let (f_ahead, r) = cross_entropy(x, y, &ahead, true);
        let g = gradient(x, &r.expect("residual requested"));
        if !f_ahead.is_finite() {
            return Err(Error::Divergence { step: iterations, message: "non-finite cross-entropy".into() });
        }
        let next = loop {
            let cand = prox_step(&ahead, &g, 1.0 / lip, reg);
            let dw = &cand.w - &ahead.w;
            let db = &cand.b - &ahead.b;
            let lin = (&g.w * &dw).sum() + (&g.b * &db).sum();
            let sq = dw.iter().map(|v| v * v).sum::<f64>() + db.iter().map(|v| v * v).sum::<f64>();
            let f_cand = cross_entropy(x, y, &cand, false).0;
            if f_cand <= f_ahead + lin + 0.5 * lip * sq + 1e-12 * f_ahead.abs().max(1.0) {
                break cand;
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return Err(Error::Divergence { step: iterations, message: "step size collapsed".into() });
            }
        };
        let f_next = objective(x, y, &next, reg);
        if !f_next.is_finite() {
            return Err(Error::Divergence { step: iterations, message: "non-finite objective".into() });
        }
        // Gradient-based restart: drop momentum once it points uphill.
        let uphill = ((&ahead.w - &next.w) * (&next.w - &cur.w)).sum() + ((&ahead.b - &next.b) * (&next.b - &cur.b)).sum();
        let t_next = if uphill > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let mom = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        ahead = HeadParams { w: &next.w + &((&next.w - &cur.w) * mom), b: &next.b + &((&next.b - &cur.b) * mom) };
        t = t_next;
        cur = next;
        f_cur = f_next;
        trace.push(f_cur);
        lip *= 0.95;
        kkt = kkt_residual(x, y, &cur, reg);
    }
    Ok((
        cur,
        SolverReport {
            solver: HeadSolver::ProxGradient,
            iterations,
            objective: f_cur,
            objective_trace: trace,
            kkt_residual: kkt,
            converged: kkt <= cfg.tol,
        },
    ))
}

fn saga(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    reg: &ElasticNet,
    cfg: &SolverConfig,
    start: HeadParams,
) -> Result<(HeadParams, SolverReport)> {
    let (n, m) = x.dim();
    let l = start.b.len();
    // Work on the mean-scaled objective: CE / N and lambda / N.
    let scaled = ElasticNet { alpha: reg.alpha, lambda: reg.lambda / n as f64 };
    let max_sq = x.outer_iter().map(|r| r.dot(&r) + 1.0).fold(0f64, f64::max);
    let step = 1.0 / (3.0 * 0.5 * max_sq);
    let mut p = start;
    let (_, r) = cross_entropy(x, y, &p, true);
    let mut memory = r.expect("residual requested");
    let mut avg = gradient(x, &memory);
    avg.w /= n as f64;
    avg.b /= n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = vec![objective(x, y, &p, reg)];
    let mut kkt = kkt_residual(x, y, &p, reg);
    let mut epochs = 0;
    let mut z = Array1::<f64>::zeros(l);
    while epochs < cfg.max_iter && kkt > cfg.tol {
        epochs += 1;
        order.shuffle(&mut rng);
        for &j in &order {
            let xj = x.row(j);
            z.assign(&p.w.dot(&xj));
            z += &p.b;
            let lse = log_sum_exp(z.view());
            let mut fresh = z.mapv(|v| (v - lse).exp());
            fresh[y[j]] -= 1.0;
            let delta = &fresh - &memory.row(j);
            for c in 0..l {
                for k in 0..m {
                    let dir = delta[c] * xj[k] + avg.w[[c, k]];
                    p.w[[c, k]] = scaled.prox(p.w[[c, k]] - step * dir, step);
                }
                p.b[c] -= step * (delta[c] + avg.b[c]);
            }
            for c in 0..l {
                for k in 0..m {
                    avg.w[[c, k]] += delta[c] * xj[k] / n as f64;
                }
                avg.b[c] += delta[c] / n as f64;
            }
            memory.row_mut(j).assign(&fresh);
        }
        let f = objective(x, y, &p, reg);
        if !f.is_finite() {
            return Err(Error::Divergence { step: epochs, message: "non-finite objective".into() });
        }
        trace.push(f);
        kkt = kkt_residual(x, y, &p, reg);
    }
    let objective = *trace.last().expect("non-empty trace");
    Ok((
        p,
        SolverReport {
            solver: HeadSolver::Saga,
            iterations: epochs,
            objective,
            objective_trace: trace,
            kkt_residual: kkt,
            converged: kkt <= cfg.tol,
        },
    ))
}

// ---------------------------------------------------------------------------
// Trained head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub y_hat: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseHead {
    /// `[L, M]`, values representable in f32.
    weight: Array2<f64>,
    bias: Array1<f64>,
    pub stats: ActivationStats,
    pub reg: ElasticNet,
    pub pool: PoolMode,
    pub catalog_hash: String,
    /// Upstream artifact hashes and seeds stamped by the caller.
    pub provenance: BTreeMap<String, String>,
}

impl SparseHead {
    /// Builds a head, rounding parameters to f32 so the stored form is exact.
    pub fn new(
        params: HeadParams,
        stats: ActivationStats,
        reg: ElasticNet,
        pool: PoolMode,
        catalog_hash: impl Into<String>,
    ) -> Result<Self> {
        reg.validate()?;
        let (l, m) = params.w.dim();
        if params.b.len() != l || stats.len() != m || stats.std.len() != m {
            return Err(Error::geometry("head parameters and statistics disagree in shape"));
        }
        if params.w.iter().chain(params.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("head parameters are not finite".into()));
        }
        if stats.std.iter().any(|&s| !(s >= STD_FLOOR)) {
            return Err(Error::Data("activation std below floor".into()));
        }
        Ok(Self {
            // `+ 0.0` folds negative zeros left by the prox into +0.
            weight: params.w.mapv(|v| v as f32 as f64 + 0.0),
            bias: params.b.mapv(|v| v as f32 as f64 + 0.0),
            stats,
            reg,
            pool,
            catalog_hash: catalog_hash.into(),
            provenance: BTreeMap::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.weight.ncols()
    }

    /// `W[m, l]`: weight of concept `m` for class `l`.
    pub fn weight(&self, m: usize, l: usize) -> f64 {
        self.weight[[l, m]]
    }

    /// `[L, M]` view.
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weight.view()
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.bias.view()
    }

    pub fn nnz(&self) -> usize {
        self.weight.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn params(&self) -> HeadParams {
        HeadParams { w: self.weight.clone(), b: self.bias.clone() }
    }

    pub fn logits_normalized(&self, a_hat: ArrayView1<'_, f64>) -> Vec<f64> {
        (0..self.num_classes()).map(|l| self.weight.row(l).dot(&a_hat) + self.bias[l]).collect()
    }

    /// Normalizes pooled activations and applies the linear layer.
    pub fn predict(&self, pooled: ArrayView1<'_, f64>) -> Result<Prediction> {
        let a_hat = self.stats.normalize(pooled)?;
        let logits = self.logits_normalized(a_hat.view());
        let y_hat = argmax(&logits);
        Ok(Prediction { logits, y_hat })
    }

    pub fn predict_maps(&self, maps: &ConceptMaps) -> Result<Prediction> {
        self.predict(pool(maps, self.pool).view())
    }

    pub fn sidecar(&self) -> HeadSidecar {
        HeadSidecar {
            l: self.num_classes(),
            m: self.num_concepts(),
            alpha: self.reg.alpha,
            lambda: self.reg.lambda,
            nnz: self.nnz(),
            catalog_hash: self.catalog_hash.clone(),
            pool: self.pool,
            stats: self.stats.clone(),
            weights_sha256: sha256_hex(&self.coo_bytes()),
            bias_sha256: sha256_hex(&self.bias_bytes()),
            provenance: self.provenance.clone(),
        }
    }

    fn coo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.nnz() * 12);
        for ((l, m), &v) in self.weight.indexed_iter() {
            if v != 0.0 {
                out.extend_from_slice(&(m as i32).to_le_bytes());
                out.extend_from_slice(&(l as i32).to_le_bytes());
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    fn bias_bytes(&self) -> Vec<u8> {
        f32s_to_le_bytes(self.bias.iter().map(|&v| v as f32))
    }

    /// Content hash over the sidecar (which covers weights and bias).
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.sidecar()).expect("sidecar serializes"))
    }

    /// Writes the sidecar, COO weights (concept row, class col) and bias into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(HEAD_WEIGHTS), &self.coo_bytes())?;
        write_atomic(&dir.join(HEAD_BIAS), &self.bias_bytes())?;
        let mut side = serde_json::to_vec_pretty(&self.sidecar())?;
        side.push(b'\n');
        write_atomic(&dir.join(HEAD_SIDECAR), &side)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: HeadSidecar = serde_json::from_slice(&read_artifact(&dir.join(HEAD_SIDECAR))?)?;
        let coo = read_artifact(&dir.join(HEAD_WEIGHTS))?;
        let bias = read_artifact(&dir.join(HEAD_BIAS))?;
        for (name, bytes, expected) in
            [(HEAD_WEIGHTS, &coo, &side.weights_sha256), (HEAD_BIAS, &bias, &side.bias_sha256)]
        {
            let found = sha256_hex(bytes);
            if &found != expected {
                return Err(Error::Provenance { artifact: name.into(), expected: expected.clone(), found });
            }
        }
        if coo.len() % 12 != 0 {
            return Err(Error::integrity("COO weight file length is not a multiple of 12"));
        }
        let mut w = Array2::zeros((side.l, side.m));
        for rec in coo.chunks_exact(12) {
            let m = i32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
            let l = i32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
            let v = f32::from_le_bytes(rec[8..12].try_into().expect("4 bytes"));
            if m < 0 || l < 0 || m as usize >= side.m || l as usize >= side.l {
                return Err(Error::integrity(format!("COO entry ({m}, {l}) out of range")));
            }
            w[[l as usize, m as usize]] = v as f64;
        }
        let b: Vec<f64> = le_bytes_to_f32s(&bias)?.into_iter().map(f64::from).collect();
        if b.len() != side.l {
            return Err(Error::integrity(format!("bias holds {} values, expected {}", b.len(), side.l)));
        }
        let mut head = Self::new(
            HeadParams { w, b: Array1::from(b) },
            side.stats.clone(),
            ElasticNet { alpha: side.alpha, lambda: side.lambda },
            side.pool,
            side.catalog_hash.clone(),
        )?;
        head.provenance = side.provenance.clone();
        if head.nnz() != side.nnz {
            return Err(Error::integrity(format!("sidecar nnz {} but file holds {}", side.nnz, head.nnz())));
        }
        Ok(head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSidecar {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub nnz: usize,
    pub catalog_hash: String,
    pub pool: PoolMode,
    pub stats: ActivationStats,
    pub weights_sha256: String,
    pub bias_sha256: String,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Standardizes `pooled`, then fits a head with the given regularization.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    pooled: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    reg: ElasticNet,
    pool_mode: PoolMode,
    cfg: &SolverConfig,
    catalog_hash: &str,
) -> Result<(SparseHead, SolverReport)> {
    let stats = fit_stats(pooled)?;
    let x = stats.normalize_rows(pooled)?;
    let (params, report) = solve(x.view(), labels, num_classes, &reg, cfg, None)?;
    Ok((SparseHead::new(params, stats, reg, pool_mode, catalog_hash)?, report))
}

pub fn accuracy(head: &SparseHead, x_hat: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = x_hat
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(&head.logits_normalized(*row)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub nnz: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub kkt_residual: f64,
    pub objective: f64,
}

/// One head per `lambda` (ascending), each warm-started from the previous.
#[allow(clippy::too_many_arguments)]
pub fn regularization_path(
    pooled: ArrayView2<'_, f64>,
    labels: &[usize],
    validation: Option<(ArrayView2<'_, f64>, &[usize])>,
    num_classes: usize,
    alpha: f64,
    lambdas: &[f64],
    pool_mode: PoolMode,
    cfg: &SolverConfig,
    catalog_hash: &str,
) -> Result<(Vec<SparseHead>, Vec<PathEntry>)> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("lambda grid must be sorted ascending".into()));
    }
    let stats = fit_stats(pooled)?;
    let x = stats.normalize_rows(pooled)?;
    let x_val = match validation {
        Some((v, y)) => Some((stats.normalize_rows(v)?, y)),
        None => None,
    };
    let mut heads = Vec::with_capacity(lambdas.len());
    let mut table = Vec::with_capacity(lambdas.len());
    let mut warm: Option<HeadParams> = None;
    for &lambda in lambdas {
        let reg = ElasticNet { alpha, lambda };
        let (params, report) = solve(x.view(), labels, num_classes, &reg, cfg, warm.as_ref())?;
        warm = Some(params.clone());
        let head = SparseHead::new(params, stats.clone(), reg, pool_mode, catalog_hash)?;
        table.push(PathEntry {
            lambda,
            nnz: head.nnz(),
            train_accuracy: accuracy(&head, x.view(), labels),
            validation_accuracy: x_val.as_ref().map(|(v, y)| accuracy(&head, v.view(), y)),
            kkt_residual: report.kkt_residual,
            objective: report.objective,
        });
        heads.push(head);
    }
    Ok((heads, table))
}
