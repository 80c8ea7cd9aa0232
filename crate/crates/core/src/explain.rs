// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-time explanations: class rules, contribution scores, concept
//! heatmaps, region queries and concept-map interventions.
//!
//! Everything here is a pure function of concept maps and a trained head.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::resize::resize_plane;
use crate::bottleneck::ConceptMaps;
use crate::catalog::ConceptCatalog;
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, write_atomic};
use crate::head::{pool, Prediction, SparseHead};

fn check_class(head: &SparseHead, l: usize) -> Result<()> {
    if l >= head.num_classes() {
        return Err(Error::Range(format!("class index {l} outside 0..{}", head.num_classes())));
    }
    Ok(())
}

fn check_concept(m: usize, num: usize) -> Result<()> {
    if m >= num {
        return Err(Error::Range(format!("concept index {m} outside 0..{num}")));
    }
    Ok(())
}

/// Descending by `key`, ascending index on ties.
fn rank_desc(items: &mut [(usize, f64)], key: impl Fn(f64) -> f64) {
    items.sort_by(|a, b| key(b.1).total_cmp(&key(a.1)).then(a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRule {
    pub concept: usize,
    pub weight: f64,
}

/// Nonzero weights of class `l`, largest magnitude first.
pub fn class_rules(head: &SparseHead, l: usize) -> Result<Vec<ClassRule>> {
    check_class(head, l)?;
    let mut items: Vec<(usize, f64)> =
        (0..head.num_concepts()).map(|m| (m, head.weight(m, l))).filter(|(_, w)| *w != 0.0).collect();
    rank_desc(&mut items, f64::abs);
    Ok(items.into_iter().map(|(concept, weight)| ClassRule { concept, weight }).collect())
}

/// One edge of a concept-to-class flow diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyEdge {
    pub source_concept: String,
    pub target_class: String,
    pub weight: f64,
}

pub fn sankey_edges(head: &SparseHead, catalog: &ConceptCatalog, l: usize) -> Result<Vec<SankeyEdge>> {
    let class = catalog
        .classes
        .get(l)
        .ok_or_else(|| Error::Range(format!("class index {l} outside 0..{}", catalog.classes.len())))?;
    Ok(class_rules(head, l)?
        .into_iter()
        .map(|r| SankeyEdge {
            source_concept: catalog.concepts[r.concept].clone(),
            target_class: class.clone(),
            weight: r.weight,
        })
        .collect())
}

/// `S[m] = W[m, l] * (c*[m] - mu[m]) / sigma[m]`, exactly 0 where `W[m, l] = 0`.
pub fn contribution_scores(pooled: &[f64], head: &SparseHead, l: usize) -> Result<Vec<f64>> {
    check_class(head, l)?;
    if pooled.len() != head.num_concepts() {
        return Err(Error::geometry(format!("{} activations for {} concepts", pooled.len(), head.num_concepts())));
    }
    let st = &head.stats;
    Ok((0..pooled.len())
        .map(|m| {
            let w = head.weight(m, l);
            if w == 0.0 {
                0.0
            } else {
                w * ((pooled[m] - st.mean[m]) / st.std[m])
            }
        })
        .collect())
}

/// Bilinear (align-corners) upsampling of concept map `m`.
pub fn concept_heatmap(maps: &ConceptMaps, m: usize, out_h: usize, out_w: usize) -> Result<Array2<f32>> {
    check_concept(m, maps.num_concepts())?;
    Ok(resize_plane(maps.values.index_axis(Axis(0), m), out_h, out_w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopConcept {
    pub m: usize,
    pub concept: String,
    pub score: f64,
    pub heatmap_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    pub y_hat: usize,
    pub logits: Vec<f64>,
    pub k: usize,
    pub top_k: Vec<TopConcept>,
}

impl Explanation {
    pub fn with_heatmap_refs(mut self, f: impl Fn(usize) -> String) -> Self {
        for t in &mut self.top_k {
            t.heatmap_ref = f(t.m);
        }
        self
    }
}

/// Default heatmap file name for concept `m`.
pub fn heatmap_file(m: usize) -> String {
    format!("heatmap_{m:05}.png")
}

/// Builds the explanation for an already computed prediction.
///
/// Only concepts with a nonzero weight for the predicted class are eligible;
/// they are ranked by `|S|`, ties by concept index.
pub fn explain_prediction(
    image_id: &str,
    pooled: &[f64],
    prediction: &Prediction,
    head: &SparseHead,
    catalog: &ConceptCatalog,
    k: usize,
) -> Result<Explanation> {
    let l = prediction.y_hat;
    let scores = contribution_scores(pooled, head, l)?;
    let mut items: Vec<(usize, f64)> =
        (0..scores.len()).filter(|&m| head.weight(m, l) != 0.0).map(|m| (m, scores[m])).collect();
    rank_desc(&mut items, f64::abs);
    items.truncate(k);
    Ok(Explanation {
        image_id: image_id.into(),
        y_hat: l,
        logits: prediction.logits.clone(),
        k,
        top_k: items
            .into_iter()
            .map(|(m, score)| TopConcept {
                m,
                concept: catalog.concepts.get(m).cloned().unwrap_or_default(),
                score,
                heatmap_ref: heatmap_file(m),
            })
            .collect(),
    })
}

/// Pools the maps, predicts, and explains from that single pass.
pub fn explain_maps(
    image_id: &str,
    maps: &ConceptMaps,
    head: &SparseHead,
    catalog: &ConceptCatalog,
    k: usize,
) -> Result<Explanation> {
    let pooled = pool(maps, head.pool);
    let prediction = head.predict(pooled.view())?;
    explain_prediction(image_id, pooled.as_slice().expect("contiguous"), &prediction, head, catalog, k)
}

// ---------------------------------------------------------------------------
// Region masks
// ---------------------------------------------------------------------------

/// How an image-resolution mask was reduced to the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMask {
    /// `[H, W]` with values in {0, 1}.
    pub mask: Array2<u8>,
    /// Always `"cell_majority"`: a cell is set when at least half of the
    /// pixels nearest to it are set.
    pub downsampling: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    /// `[H~, W~]` with values in {0, 1}.
    pub grid: Array2<u8>,
    pub source: Option<SourceMask>,
}

fn check_binary(mask: &Array2<u8>) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::invalid("mask values must be 0 or 1"));
    }
    Ok(())
}

/// Grid cell nearest to pixel `i` of `n` along an axis of `g` cells.
fn nearest_cell(i: usize, n: usize, g: usize) -> usize {
    if n <= 1 || g <= 1 {
        return 0;
    }
    ((i as f64 * (g - 1) as f64 / (n - 1) as f64).round() as usize).min(g - 1)
}

/// Cell-majority downsampling of an image-resolution mask.
pub fn downsample_mask(mask: &Array2<u8>, grid_h: usize, grid_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut on = Array2::<usize>::zeros((grid_h, grid_w));
    let mut total = Array2::<usize>::zeros((grid_h, grid_w));
    for ((y, x), &v) in mask.indexed_iter() {
        let cell = (nearest_cell(y, h, grid_h), nearest_cell(x, w, grid_w));
        total[cell] += 1;
        on[cell] += (v != 0) as usize;
    }
    Array2::from_shape_fn((grid_h, grid_w), |c| (total[c] > 0 && 2 * on[c] >= total[c]) as u8)
}

impl RoiMask {
    pub fn from_grid(grid: Array2<u8>) -> Result<Self> {
        check_binary(&grid)?;
        Ok(Self { grid, source: None })
    }

    /// Sets the listed `(row, col)` cells.
    pub fn from_cells(grid_h: usize, grid_w: usize, cells: &[(usize, usize)]) -> Result<Self> {
        let mut grid = Array2::zeros((grid_h, grid_w));
        for &(r, c) in cells {
            if r >= grid_h || c >= grid_w {
                return Err(Error::Range(format!("cell ({r}, {c}) outside {grid_h}x{grid_w} grid")));
            }
            grid[[r, c]] = 1;
        }
        Ok(Self { grid, source: None })
    }

    pub fn from_image(mask: Array2<u8>, grid_h: usize, grid_w: usize) -> Result<Self> {
        check_binary(&mask)?;
        let grid = downsample_mask(&mask, grid_h, grid_w);
        Ok(Self { grid, source: Some(SourceMask { mask, downsampling: "cell_majority".into() }) })
    }

    /// Nonzero pixels of an 8-bit image become foreground.
    pub fn from_png_bytes(bytes: &[u8], grid_h: usize, grid_w: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        let mask = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| (img.get_pixel(x as u32, y as u32).0[0] != 0) as u8);
        Self::from_image(mask, grid_h, grid_w)
    }

    pub fn cell_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_count() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiResolution {
    Grid,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiConcept {
    pub m: usize,
    pub concept: String,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiResult {
    pub resolution: RoiResolution,
    pub k: usize,
    pub top_k: Vec<RoiConcept>,
}

/// Ranks concepts by their summed activation inside the mask.
///
/// With an image-resolution source mask the maps are first upsampled to
/// that resolution; otherwise the grid mask is used on the grid maps.
/// `std` divides each aggregate by the concept's activation std when given.
pub fn explain_anything(
    maps: &ConceptMaps,
    mask: &RoiMask,
    k: usize,
    catalog: Option<&ConceptCatalog>,
    std: Option<&[f64]>,
) -> Result<RoiResult> {
    let (resolution, agg) = match &mask.source {
        Some(src) => {
            if src.mask.iter().all(|&v| v == 0) {
                return Err(Error::EmptyRoi);
            }
            let (h, w) = src.mask.dim();
            let agg: Vec<f64> = (0..maps.num_concepts())
                .map(|m| {
                    let up = resize_plane(maps.values.index_axis(Axis(0), m), h, w);
                    up.iter().zip(src.mask.iter()).filter(|(_, &i)| i != 0).map(|(&v, _)| v as f64).sum()
                })
                .collect();
            (RoiResolution::Image, agg)
        }
        None => {
            if mask.grid.dim() != maps.grid_dims() {
                return Err(Error::geometry(format!(
                    "mask is {:?}, concept maps are {:?}",
                    mask.grid.dim(),
                    maps.grid_dims()
                )));
            }
            if mask.is_empty() {
                return Err(Error::EmptyRoi);
            }
            let agg: Vec<f64> = maps
                .values
                .outer_iter()
                .map(|plane| {
                    plane.iter().zip(mask.grid.iter()).filter(|(_, &i)| i != 0).map(|(&v, _)| v as f64).sum()
                })
                .collect();
            (RoiResolution::Grid, agg)
        }
    };
    let mut items: Vec<(usize, f64)> = agg
        .into_iter()
        .enumerate()
        .map(|(m, a)| (m, std.map_or(a, |s| a / s[m])))
        .collect();
    rank_desc(&mut items, |a| a);
    items.truncate(k);
    Ok(RoiResult {
        resolution,
        k,
        top_k: items
            .into_iter()
            .map(|(m, aggregate)| RoiConcept {
                m,
                concept: catalog.and_then(|c| c.concepts.get(m).cloned()).unwrap_or_default(),
                aggregate,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub concept: usize,
    pub mask: RoiMask,
    pub beta: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub session_id: String,
}

impl EditRecord {
    pub fn new(concept: usize, mask: RoiMask, beta: f64, session_id: impl Into<String>) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self { concept, mask, beta, timestamp, session_id: session_id.into() }
    }
}

/// `c[m] += beta * I` for each edit, in order, on a copy of the maps.
pub fn intervene(maps: &ConceptMaps, edits: &[EditRecord]) -> Result<ConceptMaps> {
    let mut out = maps.values.clone();
    for e in edits {
        check_concept(e.concept, maps.num_concepts())?;
        if !e.beta.is_finite() {
            return Err(Error::invalid(format!("edit beta {} is not finite", e.beta)));
        }
        if e.mask.grid.dim() != maps.grid_dims() {
            return Err(Error::geometry(format!(
                "edit mask is {:?}, concept maps are {:?}",
                e.mask.grid.dim(),
                maps.grid_dims()
            )));
        }
        let beta = e.beta as f32;
        let mut plane = out.index_axis_mut(Axis(0), e.concept);
        ndarray::Zip::from(&mut plane).and(&e.mask.grid).for_each(|v, &i| {
            if i != 0 {
                *v += beta;
            }
        });
    }
    ConceptMaps::new(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub old_y_hat: usize,
    pub new_y_hat: usize,
    pub old_logits: Vec<f64>,
    pub new_logits: Vec<f64>,
    pub logit_deltas: Vec<f64>,
    pub explanation: Explanation,
}

/// Applies the edits, then re-pools and re-predicts.
pub fn what_if(
    image_id: &str,
    maps: &ConceptMaps,
    edits: &[EditRecord],
    head: &SparseHead,
    catalog: &ConceptCatalog,
    k: usize,
) -> Result<WhatIf> {
    let old = head.predict_maps(maps)?;
    let edited = intervene(maps, edits)?;
    let explanation = explain_maps(image_id, &edited, head, catalog, k)?;
    let logit_deltas = explanation.logits.iter().zip(&old.logits).map(|(n, o)| n - o).collect();
    Ok(WhatIf {
        old_y_hat: old.y_hat,
        new_y_hat: explanation.y_hat,
        old_logits: old.logits,
        new_logits: explanation.logits.clone(),
        logit_deltas,
        explanation,
    })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Min-max normalization applied when writing an 8-bit heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub height: usize,
    pub width: usize,
    pub min: f32,
    pub max: f32,
    /// `pixel = round(255 * (v - min) / (max - min))`, all 0 when `max == min`.
    pub normalization: String,
}

pub fn heatmap_to_gray(heatmap: &Array2<f32>) -> (GrayImage, HeatmapSidecar) {
    let (h, w) = heatmap.dim();
    let min = heatmap.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = heatmap.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (max - min) as f64;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = heatmap[[y as usize, x as usize]];
        let p = if span > 0.0 { (255.0 * (v - min) as f64 / span).round() } else { 0.0 };
        Luma([p.clamp(0.0, 255.0) as u8])
    });
    let side = HeatmapSidecar { height: h, width: w, min, max, normalization: "min_max_u8".into() };
    (img, side)
}

pub fn heatmap_png_bytes(heatmap: &Array2<f32>) -> Result<(Vec<u8>, HeatmapSidecar)> {
    let (img, side) = heatmap_to_gray(heatmap);
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok((buf.into_inner(), side))
}

/// Writes `<path>` as PNG and `<path>.json` with the normalization record.
pub fn export_heatmap_png(path: &Path, heatmap: &Array2<f32>) -> Result<HeatmapSidecar> {
    let (bytes, side) = heatmap_png_bytes(heatmap)?;
    write_atomic(path, &bytes)?;
    let mut side_path = path.as_os_str().to_owned();
    side_path.push(".json");
    write_atomic(Path::new(&side_path), &serde_json::to_vec_pretty(&side)?)?;
    Ok(side)
}

/// Raw heatmap: `u32le height, u32le width`, then row-major f32le values.
pub fn heatmap_raw_bytes(heatmap: &Array2<f32>) -> Vec<u8> {
    let (h, w) = heatmap.dim();
    let mut out = Vec::with_capacity(8 + 4 * h * w);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend(f32s_to_le_bytes(heatmap.iter().copied()));
    out
}

pub fn heatmap_from_raw_bytes(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 8 {
        return Err(Error::integrity("raw heatmap shorter than its header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let vals = crate::fsutil::le_bytes_to_f32s(&bytes[8..])?;
    Array2::from_shape_vec((h, w), vals).map_err(|_| Error::integrity("raw heatmap size does not match its header"))
}
