// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial image-concept similarity targets.
//!
//! For every training image and every grid location, a red circle is drawn
//! around the location and the prompted image is embedded. The cosine
//! between that embedding and each concept's text embedding becomes
//! `P[n, m, h, w]`, the regression target for the concept bottleneck.

pub mod encoder;
pub mod grid;
pub mod prompt;
pub mod store;

use std::sync::Mutex;

use image::RgbImage;
use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::ConceptCatalog;
use crate::error::{Error, Result};
use encoder::{cosine, EmbeddingClient};
use grid::{make_grid_anchored, GridAnchor, GridSpec};
use prompt::{draw_circle, PROMPT_COLOR, PROMPT_LINE_WIDTH};

pub use store::{load_matrix, save_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub radius: u32,
    #[serde(default)]
    pub anchor: GridAnchor,
    pub batch_size: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            grid_h: grid::DEFAULT_GRID,
            grid_w: grid::DEFAULT_GRID,
            radius: grid::DEFAULT_RADIUS,
            anchor: GridAnchor::Zero,
            batch_size: 64,
        }
    }
}

/// `P[n, m, h, w]` plus everything needed to check where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array4<f32>,
    pub grid: GridSpec,
    pub catalog_hash: String,
    pub encoder_id: String,
    pub image_manifest: Vec<String>,
}

impl SimilarityMatrix {
    pub fn num_images(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_concepts(&self) -> usize {
        self.values.shape()[1]
    }

    /// Hash over the values and the identifying metadata. Downstream
    /// artifacts record it to detect a regenerated or edited matrix.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.values.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(self.catalog_hash.as_bytes());
        h.update(self.encoder_id.as_bytes());
        for id in &self.image_manifest {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for v in self.values.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn check_invariants(&self) -> Result<()> {
        let s = self.values.shape();
        if s[0] != self.image_manifest.len() {
            return Err(Error::integrity(format!(
                "matrix has {} images but manifest lists {}",
                s[0],
                self.image_manifest.len()
            )));
        }
        if s[2] != self.grid.grid_h || s[3] != self.grid.grid_w {
            return Err(Error::integrity("matrix spatial dims disagree with grid"));
        }
        if let Some(v) = self.values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::integrity(format!("similarity value {v} outside [-1, 1]")));
        }
        Ok(())
    }
}

/// Serializes client calls when the client cannot take concurrent ones.
struct ClientGate<'a> {
    client: &'a dyn EmbeddingClient,
    lock: Option<Mutex<()>>,
}

impl<'a> ClientGate<'a> {
    fn new(client: &'a dyn EmbeddingClient) -> Self {
        let lock = (!client.supports_concurrency()).then(|| Mutex::new(()));
        Self { client, lock }
    }

    fn encode_images(&self, batch: &[RgbImage]) -> Result<Vec<Vec<f32>>, encoder::ClientError> {
        let _guard = self.lock.as_ref().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()));
        self.client.encode_images(batch)
    }
}

/// Encodes every concept once.
pub fn encode_catalog(catalog: &ConceptCatalog, client: &dyn EmbeddingClient) -> Result<Vec<Vec<f32>>> {
    let t = client.encode_texts(&catalog.concepts).map_err(|e| Error::Transport {
        context: "concept text embedding".into(),
        message: e.to_string(),
    })?;
    if t.len() != catalog.len() {
        return Err(Error::Transport {
            context: "concept text embedding".into(),
            message: format!("expected {} vectors, got {}", catalog.len(), t.len()),
        });
    }
    Ok(t)
}

/// Similarities for a single image, laid out `[m][h][w]`.
fn image_similarities(
    n: usize,
    image: &RgbImage,
    texts: &[Vec<f32>],
    grid: &GridSpec,
    gate: &ClientGate<'_>,
    batch_size: usize,
) -> Result<Vec<f32>> {
    let (w, h) = image.dimensions();
    if h != grid.image_h || w != grid.image_w {
        return Err(Error::geometry(format!(
            "image {n} is {h}x{w}, grid expects {}x{}",
            grid.image_h, grid.image_w
        )));
    }
    let cells = grid.cells();
    let m = texts.len();
    let mut out = vec![0f32; m * cells];
    for start in (0..cells).step_by(batch_size) {
        let end = (start + batch_size).min(cells);
        let batch: Vec<RgbImage> = grid.centers[start..end]
            .iter()
            .map(|&c| draw_circle(image, c, grid.radius, PROMPT_LINE_WIDTH, PROMPT_COLOR))
            .collect();
        let transport = |message: String| Error::Transport {
            context: format!("image {n}, cell {start}"),
            message,
        };
        let embs = gate.encode_images(&batch).map_err(|e| transport(e.to_string()))?;
        if embs.len() != batch.len() {
            return Err(transport(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                embs.len()
            )));
        }
        for (k, e) in embs.iter().enumerate() {
            let cell = start + k;
            for (j, t) in texts.iter().enumerate() {
                if e.len() != t.len() {
                    return Err(Error::geometry(format!(
                        "image embedding width {} != text embedding width {}",
                        e.len(),
                        t.len()
                    )));
                }
                out[j * cells + cell] = cosine(e, t) as f32;
            }
        }
    }
    Ok(out)
}

/// Computes `P` for `images` in index order.
///
/// Images are processed in parallel; results are assembled by index, so
/// the output does not depend on scheduling or on `batch_size`.
pub fn compute_similarities(
    images: &[RgbImage],
    image_ids: &[String],
    catalog: &ConceptCatalog,
    client: &dyn EmbeddingClient,
    cfg: &SimilarityConfig,
) -> Result<SimilarityMatrix> {
    if catalog.is_empty() {
        return Err(Error::invalid("catalog is empty"));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    if image_ids.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} image ids for {} images",
            image_ids.len(),
            images.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let (w, h) = images[0].dimensions();
    let grid = make_grid_anchored(h, w, cfg.grid_h, cfg.grid_w, cfg.radius, cfg.anchor)?;
    let texts = encode_catalog(catalog, client)?;
    let rows = compute_rows(images, 0, &texts, &grid, client, cfg.batch_size)?;
    let m = catalog.len();
    let mut flat = Vec::with_capacity(images.len() * m * grid.cells());
    for r in rows {
        flat.extend_from_slice(&r);
    }
    let values = Array4::from_shape_vec((images.len(), m, grid.grid_h, grid.grid_w), flat)
        .map_err(|e| Error::geometry(e.to_string()))?;
    Ok(SimilarityMatrix {
        values,
        grid,
        catalog_hash: catalog.content_hash.clone(),
        encoder_id: client.encoder_id(),
        image_manifest: image_ids.to_vec(),
    })
}

/// Per-image rows for `images`, whose first element has global index
/// `first_index`. The first failing image (by index) determines the error.
pub(crate) fn compute_rows(
    images: &[RgbImage],
    first_index: usize,
    texts: &[Vec<f32>],
    grid: &GridSpec,
    client: &dyn EmbeddingClient,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let gate = ClientGate::new(client);
    let results: Vec<Result<Vec<f32>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| image_similarities(first_index + i, img, texts, grid, &gate, batch_size))
        .collect();
    results.into_iter().collect()
}
