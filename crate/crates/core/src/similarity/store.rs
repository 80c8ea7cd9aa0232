// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chunked on-disk storage for similarity matrices.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/chunk_<start>_<end>.bin   images [start, end), raw f32le, row-major n,m,h,w
//! ```
//!
//! Chunks are written atomically, one per `images_per_chunk` images, so an
//! interrupted computation can resume and skip every complete chunk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::encoder::EmbeddingClient;
use super::grid::{make_grid_anchored, GridSpec};
use super::{compute_rows, encode_catalog, SimilarityConfig, SimilarityMatrix};
use crate::catalog::ConceptCatalog;
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, le_bytes_to_f32s, write_atomic};

pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunking {
    pub images_per_chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub dims: [usize; 4],
    pub dtype: String,
    pub layout: String,
    pub grid: GridSpec,
    pub catalog_hash: String,
    pub encoder_id: String,
    pub image_manifest: Vec<String>,
    pub chunking: Chunking,
}

impl StoreManifest {
    fn new(
        n: usize,
        m: usize,
        grid: GridSpec,
        catalog_hash: String,
        encoder_id: String,
        image_manifest: Vec<String>,
        images_per_chunk: usize,
    ) -> Self {
        Self {
            version: STORE_VERSION,
            dims: [n, m, grid.grid_h, grid.grid_w],
            dtype: "f32le".into(),
            layout: "row-major n,m,h,w".into(),
            grid,
            catalog_hash,
            encoder_id,
            image_manifest,
            chunking: Chunking { images_per_chunk },
        }
    }

    fn per_image(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    fn chunk_ranges(&self) -> Vec<(usize, usize)> {
        let n = self.dims[0];
        let c = self.chunking.images_per_chunk;
        (0..n).step_by(c).map(|s| (s, (s + c).min(n))).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != STORE_VERSION {
            return Err(Error::integrity(format!("unsupported store version {}", self.version)));
        }
        if self.dtype != "f32le" {
            return Err(Error::integrity(format!("unsupported dtype {}", self.dtype)));
        }
        if self.chunking.images_per_chunk == 0 {
            return Err(Error::integrity("images_per_chunk is 0"));
        }
        if self.dims[0] != self.image_manifest.len() {
            return Err(Error::integrity(format!(
                "dims declare {} images but manifest lists {}",
                self.dims[0],
                self.image_manifest.len()
            )));
        }
        if self.dims[2] != self.grid.grid_h || self.dims[3] != self.grid.grid_w {
            return Err(Error::integrity("dims disagree with grid spec"));
        }
        self.grid.validate()
    }
}

pub fn chunk_path(dir: &Path, start: usize, end: usize) -> PathBuf {
    dir.join(format!("chunk_{start}_{end}.bin"))
}

fn read_manifest(dir: &Path) -> Result<StoreManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let m: StoreManifest = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::integrity(format!("corrupt manifest: {e}")))?;
    m.validate()?;
    Ok(m)
}

fn write_manifest(dir: &Path, m: &StoreManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &bytes)
}

/// Chunk files present on disk, keyed by start index.
fn present_chunks(dir: &Path) -> Result<BTreeMap<usize, (usize, PathBuf)>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_prefix("chunk_").and_then(|s| s.strip_suffix(".bin")) else {
            continue;
        };
        let mut parts = stem.split('_');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else { continue };
        if let (Ok(a), Ok(b)) = (a.parse(), b.parse()) {
            out.insert(a, (b, path));
        }
    }
    Ok(out)
}

/// Writes `p` as a chunked store, replacing any previous store in `dir`.
pub fn save_matrix(p: &SimilarityMatrix, dir: &Path, images_per_chunk: usize) -> Result<()> {
    if images_per_chunk == 0 {
        return Err(Error::Config("images_per_chunk must be >= 1".into()));
    }
    p.check_invariants()?;
    fs::create_dir_all(dir)?;
    for (_, (_, path)) in present_chunks(dir)? {
        fs::remove_file(path)?;
    }
    let s = p.values.shape();
    let manifest = StoreManifest::new(
        s[0],
        s[1],
        p.grid.clone(),
        p.catalog_hash.clone(),
        p.encoder_id.clone(),
        p.image_manifest.clone(),
        images_per_chunk,
    );
    write_manifest(dir, &manifest)?;
    let per_image = manifest.per_image();
    let flat = p.values.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    for (start, end) in manifest.chunk_ranges() {
        let bytes = f32s_to_le_bytes(flat[start * per_image..end * per_image].iter().copied());
        write_atomic(&chunk_path(dir, start, end), &bytes)?;
    }
    Ok(())
}

/// Loads and validates a store.
///
/// Fails with an integrity error on a corrupt manifest, a chunk of the
/// wrong size, missing chunks (the message lists the missing image
/// ranges), or values outside [-1, 1]. When `expected_catalog_hash` is
/// given, a mismatch is a provenance error.
pub fn load_matrix(dir: &Path, expected_catalog_hash: Option<&str>) -> Result<SimilarityMatrix> {
    let manifest = read_manifest(dir)?;
    if let Some(expected) = expected_catalog_hash {
        if expected != manifest.catalog_hash {
            return Err(Error::Provenance {
                artifact: format!("similarity store {} (catalog hash)", dir.display()),
                expected: expected.to_string(),
                found: manifest.catalog_hash,
            });
        }
    }
    let per_image = manifest.per_image();
    let present = present_chunks(dir)?;
    let mut missing = Vec::new();
    let mut flat = Vec::with_capacity(manifest.dims[0] * per_image);
    for (start, end) in manifest.chunk_ranges() {
        match present.get(&start) {
            Some((e, path)) if *e == end => {
                let bytes = fs::read(path)?;
                let want = (end - start) * per_image * 4;
                if bytes.len() != want {
                    return Err(Error::integrity(format!(
                        "chunk {} has {} bytes, expected {want}",
                        path.display(),
                        bytes.len()
                    )));
                }
                flat.extend(le_bytes_to_f32s(&bytes)?);
            }
            _ => missing.push(format!("[{start}, {end})")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::integrity(format!(
            "store {} is incomplete; missing image ranges {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let [n, m, gh, gw] = manifest.dims;
    let values = Array4::from_shape_vec((n, m, gh, gw), flat)
        .map_err(|e| Error::integrity(e.to_string()))?;
    let p = SimilarityMatrix {
        values,
        grid: manifest.grid,
        catalog_hash: manifest.catalog_hash,
        encoder_id: manifest.encoder_id,
        image_manifest: manifest.image_manifest,
    };
    p.check_invariants()?;
    Ok(p)
}

/// Outcome of a resumable computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreSummary {
    pub chunks_written: usize,
    pub chunks_skipped: usize,
}

/// Computes `P` chunk by chunk straight into `dir`.
///
/// `load_image(i)` supplies image `i`; all images must share `(h, w)`.
/// With `resume`, an existing manifest must describe the same job, and
/// chunks already complete on disk are skipped. Without `resume`, any
/// previous store in `dir` is discarded.
#[allow(clippy::too_many_arguments)]
pub fn compute_to_store(
    dir: &Path,
    image_ids: &[String],
    image_hw: (u32, u32),
    load_image: &(dyn Fn(usize) -> Result<RgbImage> + Sync),
    catalog: &ConceptCatalog,
    client: &dyn EmbeddingClient,
    cfg: &SimilarityConfig,
    images_per_chunk: usize,
    resume: bool,
) -> Result<StoreSummary> {
    if image_ids.is_empty() {
        return Err(Error::invalid("no images"));
    }
    if images_per_chunk == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("batch and chunk sizes must be >= 1".into()));
    }
    let grid = make_grid_anchored(image_hw.0, image_hw.1, cfg.grid_h, cfg.grid_w, cfg.radius, cfg.anchor)?;
    let manifest = StoreManifest::new(
        image_ids.len(),
        catalog.len(),
        grid.clone(),
        catalog.content_hash.clone(),
        client.encoder_id(),
        image_ids.to_vec(),
        images_per_chunk,
    );
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if resume && manifest_path.exists() {
        let old = read_manifest(dir)?;
        if old != manifest {
            return Err(Error::integrity(format!(
                "cannot resume into {}: existing manifest describes a different job",
                dir.display()
            )));
        }
    } else {
        for (_, (_, path)) in present_chunks(dir)? {
            fs::remove_file(path)?;
        }
        write_manifest(dir, &manifest)?;
    }

    let texts = encode_catalog(catalog, client)?;
    let per_image = manifest.per_image();
    let present = present_chunks(dir)?;
    let mut summary = StoreSummary { chunks_written: 0, chunks_skipped: 0 };
    for (start, end) in manifest.chunk_ranges() {
        let complete = matches!(present.get(&start), Some((e, path))
            if *e == end && fs::metadata(path).map(|md| md.len() as usize == (end - start) * per_image * 4).unwrap_or(false));
        if complete {
            summary.chunks_skipped += 1;
            continue;
        }
        let images = (start..end).map(load_image).collect::<Result<Vec<_>>>()?;
        let rows = compute_rows(&images, start, &texts, &grid, client, cfg.batch_size)?;
        let bytes = f32s_to_le_bytes(rows.into_iter().flatten());
        write_atomic(&chunk_path(dir, start, end), &bytes)?;
        summary.chunks_written += 1;
        tracing::debug!(start, end, "wrote similarity chunk");
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::class_template_catalog;
    use crate::similarity::encoder::ColorPrototypeEncoder;
    use crate::similarity::grid::make_grid;

    fn toy_matrix(n: usize) -> SimilarityMatrix {
        let grid = make_grid(32, 32, 3, 3, 4).unwrap();
        let cat = class_template_catalog(&["a".into(), "b".into()]).unwrap();
        let values = Array4::from_shape_fn((n, 2, 3, 3), |(a, b, c, d)| {
            (((a * 31 + b * 7 + c * 3 + d) % 17) as f32 / 8.5) - 1.0
        });
        SimilarityMatrix {
            values,
            grid,
            catalog_hash: cat.content_hash,
            encoder_id: "toy".into(),
            image_manifest: (0..n).map(|i| format!("img{i}")).collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_matrix(7);
        save_matrix(&p, dir.path(), 3).unwrap();
        let q = load_matrix(dir.path(), Some(&p.catalog_hash)).unwrap();
        assert_eq!(p.values.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.values.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(p, q);
        assert!(chunk_path(dir.path(), 6, 7).exists());
    }

    #[test]
    fn tampered_chunk_length_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_matrix(4);
        save_matrix(&p, dir.path(), 2).unwrap();
        let path = chunk_path(dir.path(), 2, 4);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_matrix(dir.path(), None), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_chunk_lists_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_matrix(5);
        save_matrix(&p, dir.path(), 2).unwrap();
        fs::remove_file(chunk_path(dir.path(), 2, 4)).unwrap();
        match load_matrix(dir.path(), None) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("[2, 4)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_manifest_and_wrong_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_matrix(2);
        save_matrix(&p, dir.path(), 2).unwrap();
        assert!(matches!(load_matrix(dir.path(), Some("deadbeef")), Err(Error::Provenance { .. })));
        fs::write(dir.path().join(MANIFEST_FILE), b"{ not json").unwrap();
        assert!(matches!(load_matrix(dir.path(), None), Err(Error::Integrity(_))));
    }

    #[test]
    fn resume_skips_complete_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<RgbImage> = (0..5)
            .map(|i| RgbImage::from_fn(24, 24, |x, y| image::Rgb([(x * 10) as u8, (y * 10) as u8, (i * 40) as u8])))
            .collect();
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let cat = class_template_catalog(&["red thing".into(), "blue thing".into()]).unwrap();
        let cfg = SimilarityConfig { grid_h: 3, grid_w: 3, radius: 4, batch_size: 4, ..Default::default() };
        let enc = ColorPrototypeEncoder::default();
        let load = |i: usize| Ok(imgs[i].clone());
        let s = compute_to_store(dir.path(), &ids, (24, 24), &load, &cat, &enc, &cfg, 2, false).unwrap();
        assert_eq!(s, StoreSummary { chunks_written: 3, chunks_skipped: 0 });
        let full = load_matrix(dir.path(), None).unwrap();

        fs::remove_file(chunk_path(dir.path(), 2, 4)).unwrap();
        let s = compute_to_store(dir.path(), &ids, (24, 24), &load, &cat, &enc, &cfg, 2, true).unwrap();
        assert_eq!(s, StoreSummary { chunks_written: 1, chunks_skipped: 2 });
        assert_eq!(load_matrix(dir.path(), None).unwrap(), full);

        let direct = super::super::compute_similarities(&imgs, &ids, &cat, &enc, &cfg).unwrap();
        assert_eq!(direct, full);

        let other = SimilarityConfig { radius: 5, ..cfg };
        assert!(compute_to_store(dir.path(), &ids, (24, 24), &load, &cat, &enc, &other, 2, true).is_err());
    }
}
