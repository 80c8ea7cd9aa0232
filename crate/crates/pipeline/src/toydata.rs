// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic disk-on-background dataset with ground-truth masks.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_cbm::backbone::{BackboneConfig, BackboneKind, BackboneSource};
use spatial_cbm::eval::DatasetEntry;
use spatial_cbm::fsutil::write_atomic;
use spatial_cbm::head::{HeadSolver, PoolMode};
use spatial_cbm::similarity::encoder::COLOR_PROTOTYPES;
use spatial_cbm::Result;

use crate::config::*;
use crate::encoder::EncoderConfig;

const FOREGROUNDS: [&str; 5] = ["red", "green", "blue", "yellow", "orange"];
const BACKGROUNDS: [&str; 2] = ["white", "black"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { train_per_class: 20, val_per_class: 6, size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train: PathBuf,
    pub val: PathBuf,
}

/// The ten classes: five disk colors on two backgrounds.
pub fn toy_classes() -> Vec<(String, &'static str, &'static str)> {
    BACKGROUNDS
        .iter()
        .flat_map(|bg| FOREGROUNDS.iter().map(move |fg| (format!("{fg} disk on {bg}"), *fg, *bg)))
        .collect()
}

fn prototype(name: &str) -> [u8; 3] {
    COLOR_PROTOTYPES.iter().find(|(n, _)| *n == name).expect("known color").1
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> Rgb<u8> {
    Rgb(c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 254) as u8))
}

/// One image and its disk mask (255 inside the disk).
pub fn render(fg: &str, bg: &str, size: u32, rng: &mut ChaCha8Rng) -> (RgbImage, GrayImage) {
    let (fgc, bgc) = (prototype(fg), prototype(bg));
    let r = rng.random_range(size as f64 * 0.18..size as f64 * 0.3);
    let cy = rng.random_range(r..size as f64 - r);
    let cx = rng.random_range(r..size as f64 - r);
    let mut img = RgbImage::new(size, size);
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let inside = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r;
            img.put_pixel(x, y, jitter(rng, if inside { fgc } else { bgc }, 12));
            mask.put_pixel(x, y, Luma([if inside { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

fn write_png(path: &Path, encode: impl FnOnce(&mut std::io::Cursor<&mut Vec<u8>>) -> image::ImageResult<()>) -> Result<()> {
    let mut bytes = Vec::new();
    encode(&mut std::io::Cursor::new(&mut bytes))?;
    write_atomic(path, &bytes)
}

/// Writes images, masks and `train.jsonl` / `val.jsonl` under `root`.
/// Output bytes depend only on `spec`.
pub fn write_toy_dataset(root: &Path, spec: &ToySpec) -> Result<ToyDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = toy_classes();
    for (split, per_class) in [("train", spec.train_per_class), ("val", spec.val_per_class)] {
        let mut lines = String::new();
        for (label, (_, fg, bg)) in classes.iter().enumerate() {
            for i in 0..per_class {
                let (img, mask) = render(fg, bg, spec.size, &mut rng);
                let stem = format!("{split}/c{label:02}_{i:04}");
                write_png(&root.join(format!("{stem}.png")), |w| img.write_to(w, image::ImageFormat::Png))?;
                write_png(&root.join(format!("{stem}_mask.png")), |w| mask.write_to(w, image::ImageFormat::Png))?;
                let e = DatasetEntry {
                    image: format!("{stem}.png").into(),
                    label,
                    mask: Some(format!("{stem}_mask.png").into()),
                    id: None,
                };
                lines.push_str(&serde_json::to_string(&e)?);
                lines.push('\n');
            }
        }
        write_atomic(&root.join(format!("{split}.jsonl")), lines.as_bytes())?;
    }
    Ok(ToyDataset {
        root: root.to_path_buf(),
        classes: classes.into_iter().map(|c| c.0).collect(),
        train: root.join("train.jsonl"),
        val: root.join("val.jsonl"),
    })
}

/// A small, fast configuration for the toy dataset.
pub fn toy_run_config(data: &ToyDataset, output_dir: &Path, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        output_dir: output_dir.to_path_buf(),
        dataset: DatasetConfig { classes: data.classes.clone(), train: data.train.clone(), val: Some(data.val.clone()) },
        catalog: CatalogConfig::ClassTemplate,
        encoder: EncoderConfig::ColorPrototype { context_weight: 0.15, temperature: 2500.0 },
        backbone: BackboneSection {
            source: BackboneSource::ConvnetSeeded { channels: vec![16, 24], seed: 11 },
            config: BackboneConfig::new(BackboneKind::Cnn, "final", 64),
        },
        similarity: SimilaritySection {
            grid_h: 4,
            grid_w: 4,
            radius: 12,
            image_size: 64,
            batch_size: 16,
            images_per_chunk: 64,
            ..Default::default()
        },
        cbl: CblSection {
            step_size: 0.01,
            steps: 400,
            batch_size: 32,
            validation_fraction: 0.1,
            ..Default::default()
        },
        head: HeadSection {
            alpha: 0.9,
            lambda: Some(0.5),
            lambdas: None,
            pool: PoolMode::Mean,
            solver: HeadSolver::ProxGradient,
            max_iter: 20_000,
            tol: 1e-6,
            selection_fraction: 0.2,
        },
        explain: ExplainSection { k: 5 },
    }
}
