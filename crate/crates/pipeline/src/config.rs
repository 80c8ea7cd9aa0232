// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration shared by every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_cbm::backbone::{BackboneConfig, BackboneSource};
use spatial_cbm::bottleneck::{CblTrainConfig, WeightInit};
use spatial_cbm::catalog::FilterConfig;
use spatial_cbm::fsutil::sha256_hex;
use spatial_cbm::head::{HeadSolver, PoolMode, SolverConfig};
use spatial_cbm::similarity::grid::{GridAnchor, DEFAULT_GRID, DEFAULT_RADIUS};
use spatial_cbm::similarity::SimilarityConfig;
use spatial_cbm::{Error, Result};

use crate::encoder::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every stage derives its randomness from this value.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub catalog: CatalogConfig,
    pub encoder: EncoderConfig,
    pub backbone: BackboneSection,
    #[serde(default)]
    pub similarity: SimilaritySection,
    #[serde(default)]
    pub cbl: CblSection,
    pub head: HeadSection,
    #[serde(default)]
    pub explain: ExplainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<String>,
    /// JSON-lines manifest of training images.
    pub train: PathBuf,
    /// JSON-lines manifest used by the eval commands.
    #[serde(default)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CatalogConfig {
    /// One "An image of a {class}" concept per class.
    ClassTemplate,
    /// Concepts listed one per line in a text file, then filtered.
    UserProvided {
        path: PathBuf,
        #[serde(default)]
        filter: FilterConfig,
    },
    /// Generator responses replayed from a JSON map of prompt to text.
    Recorded {
        responses: PathBuf,
        #[serde(default)]
        filter: FilterConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub source: BackboneSource,
    pub config: BackboneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub radius: u32,
    pub anchor: GridAnchor,
    pub batch_size: usize,
    /// Images are resized to this square size before prompting.
    pub image_size: u32,
    pub images_per_chunk: usize,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        Self {
            grid_h: DEFAULT_GRID,
            grid_w: DEFAULT_GRID,
            radius: DEFAULT_RADIUS,
            anchor: GridAnchor::Zero,
            batch_size: 64,
            image_size: 224,
            images_per_chunk: 256,
        }
    }
}

impl SimilaritySection {
    pub fn engine(&self) -> SimilarityConfig {
        SimilarityConfig {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            radius: self.radius,
            anchor: self.anchor,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CblSection {
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub init: WeightInit,
    pub cosine_decay: bool,
    pub eval_every: usize,
}

impl Default for CblSection {
    fn default() -> Self {
        let d = CblTrainConfig::default();
        Self {
            step_size: d.step_size,
            steps: d.steps,
            batch_size: d.batch_size,
            validation_fraction: d.validation_fraction,
            init: d.init,
            cosine_decay: d.cosine_decay,
            eval_every: d.eval_every,
        }
    }
}

impl CblSection {
    pub fn train_config(&self, seed: u64) -> CblTrainConfig {
        CblTrainConfig {
            step_size: self.step_size,
            steps: self.steps,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            seed,
            init: self.init,
            cosine_decay: self.cosine_decay,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub alpha: f64,
    /// Single regularization strength; exclusive with `lambdas`.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Ascending grid; the value with the best held-out accuracy is kept.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub pool: PoolMode,
    #[serde(default)]
    pub solver: HeadSolver,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Share of training images held out to choose from `lambdas`.
    #[serde(default = "default_selection_fraction")]
    pub selection_fraction: f64,
}

fn default_max_iter() -> usize {
    SolverConfig::default().max_iter
}

fn default_tol() -> f64 {
    SolverConfig::default().tol
}

fn default_selection_fraction() -> f64 {
    0.2
}

impl HeadSection {
    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        SolverConfig { solver: self.solver, max_iter: self.max_iter, tol: self.tol, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub k: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { k: 5 }
    }
}

impl RunConfig {
    /// Parses a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.train);
        if let Some(v) = self.dataset.val.as_mut() {
            fix(v);
        }
        match &mut self.catalog {
            CatalogConfig::ClassTemplate => {}
            CatalogConfig::UserProvided { path, .. } => fix(path),
            CatalogConfig::Recorded { responses, .. } => fix(responses),
        }
        match &mut self.backbone.source {
            BackboneSource::Convnet { checkpoint } | BackboneSource::Patchnet { checkpoint } => fix(checkpoint),
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.classes.len() < 2 {
            return bad("dataset needs at least two classes".into());
        }
        let s = &self.similarity;
        if s.grid_h == 0 || s.grid_w == 0 || s.radius == 0 || s.image_size == 0 {
            return bad("similarity grid, radius and image size must be positive".into());
        }
        if s.batch_size == 0 || s.images_per_chunk == 0 {
            return bad("similarity batch and chunk sizes must be positive".into());
        }
        self.cbl.train_config(0).validate()?;
        let h = &self.head;
        if !(0.0..=1.0).contains(&h.alpha) {
            return bad(format!("head alpha {} outside [0, 1]", h.alpha));
        }
        match (&h.lambda, &h.lambdas) {
            (Some(l), None) if *l >= 0.0 && l.is_finite() => {}
            (None, Some(g)) if !g.is_empty() && g.iter().all(|l| *l >= 0.0 && l.is_finite()) => {
                if g.windows(2).any(|w| w[0] > w[1]) {
                    return bad("head lambdas must be ascending".into());
                }
                if !(h.selection_fraction > 0.0 && h.selection_fraction < 1.0) {
                    return bad("head selection_fraction must lie in (0, 1)".into());
                }
            }
            _ => return bad("head needs exactly one of `lambda` or a non-empty `lambdas`".into()),
        }
        if self.explain.k == 0 {
            return bad("explain k must be positive".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        spatial_cbm::fsutil::write_atomic(path, &bytes)
    }
}

/// Stage-specific seed derived from the run seed.
pub fn derive_seed(run_seed: u64, stage: &str) -> u64 {
    let h = sha256_hex(format!("{run_seed}:{stage}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Digest of a serializable config section.
pub fn section_hash<T: Serialize>(section: &T) -> String {
    sha256_hex(&serde_json::to_vec(section).expect("config sections serialize"))
}
