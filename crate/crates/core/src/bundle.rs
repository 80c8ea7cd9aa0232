// SPDX-License-Identifier: MIT OR Apache-2.0

//! A trained model: catalog, frozen backbone, concept bottleneck and sparse
//! head, plus the single forward pass shared by prediction and explanation.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, prepare_image, resize_to, Backbone, BackboneConfig, BackboneSource};
use crate::bottleneck::{project, BottleneckWeights, ConceptMaps};
use crate::catalog::ConceptCatalog;
use crate::error::{Error, Result};
use crate::explain::{explain_prediction, Explanation};
use crate::fsutil::{read_artifact, sha256_hex, write_atomic};
use crate::head::{pool, Prediction, SparseHead};

pub const BUNDLE_MANIFEST: &str = "bundle.json";

/// Everything computed for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub maps: ConceptMaps,
    pub pooled: Array1<f64>,
    pub prediction: Prediction,
}

pub struct ModelBundle {
    pub catalog: ConceptCatalog,
    pub backbone: Box<dyn Backbone>,
    pub backbone_config: BackboneConfig,
    pub bottleneck: BottleneckWeights,
    pub head: SparseHead,
    hash: String,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("hash", &self.hash)
            .field("backbone", &self.backbone.backbone_id())
            .field("concepts", &self.catalog.len())
            .field("classes", &self.head.num_classes())
            .finish()
    }
}

fn mismatch(artifact: &str, expected: &str, found: &str) -> Error {
    Error::Provenance { artifact: artifact.into(), expected: expected.into(), found: found.into() }
}

impl ModelBundle {
    /// Assembles a bundle after checking that the parts were trained together.
    pub fn new(
        catalog: ConceptCatalog,
        backbone: Box<dyn Backbone>,
        backbone_config: BackboneConfig,
        bottleneck: BottleneckWeights,
        head: SparseHead,
    ) -> Result<Self> {
        if bottleneck.catalog_hash != catalog.content_hash {
            return Err(mismatch("bottleneck catalog", &catalog.content_hash, &bottleneck.catalog_hash));
        }
        if head.catalog_hash != catalog.content_hash {
            return Err(mismatch("head catalog", &catalog.content_hash, &head.catalog_hash));
        }
        let id = backbone.backbone_id();
        if bottleneck.backbone_id != id {
            return Err(mismatch("bottleneck backbone", &id, &bottleneck.backbone_id));
        }
        if bottleneck.layer_tag != backbone_config.feature_layer {
            return Err(mismatch("bottleneck layer", &backbone_config.feature_layer, &bottleneck.layer_tag));
        }
        if bottleneck.num_concepts() != catalog.len() || head.num_concepts() != catalog.len() {
            return Err(Error::geometry("bottleneck, head and catalog disagree on the number of concepts"));
        }
        if head.num_classes() != catalog.num_classes() {
            return Err(Error::geometry("head and catalog disagree on the number of classes"));
        }
        let hash = sha256_hex(
            format!(
                "{}\n{}\n{}\n{:?}\n{}\n{:?}\n{}\n{}",
                catalog.content_hash,
                id,
                backbone_config.feature_layer,
                backbone_config.kind,
                backbone_config.input_size,
                bottleneck.grid,
                bottleneck.checksum(),
                head.content_hash()
            )
            .as_bytes(),
        );
        Ok(Self { catalog, backbone, backbone_config, bottleneck, head, hash })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn grid(&self) -> (usize, usize) {
        self.bottleneck.grid
    }

    /// Concept maps for an image of any size (resized to the backbone input).
    pub fn concept_maps(&self, image: &RgbImage) -> Result<ConceptMaps> {
        let img = prepare_image(image, self.backbone_config.input_size);
        let fm = extract_features(self.backbone.as_ref(), &img, &self.backbone_config)?;
        let (gh, gw) = self.grid();
        project(resize_to(&fm, gh, gw).values.view(), &self.bottleneck)
    }

    /// Pooling and prediction on given maps.
    pub fn forward_maps(&self, maps: ConceptMaps) -> Result<ForwardPass> {
        let pooled = pool(&maps, self.head.pool);
        let prediction = self.head.predict(pooled.view())?;
        Ok(ForwardPass { maps, pooled, prediction })
    }

    pub fn forward(&self, image: &RgbImage) -> Result<ForwardPass> {
        self.forward_maps(self.concept_maps(image)?)
    }

    /// Explanation built from the forward pass it returns alongside.
    pub fn explain(&self, image: &RgbImage, image_id: &str, k: usize) -> Result<(Explanation, ForwardPass)> {
        let pass = self.forward(image)?;
        let e = self.explain_pass(image_id, &pass, k)?;
        Ok((e, pass))
    }

    pub fn explain_pass(&self, image_id: &str, pass: &ForwardPass, k: usize) -> Result<Explanation> {
        explain_prediction(
            image_id,
            pass.pooled.as_slice().expect("contiguous"),
            &pass.prediction,
            &self.head,
            &self.catalog,
            k,
        )
    }

    /// Loads a bundle directory, verifying every recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&read_artifact(&dir.join(BUNDLE_MANIFEST))?)?;
        manifest.open(dir)
    }
}

/// On-disk description of a bundle; paths are relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub catalog: PathBuf,
    pub catalog_hash: String,
    pub backbone: BackboneSource,
    pub backbone_config: BackboneConfig,
    pub backbone_id: String,
    pub bottleneck_blob: PathBuf,
    pub bottleneck_sidecar: PathBuf,
    pub bottleneck_checksum: String,
    pub head_dir: PathBuf,
    pub head_hash: String,
}

impl BundleManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(BUNDLE_MANIFEST), &bytes)
    }

    pub fn open(&self, dir: &Path) -> Result<ModelBundle> {
        let catalog = ConceptCatalog::load(&dir.join(&self.catalog))?;
        if catalog.content_hash != self.catalog_hash {
            return Err(mismatch("catalog", &self.catalog_hash, &catalog.content_hash));
        }
        let backbone = self.backbone.build(dir)?;
        if backbone.backbone_id() != self.backbone_id {
            return Err(mismatch("backbone", &self.backbone_id, &backbone.backbone_id()));
        }
        let (bottleneck, _) =
            BottleneckWeights::load(&dir.join(&self.bottleneck_blob), &dir.join(&self.bottleneck_sidecar))?;
        if bottleneck.checksum() != self.bottleneck_checksum {
            return Err(mismatch("bottleneck weights", &self.bottleneck_checksum, &bottleneck.checksum()));
        }
        let head = SparseHead::load(&dir.join(&self.head_dir))?;
        if head.content_hash() != self.head_hash {
            return Err(mismatch("head", &self.head_hash, &head.content_hash()));
        }
        ModelBundle::new(catalog, backbone, self.backbone_config.clone(), bottleneck, head)
    }
}
