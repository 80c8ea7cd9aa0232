// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen backbone adapters.
//!
//! A backbone is any image model from which a spatial feature map can be
//! read. CNNs expose a `[D, H, W]` activation map directly; ViT-style
//! models expose a token sequence whose patch tokens are reshaped onto the
//! patch grid (optionally with the CLS token broadcast to every cell and
//! concatenated along channels).

pub mod conv;
pub mod patch;
pub mod resize;

use image::RgbImage;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::grid::GridSpec;

pub use conv::ConvNet;
pub use patch::PatchNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn,
    VitPatchOnly,
    VitPatchPlusCls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBackboneConfig")]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub feature_layer: String,
    pub input_size: u32,
    pub frozen: bool,
}

#[derive(Deserialize)]
struct RawBackboneConfig {
    kind: BackboneKind,
    feature_layer: String,
    input_size: u32,
    #[serde(default = "yes")]
    frozen: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawBackboneConfig> for BackboneConfig {
    type Error = String;

    fn try_from(r: RawBackboneConfig) -> std::result::Result<Self, String> {
        if !r.frozen {
            return Err("backbones are always frozen; `frozen: false` is not supported".into());
        }
        Ok(Self { kind: r.kind, feature_layer: r.feature_layer, input_size: r.input_size, frozen: true })
    }
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, feature_layer: impl Into<String>, input_size: u32) -> Self {
        Self { kind, feature_layer: feature_layer.into(), input_size, frozen: true }
    }
}

/// Raw output of a backbone at some layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    /// `[D, H, W]`
    Spatial(Array3<f32>),
    /// `[T, D]` token sequence, with the CLS position if the model has one.
    Tokens { tokens: Array2<f32>, cls_index: Option<usize> },
}

/// An inference-only image model. Weights are immutable after
/// construction, so `forward` may be called concurrently.
pub trait Backbone: Send + Sync {
    fn backbone_id(&self) -> String;

    fn layer_tags(&self) -> Vec<String>;

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Activation>;
}

/// Where a backbone's weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum BackboneSource {
    /// ConvNet checkpoint in safetensors format.
    Convnet { checkpoint: std::path::PathBuf },
    /// PatchNet checkpoint in safetensors format.
    Patchnet { checkpoint: std::path::PathBuf },
    /// Random-feature ConvNet drawn from a seed.
    ConvnetSeeded { channels: Vec<usize>, seed: u64 },
    /// Random-feature PatchNet drawn from a seed.
    PatchnetSeeded { patch: usize, dim: usize, seed: u64 },
}

impl BackboneSource {
    /// Instantiates the backbone; relative checkpoint paths resolve against `base`.
    pub fn build(&self, base: &std::path::Path) -> Result<Box<dyn Backbone>> {
        Ok(match self {
            Self::Convnet { checkpoint } => Box::new(ConvNet::load(&base.join(checkpoint))?),
            Self::Patchnet { checkpoint } => Box::new(PatchNet::load(&base.join(checkpoint))?),
            Self::ConvnetSeeded { channels, seed } => {
                if channels.is_empty() {
                    return Err(Error::Config("convnet needs at least one stage".into()));
                }
                Box::new(ConvNet::seeded(channels, *seed))
            }
            Self::PatchnetSeeded { patch, dim, seed } => {
                if *patch == 0 || *dim == 0 {
                    return Err(Error::Config("patchnet patch size and width must be positive".into()));
                }
                Box::new(PatchNet::seeded(*patch, *dim, *seed))
            }
        })
    }
}

/// Resizes an image to the square backbone input with a triangle filter.
pub fn prepare_image(image: &RgbImage, size: u32) -> RgbImage {
    if image.dimensions() == (size, size) {
        return image.clone();
    }
    image::imageops::resize(image, size, size, image::imageops::FilterType::Triangle)
}

/// `f(x)`: a `[D, H, W]` feature map with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f32>,
    pub backbone_id: String,
    pub layer_tag: String,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Runs the backbone and converts its output to a spatial feature map.
pub fn extract_features(
    backbone: &dyn Backbone,
    image: &RgbImage,
    config: &BackboneConfig,
) -> Result<FeatureMap> {
    let (w, h) = image.dimensions();
    if w != config.input_size || h != config.input_size {
        return Err(Error::geometry(format!(
            "image is {h}x{w}, backbone expects {0}x{0}",
            config.input_size
        )));
    }
    if !backbone.layer_tags().iter().any(|t| *t == config.feature_layer) {
        return Err(Error::Config(format!(
            "unknown layer tag {:?} for backbone {}",
            config.feature_layer,
            backbone.backbone_id()
        )));
    }
    let act = backbone.forward(image, &config.feature_layer)?;
    let values = match (config.kind, act) {
        (BackboneKind::Cnn, Activation::Spatial(v)) => v,
        (BackboneKind::VitPatchOnly, Activation::Tokens { tokens, cls_index }) => {
            tokens_to_map(&tokens, cls_index, false)?
        }
        (BackboneKind::VitPatchPlusCls, Activation::Tokens { tokens, cls_index }) => {
            tokens_to_map(&tokens, cls_index, true)?
        }
        (kind, _) => {
            return Err(Error::Config(format!(
                "backbone {} output does not match configured kind {kind:?}",
                backbone.backbone_id()
            )))
        }
    };
    if values.shape().iter().any(|&d| d == 0) {
        return Err(Error::geometry("empty feature map"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("backbone produced non-finite features".into()));
    }
    Ok(FeatureMap { values, backbone_id: backbone.backbone_id(), layer_tag: config.feature_layer.clone() })
}

/// Reshapes patch tokens `[T, D]` back onto their `sqrt(T) x sqrt(T)`
/// grid as `[D, s, s]`. With `with_cls`, the CLS vector is broadcast to
/// every cell and appended along channels, giving `[2D, s, s]`.
pub fn tokens_to_map(tokens: &Array2<f32>, cls_index: Option<usize>, with_cls: bool) -> Result<Array3<f32>> {
    let (t, d) = tokens.dim();
    let patch_rows: Vec<usize> = (0..t).filter(|&i| Some(i) != cls_index).collect();
    let n = patch_rows.len();
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(Error::geometry(format!("{n} patch tokens do not form a square grid")));
    }
    let channels = if with_cls { 2 * d } else { d };
    let mut out = Array3::zeros((channels, side, side));
    for (p, &row) in patch_rows.iter().enumerate() {
        let (i, j) = (p / side, p % side);
        out.slice_mut(s![..d, i, j]).assign(&tokens.row(row));
    }
    if with_cls {
        let cls = cls_index.ok_or_else(|| Error::Config("backbone has no CLS token".into()))?;
        let cls_vec = tokens.row(cls);
        for i in 0..side {
            for j in 0..side {
                out.slice_mut(s![d.., i, j]).assign(&cls_vec);
            }
        }
    }
    Ok(out)
}

/// Resizes a feature map to the grid resolution.
pub fn resize_to_grid(fm: &FeatureMap, grid: &GridSpec) -> FeatureMap {
    resize_to(fm, grid.grid_h, grid.grid_w)
}

pub fn resize_to(fm: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        values: resize::resize_volume(fm.values.view(), h, w),
        backbone_id: fm.backbone_id.clone(),
        layer_tag: fm.layer_tag.clone(),
    }
}

/// Grid-resolution features for a whole image set, `[N, D, H~, W~]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub values: Array4<f32>,
    pub image_ids: Vec<String>,
    pub backbone_id: String,
    pub layer_tag: String,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Builds a bank from precomputed grid-resolution features.
    pub fn from_array(
        values: Array4<f32>,
        image_ids: Vec<String>,
        backbone_id: impl Into<String>,
        layer_tag: impl Into<String>,
    ) -> Result<Self> {
        if image_ids.len() != values.shape()[0] {
            return Err(Error::invalid(format!(
                "{} image ids for {} feature maps",
                image_ids.len(),
                values.shape()[0]
            )));
        }
        Ok(Self { values, image_ids, backbone_id: backbone_id.into(), layer_tag: layer_tag.into() })
    }

    /// Extracts and resizes features for the images supplied by `load`.
    pub fn extract(
        backbone: &dyn Backbone,
        config: &BackboneConfig,
        image_ids: &[String],
        load: &(dyn Fn(usize) -> Result<RgbImage> + Sync),
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let n = image_ids.len();
        if n == 0 {
            return Err(Error::invalid("no images to extract features from"));
        }
        let maps: Vec<Array3<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = load(i)?;
                let fm = extract_features(backbone, &img, config)?;
                Ok(resize_to(&fm, grid_h, grid_w).values)
            })
            .collect::<Result<_>>()?;
        let d = maps[0].shape()[0];
        let mut values = Array4::zeros((n, d, grid_h, grid_w));
        for (i, m) in maps.into_iter().enumerate() {
            values.index_axis_mut(Axis(0), i).assign(&m);
        }
        Ok(Self {
            values,
            image_ids: image_ids.to_vec(),
            backbone_id: backbone.backbone_id(),
            layer_tag: config.feature_layer.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a fixed activation regardless of the image.
    struct Fixed(Activation);

    impl Backbone for Fixed {
        fn backbone_id(&self) -> String {
            "fixed".into()
        }
        fn layer_tags(&self) -> Vec<String> {
            vec!["final".into()]
        }
        fn forward(&self, _: &RgbImage, _: &str) -> Result<Activation> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn cnn_map_passes_through() {
        let bb = Fixed(Activation::Spatial(Array3::from_elem((2048, 7, 7), 0.25)));
        let cfg = BackboneConfig::new(BackboneKind::Cnn, "final", 32);
        let fm = extract_features(&bb, &RgbImage::new(32, 32), &cfg).unwrap();
        assert_eq!(fm.values.dim(), (2048, 7, 7));
        assert_eq!(fm.channels(), 2048);
    }

    #[test]
    fn vit_tokens_reshape_and_cls_concat() {
        let tokens = Array2::from_shape_fn((197, 768), |(t, d)| (t * 1000 + d) as f32);
        let bb = Fixed(Activation::Tokens { tokens: tokens.clone(), cls_index: Some(0) });
        let img = RgbImage::new(16, 16);
        let cfg = BackboneConfig::new(BackboneKind::VitPatchOnly, "final", 16);
        let fm = extract_features(&bb, &img, &cfg).unwrap();
        assert_eq!(fm.values.dim(), (768, 14, 14));
        // patch token p lands at (p / 14, p % 14)
        assert_eq!(fm.values[[5, 1, 2]], tokens[[1 + 16, 5]]);

        let cfg = BackboneConfig::new(BackboneKind::VitPatchPlusCls, "final", 16);
        let fm = extract_features(&bb, &img, &cfg).unwrap();
        assert_eq!(fm.values.dim(), (1536, 14, 14));
        assert_eq!(fm.values[[768 + 3, 9, 4]], tokens[[0, 3]]);
    }

    #[test]
    fn non_square_tokens_and_unknown_layer() {
        let bb = Fixed(Activation::Tokens { tokens: Array2::zeros((11, 4)), cls_index: Some(0) });
        let cfg = BackboneConfig::new(BackboneKind::VitPatchOnly, "final", 8);
        assert!(matches!(extract_features(&bb, &RgbImage::new(8, 8), &cfg), Err(Error::Geometry(_))));
        let cfg = BackboneConfig::new(BackboneKind::VitPatchOnly, "block3", 8);
        assert!(matches!(extract_features(&bb, &RgbImage::new(8, 8), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_size_is_geometry_error() {
        let bb = Fixed(Activation::Spatial(Array3::zeros((1, 1, 1))));
        let cfg = BackboneConfig::new(BackboneKind::Cnn, "final", 32);
        assert!(matches!(extract_features(&bb, &RgbImage::new(16, 32), &cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn unfrozen_config_rejected() {
        let j = r#"{"kind":"cnn","feature_layer":"final","input_size":64,"frozen":false}"#;
        assert!(serde_json::from_str::<BackboneConfig>(j).is_err());
        let j = r#"{"kind":"cnn","feature_layer":"final","input_size":64}"#;
        assert!(serde_json::from_str::<BackboneConfig>(j).unwrap().frozen);
    }

    #[test]
    fn resize_to_grid_identity() {
        let fm = FeatureMap {
            values: Array3::from_shape_fn((3, 7, 7), |(a, b, c)| (a + b * c) as f32),
            backbone_id: "x".into(),
            layer_tag: "y".into(),
        };
        let grid = crate::similarity::grid::make_grid(224, 224, 7, 7, 32).unwrap();
        assert_eq!(resize_to_grid(&fm, &grid), fm);
    }
}
