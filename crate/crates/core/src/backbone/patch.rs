// SPDX-License-Identifier: MIT OR Apache-2.0

//! A minimal ViT-style token model: linear patch embedding, one global
//! mixing step, and a CLS token at position 0.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Activation, Backbone};
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, le_bytes_to_f32s, sha256_hex, write_atomic};

#[derive(Debug, Clone)]
pub struct PatchNet {
    patch: usize,
    /// `[D, 3 * patch * patch]`
    embed: Array2<f32>,
    embed_bias: Array1<f32>,
    /// `[D, D]`
    cls_proj: Array2<f32>,
    id: String,
}

impl PatchNet {
    pub fn seeded(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = 3 * patch * patch;
        let n1 = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("std");
        let embed = Array2::from_shape_simple_fn((dim, fan_in), || n1.sample(&mut rng) as f32);
        let cls_proj = Array2::from_shape_simple_fn((dim, dim), || n2.sample(&mut rng) as f32);
        Self::assemble(patch, embed, Array1::zeros(dim), cls_proj)
    }

    fn assemble(patch: usize, embed: Array2<f32>, embed_bias: Array1<f32>, cls_proj: Array2<f32>) -> Self {
        let bytes: Vec<u8> = embed
            .iter()
            .chain(embed_bias.iter())
            .chain(cls_proj.iter())
            .flat_map(|v| v.to_le_bytes())
            .chain((patch as u64).to_le_bytes())
            .collect();
        let id = format!("patchnet-{}", &sha256_hex(&bytes)[..16]);
        Self { patch, embed, embed_bias, cls_proj, id }
    }

    pub fn dim(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let owned = [
            ("embed.weight", self.embed.shape().to_vec(), f32s_to_le_bytes(self.embed.iter().copied())),
            ("embed.bias", vec![self.embed_bias.len()], f32s_to_le_bytes(self.embed_bias.iter().copied())),
            ("cls.weight", self.cls_proj.shape().to_vec(), f32s_to_le_bytes(self.cls_proj.iter().copied())),
        ];
        let views: Vec<(&str, TensorView<'_>)> = owned
            .iter()
            .map(|(n, s, d)| (*n, TensorView::new(Dtype::F32, s.clone(), d).expect("consistent view")))
            .collect();
        let meta: Option<HashMap<String, String>> = Some(
            [("arch".to_string(), "patchnet".to_string()), ("patch".to_string(), self.patch.to_string())].into(),
        );
        let bytes = safetensors::serialize(views, &meta).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::fsutil::read_artifact(path)?;
        let bad = |e: String| Error::Config(format!("bad patchnet checkpoint {}: {e}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let patch: usize = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("patch"))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| bad("missing patch size metadata".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mat = |name: &str| -> Result<Array2<f32>> {
            let t = st.tensor(name).map_err(|e| bad(e.to_string()))?;
            let s = t.shape();
            if s.len() != 2 {
                return Err(bad(format!("{name} must be 2-D")));
            }
            Array2::from_shape_vec((s[0], s[1]), le_bytes_to_f32s(t.data())?).map_err(|e| bad(e.to_string()))
        };
        let embed = mat("embed.weight")?;
        let cls_proj = mat("cls.weight")?;
        let bias = Array1::from(le_bytes_to_f32s(st.tensor("embed.bias").map_err(|e| bad(e.to_string()))?.data())?);
        let d = embed.shape()[0];
        if embed.shape()[1] != 3 * patch * patch || bias.len() != d || cls_proj.dim() != (d, d) {
            return Err(bad("tensor shapes are inconsistent".into()));
        }
        Ok(Self::assemble(patch, embed, bias, cls_proj))
    }
}

impl Backbone for PatchNet {
    fn backbone_id(&self) -> String {
        self.id.clone()
    }

    fn layer_tags(&self) -> Vec<String> {
        vec!["tokens".into()]
    }

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Activation> {
        if layer != "tokens" {
            return Err(Error::Config(format!("unknown layer tag {layer:?}")));
        }
        let (w, h) = image.dimensions();
        let p = self.patch;
        if h as usize % p != 0 || w as usize % p != 0 {
            return Err(Error::geometry(format!("image {h}x{w} not divisible into {p}x{p} patches")));
        }
        let (gh, gw) = (h as usize / p, w as usize / p);
        let d = self.dim();
        let mut patches = Array2::<f32>::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = patches.row_mut(gy * gw + gx);
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            let px = image.get_pixel((gx * p + x) as u32, (gy * p + y) as u32).0[c];
                            row[c * p * p + y * p + x] = px as f32 / 255.0 - 0.5;
                        }
                    }
                }
            }
        }
        let mut tokens = patches.dot(&self.embed.t());
        tokens += &self.embed_bias;
        tokens.mapv_inplace(|v| v.max(0.0));
        let mean = tokens.mean_axis(Axis(0)).expect("non-empty patch grid");
        tokens += &(&mean * 0.5);
        let cls = self.cls_proj.dot(&mean).mapv(f32::tanh);
        let mut out = Array2::zeros((1 + gh * gw, d));
        out.row_mut(0).assign(&cls);
        out.slice_mut(ndarray::s![1.., ..]).assign(&tokens);
        Ok(Activation::Tokens { tokens: out, cls_index: Some(0) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{extract_features, BackboneConfig, BackboneKind};

    #[test]
    fn token_grid_and_cls() {
        let net = PatchNet::seeded(8, 12, 5);
        let img = RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 8, y as u8 * 8, 3]));
        let fm = extract_features(&net, &img, &BackboneConfig::new(BackboneKind::VitPatchOnly, "tokens", 32)).unwrap();
        assert_eq!(fm.values.dim(), (12, 4, 4));
        let fm2 =
            extract_features(&net, &img, &BackboneConfig::new(BackboneKind::VitPatchPlusCls, "tokens", 32)).unwrap();
        assert_eq!(fm2.values.dim(), (24, 4, 4));
        assert_eq!(fm2.values.slice(ndarray::s![..12, .., ..]), fm.values);
    }

    #[test]
    fn save_load() {
        let net = PatchNet::seeded(4, 6, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        net.save(&path).unwrap();
        let back = PatchNet::load(&path).unwrap();
        let img = RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30]));
        assert_eq!(back.forward(&img, "tokens").unwrap(), net.forward(&img, "tokens").unwrap());
        assert_eq!(back.backbone_id(), net.backbone_id());
    }
}
