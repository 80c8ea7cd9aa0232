// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small frozen CNN: stacked 3x3 stride-2 convolutions with ReLU.
//!
//! Weights are either loaded from a safetensors checkpoint or drawn from a
//! seeded He-normal initialization (a random-feature backbone, useful for
//! desk-scale runs where no pretrained checkpoint is available).

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Activation, Backbone};
use crate::error::{Error, Result};
use crate::fsutil::{f32s_to_le_bytes, le_bytes_to_f32s, sha256_hex, write_atomic};

#[derive(Debug, Clone)]
struct ConvLayer {
    /// `[out, in, 3, 3]`
    weight: Array4<f32>,
    bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    layers: Vec<ConvLayer>,
    id: String,
}

impl ConvNet {
    /// Random-feature network with `channels[i]` outputs at stage `i`.
    pub fn seeded(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(channels.len());
        let mut c_in = 3;
        for &c_out in channels {
            let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let weight = Array4::from_shape_simple_fn((c_out, c_in, 3, 3), || normal.sample(&mut rng) as f32);
            layers.push(ConvLayer { weight, bias: Array1::zeros(c_out) });
            c_in = c_out;
        }
        let mut net = Self { layers, id: String::new() };
        net.id = format!("convnet-{}", &net.checksum()[..16]);
        net
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::fsutil::read_artifact(path)?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("bad safetensors checkpoint {}: {e}", path.display())))?;
        let mut layers = Vec::new();
        for i in 0.. {
            let Ok(w) = st.tensor(&format!("stage{i}.weight")) else { break };
            let b = st
                .tensor(&format!("stage{i}.bias"))
                .map_err(|e| Error::Config(format!("stage{i}.bias: {e}")))?;
            let shape = w.shape();
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 || w.dtype() != Dtype::F32 {
                return Err(Error::Config(format!("stage{i}.weight must be f32 [out, in, 3, 3]")));
            }
            let weight = Array4::from_shape_vec((shape[0], shape[1], 3, 3), le_bytes_to_f32s(w.data())?)
                .map_err(|e| Error::Config(e.to_string()))?;
            let bias = Array1::from(le_bytes_to_f32s(b.data())?);
            if bias.len() != shape[0] {
                return Err(Error::Config(format!("stage{i}.bias length mismatch")));
            }
            layers.push(ConvLayer { weight, bias });
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("{} has no conv stages", path.display())));
        }
        for pair in layers.windows(2) {
            if pair[1].weight.shape()[1] != pair[0].weight.shape()[0] {
                return Err(Error::Config("conv stage channel counts do not chain".into()));
            }
        }
        if layers[0].weight.shape()[1] != 3 {
            return Err(Error::Config("first conv stage must take 3 input channels".into()));
        }
        let mut net = Self { layers, id: String::new() };
        net.id = format!("convnet-{}", &net.checksum()[..16]);
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            owned.push((format!("stage{i}.weight"), l.weight.shape().to_vec(), f32s_to_le_bytes(l.weight.iter().copied())));
            owned.push((format!("stage{i}.bias"), vec![l.bias.len()], f32s_to_le_bytes(l.bias.iter().copied())));
        }
        let views: Vec<(String, TensorView<'_>)> = owned
            .iter()
            .map(|(n, s, d)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), d).expect("consistent view")))
            .collect();
        let meta: Option<HashMap<String, String>> = Some([("arch".to_string(), "convnet".to_string())].into());
        let bytes = safetensors::serialize(views, &meta).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    fn checksum(&self) -> String {
        let bytes: Vec<u8> = self
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
            .collect();
        sha256_hex(&bytes)
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }
}

fn image_to_tensor(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        image.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0 - 0.5
    })
}

/// 3x3 convolution, stride 2, zero padding 1, followed by ReLU.
fn conv3x3_s2_relu(input: &Array3<f32>, layer: &ConvLayer) -> Array3<f32> {
    let (c_in, h, w) = input.dim();
    let c_out = layer.weight.shape()[0];
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Array3::zeros((c_out, oh, ow));
    let mut patch = vec![0f32; c_in * 9];
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..c_in {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * 2 + ky) as isize - 1;
                        let x = (ox * 2 + kx) as isize - 1;
                        patch[ci * 9 + ky * 3 + kx] = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            input[[ci, y as usize, x as usize]]
                        } else {
                            0.0
                        };
                    }
                }
            }
            for co in 0..c_out {
                let wk = layer.weight.slice(ndarray::s![co, .., .., ..]);
                let wk = wk.as_slice().expect("contiguous kernel");
                let acc: f32 = wk.iter().zip(&patch).map(|(a, b)| a * b).sum::<f32>() + layer.bias[co];
                out[[co, oy, ox]] = acc.max(0.0);
            }
        }
    }
    out
}

impl Backbone for ConvNet {
    fn backbone_id(&self) -> String {
        self.id.clone()
    }

    fn layer_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = (0..self.layers.len()).map(|i| format!("stage{i}")).collect();
        tags.push("final".into());
        tags
    }

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Activation> {
        let stop = if layer == "final" {
            self.layers.len() - 1
        } else {
            layer
                .strip_prefix("stage")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&i| i < self.layers.len())
                .ok_or_else(|| Error::Config(format!("unknown layer tag {layer:?}")))?
        };
        let mut x = image_to_tensor(image);
        for l in &self.layers[..=stop] {
            x = conv3x3_s2_relu(&x, l);
        }
        Ok(Activation::Spatial(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{extract_features, BackboneConfig, BackboneKind};

    #[test]
    fn shapes_halve_per_stage() {
        let net = ConvNet::seeded(&[8, 16, 32], 7);
        let img = RgbImage::from_fn(64, 64, |x, y| image::Rgb([x as u8 * 4, y as u8 * 4, 128]));
        let cfg = BackboneConfig::new(BackboneKind::Cnn, "final", 64);
        let fm = extract_features(&net, &img, &cfg).unwrap();
        assert_eq!(fm.values.dim(), (32, 8, 8));
        let cfg = BackboneConfig::new(BackboneKind::Cnn, "stage0", 64);
        assert_eq!(extract_features(&net, &img, &cfg).unwrap().values.dim(), (8, 32, 32));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let net = ConvNet::seeded(&[4, 6], 3);
        let img = RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * y) as u8, 20, (x + y) as u8 * 5]));
        let a = net.forward(&img, "final").unwrap();
        assert_eq!(a, net.forward(&img, "final").unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.safetensors");
        net.save(&path).unwrap();
        let back = ConvNet::load(&path).unwrap();
        assert_eq!(back.backbone_id(), net.backbone_id());
        assert_eq!(back.forward(&img, "final").unwrap(), a);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let net = ConvNet::seeded(&[2], 11);
        let img = RgbImage::from_fn(5, 5, |x, y| image::Rgb([(x * 40) as u8, (y * 50) as u8, 77]));
        let Activation::Spatial(out) = net.forward(&img, "final").unwrap() else { panic!() };
        let inp = image_to_tensor(&img);
        let l = &net.layers[0];
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0f64;
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = oy as i64 * 2 + ky as i64 - 1;
                                let x = ox as i64 * 2 + kx as i64 - 1;
                                if (0..5).contains(&y) && (0..5).contains(&x) {
                                    acc += l.weight[[co, ci, ky, kx]] as f64 * inp[[ci, y as usize, x as usize]] as f64;
                                }
                            }
                        }
                    }
                    assert!((out[[co, oy, ox]] as f64 - acc.max(0.0)).abs() < 1e-5);
                }
            }
        }
    }
}
