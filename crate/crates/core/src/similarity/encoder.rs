// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image-text embedding clients.
//!
//! The similarity engine only needs two things from a vision-language
//! model: an image embedding per augmented image and a text embedding per
//! concept. Anything that can produce those (an in-process model, a remote
//! inference server, a test stub) implements [`EmbeddingClient`].

use image::RgbImage;

/// Boxed error returned by external clients.
pub type ClientError = Box<dyn std::error::Error + Send + Sync>;

/// Encodes strings into fixed-width vectors.
pub trait TextEncoder: Send + Sync {
    fn encode_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

/// A paired image/text encoder.
///
/// Implementations must be deterministic for identical inputs and must
/// return vectors of one fixed width per `encoder_id`. Image preprocessing
/// (resizing, normalization) belongs to the client and should be reflected
/// in `encoder_id`.
///
/// Clients that cannot take concurrent calls return `false` from
/// [`EmbeddingClient::supports_concurrency`]; the engine then serializes
/// access through a lock.
pub trait EmbeddingClient: TextEncoder {
    fn encoder_id(&self) -> String;

    fn encode_images(&self, images: &[RgbImage]) -> Result<Vec<Vec<f32>>, ClientError>;

    fn supports_concurrency(&self) -> bool {
        false
    }
}

/// Cosine similarity in double precision, clamped to [-1, 1].
///
/// Returns 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Color-prototype encoder
// ---------------------------------------------------------------------------

/// Named color prototypes used by [`ColorPrototypeEncoder`].
pub const COLOR_PROTOTYPES: [(&str, [u8; 3]); 8] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 220, 50]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 180]),
];

/// A small, fully offline encoder for desk-scale runs and fixtures.
///
/// Image embeddings are soft color histograms over [`COLOR_PROTOTYPES`].
/// When the image carries a visual-prompt ring (pure red pixels), the
/// histogram is taken over the disk enclosed by the ring and mixed with a
/// weaker global histogram, so that the embedding describes the circled
/// region while keeping some global context. Text embeddings put mass on
/// every prototype whose name occurs in the string.
///
/// It is deterministic and safe for concurrent use.
#[derive(Debug, Clone)]
pub struct ColorPrototypeEncoder {
    /// Weight of the global histogram relative to the local one.
    pub context_weight: f32,
    /// Temperature of the soft assignment, in squared RGB distance units.
    pub temperature: f32,
}

impl Default for ColorPrototypeEncoder {
    fn default() -> Self {
        Self {
            context_weight: 0.15,
            temperature: 2500.0,
        }
    }
}

const RING: [u8; 3] = [255, 0, 0];

impl ColorPrototypeEncoder {
    fn soft_assign(&self, px: [u8; 3], acc: &mut [f32; 8]) {
        let mut weights = [0f32; 8];
        let mut total = 0f32;
        for (k, (_, proto)) in COLOR_PROTOTYPES.iter().enumerate() {
            let d2: f32 = (0..3)
                .map(|c| {
                    let d = px[c] as f32 - proto[c] as f32;
                    d * d
                })
                .sum();
            weights[k] = (-d2 / self.temperature).exp();
            total += weights[k];
        }
        if total > 0.0 {
            for k in 0..8 {
                acc[k] += weights[k] / total;
            }
        }
    }

    fn embed_one(&self, img: &RgbImage) -> Vec<f32> {
        let (w, h) = img.dimensions();
        let mut global = [0f32; 8];
        let mut ring_sum = (0f64, 0f64, 0usize);
        for (x, y, p) in img.enumerate_pixels() {
            if p.0 == RING {
                ring_sum.0 += y as f64;
                ring_sum.1 += x as f64;
                ring_sum.2 += 1;
                continue;
            }
            self.soft_assign(p.0, &mut global);
        }
        normalize(&mut global);
        if ring_sum.2 == 0 {
            return global.to_vec();
        }
        // Ring centroid and mean radius locate the prompted disk.
        let cy = ring_sum.0 / ring_sum.2 as f64;
        let cx = ring_sum.1 / ring_sum.2 as f64;
        let mut radius = 0f64;
        for (x, y, p) in img.enumerate_pixels() {
            if p.0 == RING {
                radius += ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            }
        }
        radius /= ring_sum.2 as f64;
        let mut local = [0f32; 8];
        let r2 = (radius - 1.0).max(0.5).powi(2);
        let y0 = (cy - radius).floor().max(0.0) as u32;
        let y1 = ((cy + radius).ceil() as u32).min(h - 1);
        let x0 = (cx - radius).floor().max(0.0) as u32;
        let x1 = ((cx + radius).ceil() as u32).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let p = img.get_pixel(x, y).0;
                if d2 <= r2 && p != RING {
                    self.soft_assign(p, &mut local);
                }
            }
        }
        normalize(&mut local);
        (0..8)
            .map(|k| local[k] + self.context_weight * global[k])
            .collect()
    }
}

fn normalize(v: &mut [f32; 8]) {
    let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl TextEncoder for ColorPrototypeEncoder {
    fn encode_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts
            .iter()
            .map(|t| {
                let lower = t.to_lowercase();
                let words: Vec<&str> = lower
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .collect();
                let mut v = vec![0f32; 8];
                for (k, (name, _)) in COLOR_PROTOTYPES.iter().enumerate() {
                    if words.contains(name) {
                        v[k] = 1.0;
                    }
                }
                // Unknown words still get a small, stable signature so that
                // distinct non-color concepts do not collapse onto one vector.
                if v.iter().all(|&x| x == 0.0) {
                    let h = fnv1a(lower.as_bytes());
                    for (k, slot) in v.iter_mut().enumerate() {
                        *slot = ((h >> (k * 8)) & 0xff) as f32 / 255.0 - 0.5;
                    }
                }
                v
            })
            .collect())
    }
}

impl EmbeddingClient for ColorPrototypeEncoder {
    fn encoder_id(&self) -> String {
        format!(
            "color-prototype-v1(ctx={},temp={})",
            self.context_weight, self.temperature
        )
    }

    fn encode_images(&self, images: &[RgbImage]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(images.iter().map(|im| self.embed_one(im)).collect())
    }

    fn supports_concurrency(&self) -> bool {
        true
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::prompt::draw_circle;
    use image::Rgb;

    #[test]
    fn cosine_identities() {
        let v = [0.3f32, -1.2, 4.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v, &[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn circled_region_dominates_image_embedding() {
        let mut img = RgbImage::from_pixel(64, 64, Rgb([40, 180, 60]));
        for y in 0..20 {
            for x in 0..20 {
                img.put_pixel(x, y, Rgb([40, 70, 220]));
            }
        }
        let enc = ColorPrototypeEncoder::default();
        let text = enc
            .encode_texts(&["a blue patch".into(), "a green field".into()])
            .unwrap();
        let on_blue = draw_circle(&img, (10, 10), 8, 2, [255, 0, 0]);
        let on_green = draw_circle(&img, (45, 45), 8, 2, [255, 0, 0]);
        let e = enc.encode_images(&[on_blue, on_green]).unwrap();
        assert!(cosine(&e[0], &text[0]) > cosine(&e[0], &text[1]));
        assert!(cosine(&e[1], &text[1]) > cosine(&e[1], &text[0]));
    }
}
