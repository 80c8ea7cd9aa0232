// SPDX-License-Identifier: MIT OR Apache-2.0

//! Red-circle visual prompts.

use image::{Rgb, RgbImage};

pub const PROMPT_COLOR: [u8; 3] = [255, 0, 0];
pub const PROMPT_LINE_WIDTH: u32 = 2;

/// Whether pixel `(row, col)` lies on the ring of radius `r` and the given
/// line width around `center`: `|dist - r| <= width / 2`.
#[inline]
pub fn on_ring(row: i64, col: i64, center: (u32, u32), r: u32, width: u32) -> bool {
    let dy = (row - center.0 as i64) as f64;
    let dx = (col - center.1 as i64) as f64;
    let dist = (dy * dy + dx * dx).sqrt();
    (dist - r as f64).abs() <= width as f64 / 2.0
}

/// Paints a non-anti-aliased ring onto a copy of `image`.
///
/// `center` is `(row, col)`. Ring pixels falling outside the image are
/// clipped; every other pixel is copied unchanged.
pub fn draw_circle(
    image: &RgbImage,
    center: (u32, u32),
    r: u32,
    line_width: u32,
    color: [u8; 3],
) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = image.dimensions();
    let reach = (r + line_width) as i64;
    let (cy, cx) = (center.0 as i64, center.1 as i64);
    let y0 = (cy - reach).max(0);
    let y1 = (cy + reach).min(h as i64 - 1);
    let x0 = (cx - reach).max(0);
    let x1 = (cx + reach).min(w as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if on_ring(y, x, center, r, line_width) {
                out.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
    out
}
