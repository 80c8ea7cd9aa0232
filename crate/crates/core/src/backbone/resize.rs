// SPDX-License-Identifier: MIT OR Apache-2.0

//! Channel-wise bilinear resampling with the align-corners convention.
//!
//! Output pixel `i` samples source coordinate `i * (in - 1) / (out - 1)`,
//! so corner values are reproduced exactly and every output is a convex
//! combination of at most four inputs (no overshoot).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (x.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, x - lo as f64)
}

/// Resizes one 2-D plane.
pub fn resize_plane(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows: Vec<_> = (0..out_h).map(|i| source_coord(i, in_h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| source_coord(j, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let a = src[[y0, x0]] as f64;
        let b = src[[y0, x1]] as f64;
        let c = src[[y1, x0]] as f64;
        let d = src[[y1, x1]] as f64;
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        let v = top + (bot - top) * fy;
        // Clamp away rounding drift so constants and bounds are exact.
        let lo = a.min(b).min(c).min(d);
        let hi = a.max(b).max(c).max(d);
        v.clamp(lo, hi) as f32
    })
}

/// Resizes every channel of a `[C, H, W]` volume.
pub fn resize_volume(src: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for k in 0..c {
        let plane = resize_plane(src.index_axis(ndarray::Axis(0), k), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(0), k).assign(&plane);
    }
    out
}
