// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual-prompt grid geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID: usize = 7;
pub const DEFAULT_RADIUS: u32 = 32;

/// Where the first row/column of circle centers sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAnchor {
    /// Centers at `i * stride`, starting from pixel 0.
    #[default]
    Zero,
    /// Centers at `r + i * stride`, starting one radius in.
    Radius,
}

/// A uniform grid of circle centers over an image.
///
/// Strides are `floor(image / (grid - 1))`; centers are clamped to the last
/// pixel, so the final row/column can be closer than one stride to its
/// neighbour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_h: u32,
    pub image_w: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub radius: u32,
    pub stride_h: u32,
    pub stride_w: u32,
    #[serde(default)]
    pub anchor: GridAnchor,
    /// Row-major `(row, col)` pixel coordinates.
    pub centers: Vec<(u32, u32)>,
}

pub fn make_grid(
    image_h: u32,
    image_w: u32,
    grid_h: usize,
    grid_w: usize,
    radius: u32,
) -> Result<GridSpec> {
    make_grid_anchored(image_h, image_w, grid_h, grid_w, radius, GridAnchor::Zero)
}

pub fn make_grid_anchored(
    image_h: u32,
    image_w: u32,
    grid_h: usize,
    grid_w: usize,
    radius: u32,
    anchor: GridAnchor,
) -> Result<GridSpec> {
    if grid_h < 2 || grid_w < 2 {
        return Err(Error::geometry(format!(
            "grid must be at least 2x2, got {grid_h}x{grid_w}"
        )));
    }
    if radius < 1 {
        return Err(Error::geometry("circle radius must be >= 1"));
    }
    if image_h < 2 * radius || image_w < 2 * radius {
        return Err(Error::geometry(format!(
            "image {image_h}x{image_w} too small for radius {radius}"
        )));
    }
    if (image_h as usize) < grid_h - 1 || (image_w as usize) < grid_w - 1 {
        return Err(Error::geometry(format!(
            "image {image_h}x{image_w} cannot hold a {grid_h}x{grid_w} grid with a positive stride"
        )));
    }
    let stride_h = image_h / (grid_h as u32 - 1);
    let stride_w = image_w / (grid_w as u32 - 1);
    let offset = match anchor {
        GridAnchor::Zero => 0,
        GridAnchor::Radius => radius,
    };
    let mut centers = Vec::with_capacity(grid_h * grid_w);
    for i in 0..grid_h as u32 {
        let row = (offset + i * stride_h).min(image_h - 1);
        for j in 0..grid_w as u32 {
            let col = (offset + j * stride_w).min(image_w - 1);
            centers.push((row, col));
        }
    }
    Ok(GridSpec {
        image_h,
        image_w,
        grid_h,
        grid_w,
        radius,
        stride_h,
        stride_w,
        anchor,
        centers,
    })
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Checks the stored fields against a freshly derived grid.
    pub fn validate(&self) -> Result<()> {
        let fresh = make_grid_anchored(
            self.image_h,
            self.image_w,
            self.grid_h,
            self.grid_w,
            self.radius,
            self.anchor,
        )?;
        if &fresh != self {
            return Err(Error::integrity("grid spec fields are inconsistent"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_follow_floor_rule() {
        let g = make_grid(224, 224, 7, 7, 32).unwrap();
        assert_eq!((g.stride_h, g.stride_w), (37, 37));
        let g = make_grid(224, 224, 5, 5, 32).unwrap();
        assert_eq!((g.stride_h, g.stride_w), (56, 56));
    }

    #[test]
    fn last_center_clamps() {
        let g = make_grid(10, 10, 3, 3, 1).unwrap();
        assert_eq!(g.stride_h, 5);
        let rows: Vec<u32> = g.centers.iter().step_by(3).map(|c| c.0).collect();
        assert_eq!(rows, vec![0, 5, 9]);
        assert_eq!(g.centers.len(), 9);
    }

    #[test]
    fn radius_anchor_shifts_centers() {
        let g = make_grid_anchored(224, 224, 7, 7, 32, GridAnchor::Radius).unwrap();
        assert_eq!(g.centers[0], (32, 32));
        assert!(g.centers.iter().all(|&(r, c)| r < 224 && c < 224));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(make_grid(224, 224, 1, 7, 32).is_err());
        assert!(make_grid(224, 224, 7, 7, 0).is_err());
        assert!(make_grid(40, 224, 7, 7, 32).is_err());
    }

    proptest::proptest! {
        #[test]
        fn centers_stay_in_bounds(h in 2u32..400, w in 2u32..400, gh in 2usize..12, gw in 2usize..12, r in 1u32..8) {
            if let Ok(g) = make_grid(h, w, gh, gw, r) {
                proptest::prop_assert_eq!(g.centers.len(), gh * gw);
                for &(y, x) in &g.centers {
                    proptest::prop_assert!(y < h && x < w);
                }
                g.validate().unwrap();
            }
        }
    }
}
