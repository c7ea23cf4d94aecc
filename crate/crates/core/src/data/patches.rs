//! Tiling whole-slide images into fixed-size patches.

use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Instance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    /// Grayscale intensity (on a 0..1 scale) at or above which a pixel counts
    /// as white.
    pub white_threshold: f64,
    /// Patches whose white fraction reaches this value are discarded.
    pub white_fraction_cutoff: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::colon()
    }
}

impl PatchSpec {
    pub fn with_size(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: patch_size,
            white_threshold: 0.9,
            white_fraction_cutoff: 0.75,
        }
    }

    pub fn colon() -> Self {
        Self::with_size(27)
    }

    pub fn breast() -> Self {
        Self::with_size(32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::config("patch_size and stride must be >= 1"));
        }
        if !(self.white_fraction_cutoff > 0.0 && self.white_fraction_cutoff <= 1.0) {
            return Err(Error::config(format!(
                "white_fraction_cutoff must lie in (0, 1], got {}",
                self.white_fraction_cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.white_threshold) {
            return Err(Error::config("white_threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of patch rows and columns that fit entirely inside the image.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        let fit = |n: usize| {
            if n < self.patch_size {
                0
            } else {
                (n - self.patch_size) / self.stride + 1
            }
        };
        (fit(height), fit(width))
    }
}

/// A kept patch and the pixel coordinates of its top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub instance: Instance,
    pub row: usize,
    pub col: usize,
}

impl Patch {
    pub fn contains(&self, y: f64, x: f64, size: usize) -> bool {
        let (r, c, s) = (self.row as f64, self.col as f64, size as f64);
        y >= r && y < r + s && x >= c && x < c + s
    }
}

/// Pixel grayscale: the value itself for one channel, Rec. 601 luma for three,
/// otherwise the channel mean.
fn gray(patch: &Array3<f64>, y: usize, x: usize) -> f64 {
    let c = patch.dim().0;
    match c {
        1 => patch[[0, y, x]],
        3 => 0.299 * patch[[0, y, x]] + 0.587 * patch[[1, y, x]] + 0.114 * patch[[2, y, x]],
        _ => (0..c).map(|ch| patch[[ch, y, x]]).sum::<f64>() / c as f64,
    }
}

/// Fraction of pixels whose grayscale intensity is at least `white_threshold`.
pub fn white_fraction(patch: &Instance, white_threshold: f64) -> f64 {
    let data = patch.data();
    let (_, h, w) = data.dim();
    let mut white = 0usize;
    for y in 0..h {
        for x in 0..w {
            if gray(data, y, x) >= white_threshold {
                white += 1;
            }
        }
    }
    white as f64 / (h * w) as f64
}

/// Non-overlapping (for `stride == patch_size`) tiling in row-major order,
/// dropping partial border strips and mostly-white background patches.
pub fn extract_patches_with_origin(image: &Array3<f64>, spec: &PatchSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    let (_, h, w) = image.dim();
    let (rows, cols) = spec.grid(h, w);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than one {0}x{0} patch",
            spec.patch_size
        )));
    }
    let p = spec.patch_size;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * spec.stride, c * spec.stride);
            let instance = Instance::new(image.slice(s![.., y..y + p, x..x + p]).to_owned())?;
            if white_fraction(&instance, spec.white_threshold) < spec.white_fraction_cutoff {
                out.push(Patch { instance, row: y, col: x });
            }
        }
    }
    Ok(out)
}

pub fn extract_patches(image: &Array3<f64>, spec: &PatchSpec) -> Result<Vec<Instance>> {
    Ok(extract_patches_with_origin(image, spec)?
        .into_iter()
        .map(|p| p.instance)
        .collect())
}

/// Reads an RGB image as a `(3, height, width)` array scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_grid_counts() {
        assert_eq!(PatchSpec::colon().grid(500, 500), (18, 18));
        assert_eq!(PatchSpec::breast().grid(896, 768), (28, 24));
        assert_eq!(PatchSpec::colon().grid(26, 500), (0, 18));
    }

    #[test]
    fn white_fraction_examples() {
        let black = Instance::new(Array3::zeros((3, 4, 4))).unwrap();
        let white = Instance::new(Array3::ones((3, 4, 4))).unwrap();
        assert_eq!(white_fraction(&black, 0.9), 0.0);
        assert_eq!(white_fraction(&white, 0.9), 1.0);
        let checker = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 2) as f64);
        assert_eq!(white_fraction(&Instance::new(checker).unwrap(), 0.9), 0.5);
    }

    #[test]
    fn white_image_yields_nothing() {
        let img = Array3::ones((3, 100, 100));
        assert!(extract_patches(&img, &PatchSpec::colon()).unwrap().is_empty());
    }

    #[test]
    fn dark_image_keeps_every_candidate_in_order() {
        let img = Array3::from_elem((3, 60, 90), 0.3);
        let patches = extract_patches_with_origin(&img, &PatchSpec::colon()).unwrap();
        assert_eq!(patches.len(), 2 * 3);
        let origins: Vec<(usize, usize)> = patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 27), (0, 54), (27, 0), (27, 27), (27, 54)]);
    }

    #[test]
    fn too_small_image_errors() {
        assert!(extract_patches(&Array3::zeros((3, 20, 20)), &PatchSpec::colon()).is_err());
    }
}
