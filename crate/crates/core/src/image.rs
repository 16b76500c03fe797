//! RGB pixel tensors: decoding, resizing, augmentation primitives and
//! patch flattening.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Self {
        assert_eq!(pixels.dim().0, 3, "images are 3-channel");
        Self { pixels }
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((3, size, size), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Decodes any supported file and resizes it bilinearly to `size × size`
    /// without preserving aspect ratio. Single-channel sources are expanded to
    /// three channels.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::data(path, format!("decode failed: {e}")))?;
        let rgb = img
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        let (w, h) = rgb.dimensions();
        let mut pixels = Array3::zeros((3, h as usize, w as usize));
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = p[c] as f64 / 255.0;
            }
        }
        Self::new(pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::data(path, format!("encode failed: {e}")))
    }

    pub fn resized(&self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let dynamic = image::DynamicImage::ImageRgb8(self.to_rgb8());
        Self::from_rgb8(
            &dynamic
                .resize_exact(size as u32, size as u32, FilterType::Triangle)
                .to_rgb8(),
        )
    }

    /// Mirror around the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = self.pixels.clone();
        pixels.invert_axis(Axis(2));
        Self::new(pixels.as_standard_layout().to_owned())
    }

    /// ITU-R 601 luma replicated into all three channels.
    pub fn grayscale(&self) -> Self {
        let (_, h, w) = self.pixels.dim();
        let mut out = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let l = 0.299 * self.pixels[[0, y, x]]
                    + 0.587 * self.pixels[[1, y, x]]
                    + 0.114 * self.pixels[[2, y, x]];
                for c in 0..3 {
                    out[[c, y, x]] = l;
                }
            }
        }
        Self::new(out)
    }
}

/// Per-channel input normalization applied before patch flattening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PixelNorm {
    /// Plain `[0, 1]` scaling.
    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Preprocessing constants of the released CLIP checkpoints.
    pub const CLIP: Self = Self {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
    };
}

/// Flattens non-overlapping `patch × patch` tiles into rows of a matrix:
/// tiles in row-major grid order, features ordered (channel, dy, dx). This is
/// the im2col layout of a convolution with kernel = stride = `patch`.
pub fn patchify(img: &Image, patch: usize, norm: PixelNorm) -> Result<Mat> {
    let (_, h, w) = img.pixels.dim();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Mat::zeros((gh * gw, 3 * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let v = img.pixels[[c, gy * patch + dy, gx * patch + dx]];
                        out[[row, col]] = (v - norm.mean[c]) / norm.std[c];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize) -> Image {
        Image::new(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            ((c * 100 + y * size + x) % 97) as f64 / 97.0
        }))
    }

    #[test]
    fn patchify_layout() {
        let img = ramp(4);
        let p = patchify(&img, 2, PixelNorm::IDENTITY).unwrap();
        assert_eq!(p.dim(), (4, 12));
        // Grid cell (0, 1) is row 1; its first feature is channel 0 at (0, 2).
        assert_eq!(p[[1, 0]], img.pixels[[0, 0, 2]]);
        // Grid cell (1, 0), channel 2, dy = 1, dx = 1.
        assert_eq!(p[[2, 2 * 4 + 3]], img.pixels[[2, 3, 1]]);
        assert!(patchify(&img, 3, PixelNorm::IDENTITY).is_err());
    }

    #[test]
    fn flip_twice_is_identity_and_mirrors() {
        let img = ramp(5);
        let f = img.flip_horizontal();
        assert_eq!(f.pixels[[1, 2, 0]], img.pixels[[1, 2, 4]]);
        assert_eq!(f.flip_horizontal(), img);
    }

    #[test]
    fn grayscale_channels_agree() {
        let g = ramp(3).grayscale();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(g.pixels[[0, y, x]], g.pixels[[1, y, x]]);
                assert_eq!(g.pixels[[1, y, x]], g.pixels[[2, y, x]]);
            }
        }
    }

    #[test]
    fn png_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::filled(8, 0.5);
        img.save(&path).unwrap();
        let back = Image::load(&path, 4).unwrap();
        assert_eq!(back.height(), 4);
        assert!((back.pixels[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-12);
        let missing = Image::load(&dir.path().join("nope.png"), 4).unwrap_err();
        assert!(missing.to_string().contains("nope.png"));
    }
}
