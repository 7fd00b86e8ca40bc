//! Decoding, bilinear resizing and per-channel normalization of RGB images.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(x - mean) / std` applied to values in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            out.push(format!("normalization std must be positive, got {:?}", self.std));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            out.push(format!("normalization mean must be finite, got {:?}", self.mean));
        }
        out
    }

    /// Normalizes a `[3×H×W]` tensor of `[0, 1]` values in place.
    pub fn apply(&self, image: &mut Tensor<f32>) {
        let plane = image.numel() / 3;
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }
}

fn planar(img: &Rgb32FImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c];
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent planar buffer")
}

/// Resizes (bilinear, skipped when the size already matches) and converts to a
/// normalized `[3×height×width]` tensor.
pub fn rgb_to_tensor(img: &RgbImage, height: usize, width: usize, norm: &Normalization) -> Tensor<f32> {
    let f: Rgb32FImage = ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
    });
    let resized = if (f.width() as usize, f.height() as usize) == (width, height) {
        f
    } else {
        imageops::resize(&f, width as u32, height as u32, FilterType::Triangle)
    };
    let mut t = planar(&resized);
    norm.apply(&mut t);
    t
}

pub fn load_image(path: &Path, height: usize, width: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8(), height, width, norm))
}

/// Writes a `[3×H×W]` tensor of `[0, 1]` values as an 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected a 3×H×W image, got {:?}", image.shape())));
    };
    let d = image.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
