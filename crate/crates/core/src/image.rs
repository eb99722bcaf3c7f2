//! In-memory RGB image with float channels in [0, 1], plus the resize
//! primitives the pipeline needs (bilinear for images, nearest for label
//! grids).

use crate::error::{Error, Result};
use std::path::Path;

/// An H x W RGB image stored row-major with interleaved f32 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidConfig(format!(
                "raw image buffer has {} floats, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Bilinear resize with half-pixel centers (the standard image
    /// convention: src = (dst + 0.5) * scale - 0.5, clamped to the frame).
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> ImageBuf {
        let mut out = ImageBuf::new(new_height, new_width);
        for y in 0..new_height {
            let (y0, y1, wy) = bilinear_taps(y, new_height, self.height);
            for x in 0..new_width {
                let (x0, x1, wx) = bilinear_taps(x, new_width, self.width);
                let mut rgb = [0.0f32; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let p00 = self.data[(y0 * self.width + x0) * 3 + c] as f64;
                    let p01 = self.data[(y0 * self.width + x1) * 3 + c] as f64;
                    let p10 = self.data[(y1 * self.width + x0) * 3 + c] as f64;
                    let p11 = self.data[(y1 * self.width + x1) * 3 + c] as f64;
                    let top = p00 * (1.0 - wx) + p01 * wx;
                    let bot = p10 * (1.0 - wx) + p11 * wx;
                    *v = (top * (1.0 - wy) + bot * wy) as f32;
                }
                out.set(y, x, rgb);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let rgb = self.get(y, x);
                let px = [
                    (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(ImageBuf::from_fn(h, w, |y, x| {
            let p = img.get_pixel(x as u32, y as u32);
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        }))
    }
}

/// Source taps and interpolation weight for one destination coordinate.
/// Shared by image resizing and mask upsampling so both use the same
/// bilinear convention.
pub(crate) fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Nearest-neighbor index mapping used when resizing label grids back to
/// the original image size.
pub(crate) fn nearest_tap(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let scale = src_len as f64 / dst_len as f64;
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let idx = pos.round();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(src_len - 1)
    }
}
