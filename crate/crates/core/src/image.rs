//! Planar float images and the crop/resize used to build network inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::tensor::Tensor;

/// Channel-major (`C × H × W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("image", format!("{channels}x{height}x{width} image with {} values", data.len())));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Crops `rect` (may have fractional bounds) and resamples it bilinearly to
    /// `out_w × out_h`, clamping samples at the image edge.
    pub fn crop_resize(&self, rect: &Rect, out_w: usize, out_h: usize) -> Image {
        let sx = rect.w / out_w as f64;
        let sy = rect.h / out_h as f64;
        let taps = |start: f64, scale: f64, n: usize, size: usize| -> Vec<(usize, usize, f32)> {
            (0..n)
                .map(|i| {
                    let s = (start + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(size - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = taps(rect.x, sx, out_w, self.width);
        let ys = taps(rect.y, sy, out_h, self.height);
        let mut data = Vec::with_capacity(self.channels * out_w * out_h);
        for c in 0..self.channels {
            let p = self.plane(c);
            for &(y0, y1, ty) in &ys {
                let (r0, r1) = (&p[y0 * self.width..], &p[y1 * self.width..]);
                for &(x0, x1, tx) in &xs {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * tx;
                    data.push(top + (bot - top) * ty);
                }
            }
        }
        Image { channels: self.channels, height: out_h, width: out_w, data }
    }

    /// Pads on the bottom/right by mirror reflection (edge pixel not repeated).
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Image> {
        if height < self.height || width < self.width {
            return Err(Error::shape("reflect_pad", "target smaller than image"));
        }
        if height - self.height >= self.height.max(2) || width - self.width >= self.width.max(2) {
            return Err(Error::shape(
                "reflect_pad",
                format!("pad from {}x{} to {height}x{width} exceeds one reflection", self.height, self.width),
            ));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = reflect(y, self.height);
                for x in 0..width {
                    data.push(self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        Ok(Image { channels: self.channels, height, width, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Loads a PNG/PGM/other supported file as 1 (luma) or 3 (RGB) channels.
    pub fn load(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found")));
        }
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f32> = match channels {
            1 => img.into_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            3 => {
                let raw = img.into_rgb8().into_raw();
                let mut planar = vec![0.0; 3 * w * h];
                for (i, px) in raw.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        planar[c * w * h + i] = px[c] as f32 / 255.0;
                    }
                }
                planar
            }
            other => return Err(Error::Config(format!("unsupported channel count {other}"))),
        };
        Image::new(channels, h, w, data)
    }

    /// Writes an 8-bit PNG (grayscale or RGB).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| q(v)).collect())
                .expect("buffer size")
                .save(path),
            3 => {
                let n = self.width * self.height;
                let raw =
                    (0..n).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| q(self.data[c * n + i])).collect();
                image::RgbImage::from_raw(w, h, raw).expect("buffer size").save(path)
            }
            other => return Err(Error::Config(format!("cannot save {other}-channel image"))),
        };
        res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// 8-bit binary PGM of the first channel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.plane(0).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Stacks equally sized images into an `[N, C, H, W]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::shape("stack_images", "no images"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for (i, img) in images.iter().enumerate() {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::Sample { index: i, msg: "image size differs from the first in the batch".into() });
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)
}
