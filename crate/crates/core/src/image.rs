//! Images as `H × W × C` tensors of `f64` in row-major HWC order.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Image(format!(
                "degenerate image shape {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(
                "image data",
                height * width * channels,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Image("non-finite pixel value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Checks the stimulus contract: RGB with every pixel in `[0, 1]`.
    pub fn validate_stimulus(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Image(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("pixel value outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Bilinear resize with half-pixel centers (corner alignment off).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys: Vec<_> = (0..out_h)
            .map(|y| source_coord(y, self.height, out_h))
            .collect();
        let xs: Vec<_> = (0..out_w)
            .map(|x| source_coord(x, self.width, out_w))
            .collect();
        let c = self.channels;
        let mut data = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let a = self.at(y0, x0, ch);
                    let b = self.at(y0, x1, ch);
                    let d = self.at(y1, x0, ch);
                    let e = self.at(y1, x1, ch);
                    let top = a + lx * (b - a);
                    let bottom = d + lx * (e - d);
                    data[(oy * out_w + ox) * c + ch] = top + ly * (bottom - top);
                }
            }
        }
        Image {
            height: out_h,
            width: out_w,
            channels: c,
            data,
        }
    }

    /// Luma conversion with weights (0.2125, 0.7154, 0.0721).
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| 0.2125 * p[0] + 0.7154 * p[1] + 0.0721 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Writes an 8-bit RGB PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Image("png export needs 3 channels".into()));
        }
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// The image as it reads back after an 8-bit PNG round trip.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|v| quantize(*v) as f64 / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Neighbouring source indices and interpolation weight for output index `o`.
fn source_coord(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}
