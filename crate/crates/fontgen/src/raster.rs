use std::path::Path;

use crate::error::{Error, Result};

/// Square grayscale image with f32 samples in [0, 1]. Ink is 1, paper is 0.
/// Row-major storage, y major then x.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    size: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(size: usize) -> Self {
        Raster { size, data: vec![0.0; size * size] }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::config(format!(
                "raster data length {} does not match size {size}x{size}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::config("raster samples must lie in [0, 1]"));
        }
        Ok(Raster { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.size + x] = v;
    }

    /// Mean absolute difference against another raster of the same size.
    pub fn l1_to(&self, other: &Raster) -> Result<f32> {
        if self.size != other.size {
            return Err(Error::config("raster sizes differ"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok((sum / self.data.len() as f64) as f32)
    }

    /// Writes an 8-bit grayscale PNG. Samples quantize as round(255 * v), so
    /// a save/load round trip of already-quantized data is exact.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.size as u32, self.size as u32);
        for y in 0..self.size {
            for x in 0..self.size {
                let v = (self.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::integrity(format!("{}: png encode: {other}", path.display())),
            })
    }

    /// Reads a PNG back into [0, 1] samples. The file must be square.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::integrity(format!("{}: png decode: {other}", path.display())),
        })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        if w != h {
            return Err(Error::integrity(format!(
                "{}: expected a square glyph, got {w}x{h}",
                path.display()
            )));
        }
        let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Raster { size: w as usize, data })
    }

    /// Quantizes samples to the 8-bit grid PNG storage uses, in place.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }
}
