//! Planar RGB image buffer in `[0, 1]` used throughout the pipeline.

use std::path::Path;

use crate::error::{ensure_arg, Result};

/// `[3, H, W]` row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(data.len() == 3 * width * height, "image buffer size mismatch");
        Ok(ImageBuf { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ImageBuf { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.plane();
        let i = y * self.width + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let p = self.plane();
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        ensure_arg!(bytes.len() == 3 * width * height, "rgb8 buffer size mismatch");
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[3 * i + c] as f64 / 255.0;
            }
        }
        Ok(ImageBuf { width, height, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.plane();
        let mut bytes = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                bytes[3 * i + c] = (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        bytes
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Re-encode through JPEG at the given quality, as a degradation
    /// transform for evaluation.
    pub fn jpeg_cycle(&self, quality: u8) -> Result<Self> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer sized to dimensions");
        let mut encoded: Vec<u8> = Vec::new();
        let mut cursor = std::io::Cursor::new(&mut encoded);
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut cursor, quality);
        img.write_with_encoder(encoder)?;
        let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)?
            .into_rgb8();
        Self::from_rgb8(decoded.width() as usize, decoded.height() as usize, decoded.as_raw())
    }

    /// Bilinear resize.
    pub fn resized(&self, new_width: usize, new_height: usize) -> Result<Self> {
        ensure_arg!(new_width >= 1 && new_height >= 1, "resize target must be positive");
        if new_width == self.width && new_height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let coords = (0..new_height * new_width).map(|i| {
            let y = (i / new_width) as f64;
            let x = (i % new_width) as f64;
            (((x + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64),
             ((y + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64))
        });
        let taps = crate::autodiff::bilinear_taps(self.height, self.width, coords);
        let plane = self.plane();
        let mut data = Vec::with_capacity(3 * new_width * new_height);
        for c in 0..3 {
            data.extend(crate::autodiff::apply_taps_plain(
                &self.data[c * plane..(c + 1) * plane],
                &taps,
            ));
        }
        ImageBuf::new(new_width, new_height, data)
    }
}
