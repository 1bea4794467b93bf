//! The optimized patch: an RGB field in `[0, 1]` plus a per-pixel alpha
//! channel. Erasure (decoupling, occlusion) is carried entirely by alpha;
//! RGB values are never overwritten, so the smoothness losses always see the
//! full color field and compositing treats erased pixels as transparent.

use std::path::Path;

use crate::error::{ensure_arg, Error, Result};

/// RGB stored planar (`[3, H, W]` row-major), alpha stored as one `[H, W]`
/// plane with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    width: usize,
    height: usize,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, rgb: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        ensure_arg!(width >= 1 && height >= 1, "patch dimensions must be positive");
        ensure_arg!(
            rgb.len() == 3 * width * height,
            "rgb length {} does not match 3x{}x{}",
            rgb.len(),
            height,
            width
        );
        ensure_arg!(
            alpha.len() == width * height,
            "alpha length {} does not match {}x{}",
            alpha.len(),
            height,
            width
        );
        ensure_arg!(
            rgb.iter().all(|v| (0.0..=1.0).contains(v)),
            "rgb values must lie in [0, 1]"
        );
        ensure_arg!(
            alpha.iter().all(|v| (0.0..=1.0).contains(v)),
            "alpha values must lie in [0, 1]"
        );
        Ok(Patch { width, height, rgb, alpha })
    }

    /// Fully opaque patch from RGB data.
    pub fn opaque(width: usize, height: usize, rgb: Vec<f64>) -> Result<Self> {
        let alpha = vec![1.0; width * height];
        Patch::new(width, height, rgb, alpha)
    }

    /// Uniform-color opaque patch.
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Result<Self> {
        let mut rgb = Vec::with_capacity(3 * width * height);
        for c in color {
            rgb.extend(std::iter::repeat(c).take(width * height));
        }
        Patch::opaque(width, height, rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[f64] {
        &self.rgb
    }

    pub fn rgb_mut(&mut self) -> &mut [f64] {
        &mut self.rgb
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.rgb, self.alpha)
    }

    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        Patch::new(self.width, self.height, self.rgb.clone(), alpha)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.rgb[i], self.rgb[plane + i], self.rgb[2 * plane + i]]
    }

    pub fn is_opaque(&self) -> bool {
        self.alpha.iter().all(|&a| a == 1.0)
    }

    /// Spatial indices of pixels with alpha above 0.5, used as the "kept"
    /// set by alpha-aware losses.
    pub fn kept_indices(&self) -> Vec<u32> {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.5)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Bilinear resize of RGB and alpha to a new size.
    pub fn resized(&self, new_width: usize, new_height: usize) -> Result<Self> {
        ensure_arg!(new_width >= 1 && new_height >= 1, "resize target must be positive");
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let coords = (0..new_height * new_width).map(|i| {
            let y = (i / new_width) as f64;
            let x = (i % new_width) as f64;
            (((x + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64),
             ((y + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64))
        });
        let taps = crate::autodiff::bilinear_taps(self.height, self.width, coords);
        let plane = self.width * self.height;
        let mut rgb = Vec::with_capacity(3 * new_width * new_height);
        for c in 0..3 {
            rgb.extend(crate::autodiff::apply_taps_plain(&self.rgb[c * plane..(c + 1) * plane], &taps));
        }
        for v in rgb.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let mut alpha = crate::autodiff::apply_taps_plain(&self.alpha, &taps);
        for v in alpha.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Patch::new(new_width, new_height, rgb, alpha)
    }

    /// Save as a 16-bit RGB PNG. Only opaque patches can be exported; erasure
    /// is a transient training/evaluation state, not part of the artifact.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_arg!(
            self.is_opaque(),
            "only opaque patches can be saved as PNG; alpha is transient"
        );
        let plane = self.width * self.height;
        let mut buf: Vec<u16> = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                buf.push(quantize16(self.rgb[c * plane + i]));
            }
        }
        let img = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            buf,
        )
        .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut rgb = vec![0.0; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                rgb[c * plane + i] = px.0[c] as f64 / u16::MAX as f64;
            }
        }
        Patch::opaque(w, h, rgb)
    }
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16
}

/// Sidecar metadata written next to every exported patch PNG.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PatchSidecar {
    /// Alpha semantics of the stored image; always "opaque" for exports.
    pub alpha: String,
    pub config_hash: String,
    pub epoch: usize,
}

impl PatchSidecar {
    pub fn new(config_hash: impl Into<String>, epoch: usize) -> Self {
        PatchSidecar { alpha: "opaque".into(), config_hash: config_hash.into(), epoch }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "patch sidecar",
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Patch::opaque(2, 2, vec![0.5; 12]).is_ok());
        assert!(Patch::opaque(2, 2, vec![1.5; 12]).is_err());
        assert!(Patch::new(2, 2, vec![0.5; 12], vec![2.0; 4]).is_err());
    }

    #[test]
    fn png_round_trip_is_stable_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let rgb: Vec<f64> = (0..27).map(|i| i as f64 / 26.0).collect();
        let p = Patch::opaque(3, 3, rgb).unwrap();
        p.save_png(&path).unwrap();
        let q = Patch::load_png(&path).unwrap();
        // Quantization is idempotent: a loaded patch saves to identical bytes.
        let path2 = dir.path().join("q.png");
        q.save_png(&path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
        let r = Patch::load_png(&path2).unwrap();
        assert_eq!(q, r);
    }
}
