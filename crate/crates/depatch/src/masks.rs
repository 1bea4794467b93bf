//! Block-wise decoupling masks.
//!
//! During optimization the patch is divided into an `n x n` grid of blocks
//! and each block is independently erased with probability `r` (the
//! decoupling ratio). The rendered pixel mask is then shifted toroidally so
//! every possible segment boundary gets decoupled, not just the fixed grid
//! lines; wrap-around keeps the erased-pixel count, and therefore the
//! effective ratio, exact. Erasure is expressed through the patch alpha
//! channel: RGB values are never touched.
//!
//! The module also provides the four information-deletion baseline masks
//! (Hide-and-Seek, Cutout, GridMask, Random Erasing) used for comparison
//! runs. Unlike decoupling, those are applied by zeroing RGB, matching the
//! original methods' fixed-value fills.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::patch::Patch;

/// An `n x n` binary block grid; 1 = keep, 0 = erase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGrid {
    n: usize,
    cells: Vec<u8>,
}

impl BlockGrid {
    pub fn new(n: usize, cells: Vec<u8>) -> Result<Self> {
        ensure_arg!(n >= 1, "granularity n must be positive, got {n}");
        ensure_arg!(cells.len() == n * n, "expected {}x{} cells, got {}", n, n, cells.len());
        ensure_arg!(cells.iter().all(|&c| c <= 1), "cells must be 0 or 1");
        Ok(BlockGrid { n, cells })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.n + col]
    }

    pub fn erased_fraction(&self) -> f64 {
        let erased = self.cells.iter().filter(|&&c| c == 0).count();
        erased as f64 / self.cells.len() as f64
    }
}

/// Toroidal shift offset in pixels, normalized modulo the mask dimensions
/// when applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftOffset {
    pub s_h: i64,
    pub s_v: i64,
}

impl ShiftOffset {
    pub const ZERO: ShiftOffset = ShiftOffset { s_h: 0, s_v: 0 };

    pub fn new(s_h: i64, s_v: i64) -> Self {
        ShiftOffset { s_h, s_v }
    }

    /// Uniform offset over `[0, w) x [0, h)`.
    pub fn sample(w: usize, h: usize, rng: &mut impl Rng) -> Self {
        ShiftOffset { s_h: rng.gen_range(0..w as i64), s_v: rng.gen_range(0..h as i64) }
    }

    fn normalized(&self, w: usize, h: usize) -> (usize, usize) {
        (self.s_h.rem_euclid(w as i64) as usize, self.s_v.rem_euclid(h as i64) as usize)
    }
}

/// A rendered per-pixel binary mask; 1 = keep, 0 = erase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        ensure_arg!(values.len() == width * height, "mask size mismatch");
        ensure_arg!(values.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(PixelMask { width, height, values })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        PixelMask { width, height, values: vec![1; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    pub fn as_alpha(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Export as an 8-bit grayscale PNG: 0 = erased, 255 = kept.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.values.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Sample an `n x n` grid with each cell independently erased with
/// probability `r`.
pub fn sample_block_grid(n: usize, r: f64, rng: &mut impl Rng) -> Result<BlockGrid> {
    ensure_arg!(n >= 1, "granularity n must be positive, got {n}");
    ensure_arg!((0.0..=1.0).contains(&r), "ratio r must lie in [0, 1], got {r}");
    let cells = (0..n * n)
        .map(|_| if rng.gen::<f64>() < r { 0u8 } else { 1u8 })
        .collect();
    BlockGrid::new(n, cells)
}

/// Rasterize a block grid to pixels. Block boundaries sit at
/// `floor(k * H / n)` / `floor(k * W / n)`, so block sizes differ by at most
/// one pixel when the dimensions do not divide evenly; pixel `(x, y)`
/// belongs to block `(floor(y * n / H), floor(x * n / W))`.
pub fn render_pixel_mask(grid: &BlockGrid, width: usize, height: usize) -> Result<PixelMask> {
    let n = grid.n();
    ensure_arg!(width >= n && height >= n, "mask {width}x{height} smaller than grid {n}x{n}");
    let mut values = vec![0u8; width * height];
    for y in 0..height {
        let row = y * n / height;
        for x in 0..width {
            let col = x * n / width;
            values[y * width + x] = grid.cell(row, col);
        }
    }
    PixelMask::new(width, height, values)
}

/// Toroidal translation: output pixel `(x, y)` takes input pixel
/// `((x - s_h) mod W, (y - s_v) mod H)`. The multiset of values is
/// preserved exactly, so the erased-pixel count never changes.
pub fn border_shift(mask: &PixelMask, offset: ShiftOffset) -> PixelMask {
    let (w, h) = (mask.width, mask.height);
    let (sh, sv) = offset.normalized(w, h);
    let mut values = vec![0u8; w * h];
    for y in 0..h {
        let sy = (y + h - sv) % h;
        for x in 0..w {
            let sx = (x + w - sh) % w;
            values[y * w + x] = mask.values[sy * w + sx];
        }
    }
    PixelMask { width: w, height: h, values }
}

/// Full decoupling operation: sample a block grid, rasterize, shift, and
/// attach the result as the patch's alpha channel. RGB is untouched;
/// compositing later treats erased pixels as transparent, which is also what
/// zeroes their gradient.
pub fn decouple(
    patch: &Patch,
    n: usize,
    r: f64,
    offset: ShiftOffset,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let grid = sample_block_grid(n, r, rng)?;
    let mask = render_pixel_mask(&grid, patch.width(), patch.height())?;
    let shifted = border_shift(&mask, offset);
    apply_decoupling_mask(patch, &shifted)
}

/// Attach an already-rendered mask as the patch alpha (composed with any
/// existing transparency).
pub fn apply_decoupling_mask(patch: &Patch, mask: &PixelMask) -> Result<Patch> {
    ensure_arg!(
        mask.width == patch.width() && mask.height == patch.height(),
        "mask {}x{} does not match patch {}x{}",
        mask.width,
        mask.height,
        patch.width(),
        patch.height()
    );
    let alpha: Vec<f64> = patch
        .alpha()
        .iter()
        .zip(&mask.values)
        .map(|(&a, &m)| a * m as f64)
        .collect();
    patch.with_alpha(alpha)
}

/// The four information-deletion baselines. Parameter defaults follow the
/// methods' canonical settings and are all overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineMaskMode {
    /// Fixed grid of equal patches, each hidden independently.
    Has { grid: usize, hide_prob: f64 },
    /// One axis-aligned square fully zeroed, center uniform over the image
    /// (clipped at borders). `side_frac` is relative to the min dimension.
    Cutout { side_frac: f64 },
    /// Periodic grid of square holes.
    Gridmask { unit: usize, keep_ratio: f64 },
    /// With probability `prob`, one rectangle of uniformly sampled area
    /// fraction and aspect ratio is zeroed.
    RandomErasing {
        prob: f64,
        area: (f64, f64),
        aspect: (f64, f64),
    },
}

impl BaselineMaskMode {
    pub fn has_default() -> Self {
        BaselineMaskMode::Has { grid: 4, hide_prob: 0.5 }
    }

    pub fn cutout_default() -> Self {
        BaselineMaskMode::Cutout { side_frac: 0.5 }
    }

    pub fn gridmask_default() -> Self {
        BaselineMaskMode::Gridmask { unit: 0, keep_ratio: 0.6 }
    }

    pub fn random_erasing_default() -> Self {
        BaselineMaskMode::RandomErasing { prob: 1.0, area: (0.02, 0.4), aspect: (0.3, 3.3) }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineMaskMode::Has { grid, hide_prob } => {
                ensure_arg!(*grid >= 1, "HaS grid must be positive");
                ensure_arg!((0.0..=1.0).contains(hide_prob), "HaS hide probability in [0,1]");
            }
            BaselineMaskMode::Cutout { side_frac } => {
                ensure_arg!((0.0..=1.0).contains(side_frac), "Cutout side fraction in [0,1]");
            }
            BaselineMaskMode::Gridmask { keep_ratio, .. } => {
                ensure_arg!((0.0..=1.0).contains(keep_ratio), "GridMask keep ratio in [0,1]");
            }
            BaselineMaskMode::RandomErasing { prob, area, aspect } => {
                ensure_arg!((0.0..=1.0).contains(prob), "RE probability in [0,1]");
                ensure_arg!(
                    0.0 <= area.0 && area.0 <= area.1 && area.1 <= 1.0,
                    "RE area bounds must satisfy 0 <= lo <= hi <= 1"
                );
                ensure_arg!(
                    0.0 < aspect.0 && aspect.0 <= aspect.1,
                    "RE aspect bounds must be positive and ordered"
                );
            }
        }
        Ok(())
    }
}

/// Sample a baseline deletion mask of the given size.
pub fn sample_baseline_mask(
    mode: &BaselineMaskMode,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<PixelMask> {
    mode.validate()?;
    ensure_arg!(width >= 1 && height >= 1, "mask dimensions must be positive");
    let mut values = vec![1u8; width * height];
    match *mode {
        BaselineMaskMode::Has { grid, hide_prob } => {
            for row in 0..grid {
                for col in 0..grid {
                    if rng.gen::<f64>() < hide_prob {
                        let y0 = row * height / grid;
                        let y1 = (row + 1) * height / grid;
                        let x0 = col * width / grid;
                        let x1 = (col + 1) * width / grid;
                        fill_rect(&mut values, width, x0, y0, x1, y1);
                    }
                }
            }
        }
        BaselineMaskMode::Cutout { side_frac } => {
            let side = (side_frac * width.min(height) as f64).round() as i64;
            if side > 0 {
                let cx = rng.gen_range(0..width as i64);
                let cy = rng.gen_range(0..height as i64);
                let x0 = (cx - side / 2).max(0) as usize;
                let y0 = (cy - side / 2).max(0) as usize;
                let x1 = ((cx - side / 2 + side).max(0) as usize).min(width);
                let y1 = ((cy - side / 2 + side).max(0) as usize).min(height);
                fill_rect(&mut values, width, x0, y0, x1, y1);
            }
        }
        BaselineMaskMode::Gridmask { unit, keep_ratio } => {
            // unit == 0 picks a unit from [min_dim/6, min_dim/3].
            let d = if unit == 0 {
                let lo = (width.min(height) / 6).max(2);
                let hi = (width.min(height) / 3).max(lo + 1);
                rng.gen_range(lo..hi)
            } else {
                unit.max(2)
            };
            let hole = ((1.0 - keep_ratio) * d as f64).round() as usize;
            if hole > 0 {
                let ox = rng.gen_range(0..d);
                let oy = rng.gen_range(0..d);
                for y in 0..height {
                    let in_y = (y + d - oy % d) % d < hole;
                    if !in_y {
                        continue;
                    }
                    for x in 0..width {
                        if (x + d - ox % d) % d < hole {
                            values[y * width + x] = 0;
                        }
                    }
                }
            }
        }
        BaselineMaskMode::RandomErasing { prob, area, aspect } => {
            if rng.gen::<f64>() < prob {
                let total = (width * height) as f64;
                for _ in 0..100 {
                    let target = rng.gen_range(area.0..=area.1) * total;
                    // Log-uniform aspect, as in the reference implementation.
                    let ar = (rng.gen_range(aspect.0.ln()..=aspect.1.ln())).exp();
                    let rh = (target * ar).sqrt().round() as usize;
                    let rw = (target / ar).sqrt().round() as usize;
                    if rh >= 1 && rw >= 1 && rh <= height && rw <= width {
                        let y0 = rng.gen_range(0..=height - rh);
                        let x0 = rng.gen_range(0..=width - rw);
                        fill_rect(&mut values, width, x0, y0, x0 + rw, y0 + rh);
                        break;
                    }
                }
            }
        }
    }
    PixelMask::new(width, height, values)
}

/// Apply a baseline deletion mask by zeroing RGB (fixed-value fill), the
/// semantics of the original augmentation methods. Alpha stays opaque.
pub fn apply_baseline_mask(patch: &Patch, mask: &PixelMask) -> Result<Patch> {
    ensure_arg!(
        mask.width == patch.width() && mask.height == patch.height(),
        "mask does not match patch dimensions"
    );
    let plane = patch.width() * patch.height();
    let mut rgb = patch.rgb().to_vec();
    for (i, &m) in mask.values.iter().enumerate() {
        if m == 0 {
            for c in 0..3 {
                rgb[c * plane + i] = 0.0;
            }
        }
    }
    Patch::new(patch.width(), patch.height(), rgb, patch.alpha().to_vec())
}

fn fill_rect(values: &mut [u8], width: usize, x0: usize, y0: usize, x1: usize, y1: usize) {
    for y in y0..y1 {
        for x in x0..x1 {
            values[y * width + x] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;
    use proptest::prelude::*;

    fn rng() -> rand_chacha::ChaCha12Rng {
        SeedStreams::new(42).stream("masks-test")
    }

    #[test]
    fn zero_ratio_keeps_all() {
        let g = sample_block_grid(1, 0.0, &mut rng()).unwrap();
        assert_eq!(g.cells(), &[1]);
    }

    #[test]
    fn ratio_one_erases_all() {
        let g = sample_block_grid(2, 1.0, &mut rng()).unwrap();
        assert_eq!(g.cells(), &[0, 0, 0, 0]);
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(sample_block_grid(0, 0.5, &mut rng()).is_err());
        assert!(sample_block_grid(2, -0.1, &mut rng()).is_err());
        assert!(sample_block_grid(2, 1.1, &mut rng()).is_err());
        let g = sample_block_grid(3, 0.5, &mut rng()).unwrap();
        assert!(render_pixel_mask(&g, 2, 8).is_err());
    }

    #[test]
    fn erased_fraction_converges_to_ratio() {
        // Monte Carlo mean vs the Bernoulli expectation, binomial 4-sigma band.
        let (n, r, samples) = (6, 0.2, 100_000usize);
        let mut rng = rng();
        let mut erased = 0usize;
        for _ in 0..samples {
            let g = sample_block_grid(n, r, &mut rng).unwrap();
            erased += g.cells().iter().filter(|&&c| c == 0).count();
        }
        let frac = erased as f64 / (samples * n * n) as f64;
        assert!((0.19..=0.21).contains(&frac), "erased fraction {frac}");
        let se = (r * (1.0 - r) / (samples * n * n) as f64).sqrt();
        assert!((frac - r).abs() < 4.0 * se, "fraction {frac} outside 4 SE of {r}");
    }

    #[test]
    fn render_trivial_grids() {
        let g = BlockGrid::new(1, vec![1]).unwrap();
        let m = render_pixel_mask(&g, 4, 4).unwrap();
        assert_eq!(m.values(), &[1u8; 16][..]);

        let g = BlockGrid::new(2, vec![1, 0, 0, 1]).unwrap();
        let m = render_pixel_mask(&g, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = u8::from((x < 2) == (y < 2));
                assert_eq!(m.get(x, y), expected, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn render_block_boundaries_match_direct_assignment() {
        // Brute-force pixel-to-block assignment as an independent check.
        let mut rng = rng();
        let g = sample_block_grid(3, 0.5, &mut rng).unwrap();
        let m = render_pixel_mask(&g, 300, 300).unwrap();
        for y in 0..300 {
            for x in 0..300 {
                let row = if y < 100 { 0 } else if y < 200 { 1 } else { 2 };
                let col = if x < 100 { 0 } else if x < 200 { 1 } else { 2 };
                assert_eq!(m.get(x, y), g.cell(row, col));
            }
        }
    }

    #[test]
    fn border_shift_identity_and_wrap() {
        let m = PixelMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(border_shift(&m, ShiftOffset::ZERO), m);
        assert_eq!(border_shift(&m, ShiftOffset::new(2, 2)), m);
        // [[a,b],[c,d]] shifted by (1,0) -> [[b,a],[d,c]]
        let shifted = border_shift(&m, ShiftOffset::new(1, 0));
        assert_eq!(shifted.values(), &[0, 1, 1, 0]);
    }

    #[test]
    fn border_shift_preserves_zeros_and_inverts_exhaustively() {
        let mut rng = rng();
        let g = sample_block_grid(4, 0.4, &mut rng).unwrap();
        let m = render_pixel_mask(&g, 8, 8).unwrap();
        let zeros = m.zero_count();
        for sh in 0..8 {
            for sv in 0..8 {
                let fwd = border_shift(&m, ShiftOffset::new(sh, sv));
                assert_eq!(fwd.zero_count(), zeros);
                let back = border_shift(&fwd, ShiftOffset::new(-sh, -sv));
                assert_eq!(back, m, "offset ({sh},{sv}) not inverted");
            }
        }
    }

    #[test]
    fn decouple_extremes_and_rgb_preservation() {
        let patch = Patch::filled(8, 8, [0.3, 0.6, 0.9]).unwrap();
        let mut r = rng();
        let kept = decouple(&patch, 2, 0.0, ShiftOffset::new(3, 5), &mut r).unwrap();
        assert!(kept.alpha().iter().all(|&a| a == 1.0));
        assert_eq!(kept.rgb(), patch.rgb());

        let gone = decouple(&patch, 2, 1.0, ShiftOffset::new(3, 5), &mut r).unwrap();
        assert!(gone.alpha().iter().all(|&a| a == 0.0));
        assert_eq!(gone.rgb(), patch.rgb());
    }

    #[test]
    fn decouple_composes_render_and_shift() {
        // Compose the reference steps independently and compare alphas.
        let patch = Patch::filled(300, 300, [0.5, 0.5, 0.5]).unwrap();
        let offset = ShiftOffset::new(37, 81);
        let seed = SeedStreams::new(7);
        let mut a = seed.stream("decouple");
        let out = decouple(&patch, 2, 0.5, offset, &mut a).unwrap();

        let mut b = seed.stream("decouple");
        let grid = sample_block_grid(2, 0.5, &mut b).unwrap();
        let mask = render_pixel_mask(&grid, 300, 300).unwrap();
        let shifted = border_shift(&mask, offset);
        assert_eq!(out.alpha(), shifted.as_alpha().as_slice());
    }

    #[test]
    fn cutout_zero_side_and_re_zero_prob_are_identity() {
        let mut r = rng();
        let m = sample_baseline_mask(&BaselineMaskMode::Cutout { side_frac: 0.0 }, 16, 16, &mut r)
            .unwrap();
        assert_eq!(m.zero_count(), 0);
        let m = sample_baseline_mask(
            &BaselineMaskMode::RandomErasing { prob: 0.0, area: (0.02, 0.4), aspect: (0.3, 3.3) },
            16,
            16,
            &mut r,
        )
        .unwrap();
        assert_eq!(m.zero_count(), 0);
    }

    #[test]
    fn gridmask_erased_fraction_matches_expectation() {
        // With tiling plus a uniform offset, each pixel is erased with
        // probability (hole/d)^2.
        let (d, k) = (10usize, 0.6);
        let hole = ((1.0 - k) * d as f64).round() as usize;
        let expected = (hole as f64 / d as f64).powi(2);
        let mut r = rng();
        let mut erased = 0usize;
        let samples = 10_000;
        for _ in 0..samples {
            let m = sample_baseline_mask(
                &BaselineMaskMode::Gridmask { unit: d, keep_ratio: k },
                40,
                40,
                &mut r,
            )
            .unwrap();
            erased += m.zero_count();
        }
        let frac = erased as f64 / (samples * 1600) as f64;
        assert!((frac - expected).abs() < 0.05, "got {frac}, expected {expected}");
    }

    #[test]
    fn baseline_mask_zeroes_rgb_but_not_alpha() {
        let patch = Patch::filled(8, 8, [0.4, 0.4, 0.4]).unwrap();
        let m = PixelMask::new(8, 8, {
            let mut v = vec![1u8; 64];
            v[10] = 0;
            v
        })
        .unwrap();
        let out = apply_baseline_mask(&patch, &m).unwrap();
        assert!(out.is_opaque());
        assert_eq!(out.pixel(2, 1), [0.0, 0.0, 0.0]);
        assert_eq!(out.pixel(3, 1), [0.4, 0.4, 0.4]);
    }

    proptest! {
        /// Every pixel belongs to exactly one block for any valid (n, W, H):
        /// rendering the all-distinct grid labels each pixel exactly once.
        #[test]
        fn block_partition_is_total(n in 1usize..12, w in 1usize..64, h in 1usize..64) {
            prop_assume!(n <= w.min(h));
            let mut counts = vec![0usize; n * n];
            for y in 0..h {
                for x in 0..w {
                    let row = y * n / h;
                    let col = x * n / w;
                    counts[row * n + col] += 1;
                }
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), w * h);
            prop_assert!(counts.iter().all(|&c| c > 0));
        }

        /// Shifting preserves the exact zero count for arbitrary offsets.
        #[test]
        fn shift_preserves_zero_count(seed in 0u64..1000, sh in -50i64..50, sv in -50i64..50) {
            let mut r = SeedStreams::new(seed).stream("prop");
            let g = sample_block_grid(3, 0.4, &mut r).unwrap();
            let m = render_pixel_mask(&g, 13, 11).unwrap();
            let s = border_shift(&m, ShiftOffset::new(sh, sv));
            prop_assert_eq!(m.zero_count(), s.zero_count());
        }
    }
}
