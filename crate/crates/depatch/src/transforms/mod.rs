//! The simulated physical transformation stack: EoT (rotation, scale,
//! noise, brightness, contrast), thin plate spline deformation, toroidal
//! cropping, alpha-aware placement onto person boxes, and the
//! evaluation-time occlusion operator.
//!
//! Geometry is always expressed as bilinear sampling grids or index maps,
//! shared verbatim between the plain (inference) executors here and the
//! recorded (differentiable) executors used during training, so the two
//! paths see identical draws. Sampling coordinates and photometric
//! parameters are constants of each step; gradients flow only through pixel
//! values.

pub mod tps;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_taps_plain, bilinear_taps, Graph, Tap4, T};
use crate::detector::BBox;
use crate::error::{ensure_arg, Result};
use crate::imagebuf::ImageBuf;
use crate::patch::Patch;

/// Ranges of the transformation stack. All intervals are closed with
/// `lower <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    /// Rotation range in degrees (positive = clockwise on screen).
    pub rotation_deg: (f64, f64),
    /// Scale multiplier relative to the nominal placement size.
    pub scale: (f64, f64),
    /// Per-channel uniform noise half-width.
    pub noise: f64,
    /// Additive brightness offset range.
    pub brightness: (f64, f64),
    /// Multiplicative contrast range.
    pub contrast: (f64, f64),
    pub tps_enabled: bool,
    /// Control-point displacement as a fraction of patch size.
    pub tps_jitter: f64,
    /// Control grid side (k x k points).
    pub tps_grid: usize,
    pub tc_enabled: bool,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            rotation_deg: (-20.0, 20.0),
            scale: (0.9, 1.1),
            noise: 0.1,
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            tps_enabled: true,
            tps_jitter: 0.03,
            tps_grid: 4,
            tc_enabled: false,
        }
    }
}

impl TransformSpec {
    /// A spec whose every draw is the identity.
    pub fn identity() -> Self {
        TransformSpec {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            noise: 0.0,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            tps_enabled: false,
            tps_jitter: 0.0,
            tps_grid: 4,
            tc_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        ensure_arg!(ordered(self.rotation_deg), "rotation range must be ordered");
        ensure_arg!(ordered(self.scale) && self.scale.0 > 0.0, "scale range must be positive");
        ensure_arg!(self.noise >= 0.0 && self.noise <= 1.0, "noise half-width in [0, 1]");
        ensure_arg!(ordered(self.brightness), "brightness range must be ordered");
        ensure_arg!(ordered(self.contrast), "contrast range must be ordered");
        ensure_arg!(self.tps_jitter >= 0.0, "tps jitter must be non-negative");
        ensure_arg!(self.tps_grid >= 2, "tps grid needs at least 2x2 control points");
        Ok(())
    }
}

/// Where and how large the patch sits on a person box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRule {
    /// Patch width as a fraction of the box's larger side.
    pub relative_width: f64,
    /// Patch center at this fraction of the box height.
    pub vertical_anchor: f64,
}

impl Default for PlacementRule {
    fn default() -> Self {
        PlacementRule { relative_width: 0.2, vertical_anchor: 0.45 }
    }
}

impl PlacementRule {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.relative_width > 0.0 && self.relative_width <= 1.0,
            "relative width must lie in (0, 1]"
        );
        ensure_arg!(
            (0.0..=1.0).contains(&self.vertical_anchor),
            "vertical anchor must lie in [0, 1]"
        );
        Ok(())
    }
}

/// One sampled EoT draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EotDraw {
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
}

pub fn sample_eot(spec: &TransformSpec, rng: &mut impl Rng) -> EotDraw {
    let u = |r: (f64, f64), rng: &mut dyn rand::RngCore| {
        if r.0 == r.1 {
            r.0
        } else {
            rng.gen_range(r.0..=r.1)
        }
    };
    EotDraw {
        rotation_deg: u(spec.rotation_deg, rng),
        scale: u(spec.scale, rng),
        brightness: u(spec.brightness, rng),
        contrast: u(spec.contrast, rng),
    }
}

fn sample_noise(n: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    if amplitude == 0.0 {
        Vec::new()
    } else {
        (0..n).map(|_| rng.gen_range(-amplitude..=amplitude)).collect()
    }
}

/// Rotation/scale sampling grid: output canvas pixel -> source patch coords.
/// The content is rotated by `theta` (clockwise on screen) and sized to
/// `target_w x target_h` inside a `canvas_w x canvas_h` frame.
#[allow(clippy::too_many_arguments)]
fn warp_taps(
    patch_w: usize,
    patch_h: usize,
    target_w: f64,
    target_h: f64,
    canvas_w: usize,
    canvas_h: usize,
    theta_deg: f64,
) -> Vec<Tap4> {
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cw2, ch2) = (canvas_w as f64 / 2.0, canvas_h as f64 / 2.0);
    let coords = (0..canvas_w * canvas_h).map(move |i| {
        let v = (i / canvas_w) as f64 + 0.5 - ch2;
        let u = (i % canvas_w) as f64 + 0.5 - cw2;
        // Inverse rotation back into the unrotated target frame.
        let rx = u * cos + v * sin;
        let ry = -u * sin + v * cos;
        let px = (rx / target_w + 0.5) * patch_w as f64 - 0.5;
        let py = (ry / target_h + 0.5) * patch_h as f64 - 0.5;
        (px, py)
    });
    bilinear_taps(patch_h, patch_w, coords)
}

fn rotated_canvas(target_w: f64, target_h: f64, theta_deg: f64) -> (usize, usize) {
    let theta = theta_deg.to_radians();
    let (sin, cos) = (theta.sin().abs(), theta.cos().abs());
    let cw = (target_w * cos + target_h * sin).ceil().max(1.0) as usize;
    let ch = (target_w * sin + target_h * cos).ceil().max(1.0) as usize;
    (cw, ch)
}

/// Apply the EoT stack to a standalone patch: rotation and scale within the
/// same canvas, then contrast/brightness/noise on RGB (clamped). Alpha is
/// warped geometrically but untouched photometrically.
pub fn apply_eot(patch: &Patch, spec: &TransformSpec, rng: &mut impl Rng) -> Result<Patch> {
    spec.validate()?;
    let draw = sample_eot(spec, rng);
    let (w, h) = (patch.width(), patch.height());
    let taps = warp_taps(
        w,
        h,
        w as f64 * draw.scale,
        h as f64 * draw.scale,
        w,
        h,
        draw.rotation_deg,
    );
    let plane = w * h;
    let noise = sample_noise(3 * plane, spec.noise, rng);
    let mut rgb = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let warped = apply_taps_plain(&patch.rgb()[c * plane..(c + 1) * plane], &taps);
        for (i, v) in warped.into_iter().enumerate() {
            let n = noise.get(c * plane + i).copied().unwrap_or(0.0);
            rgb.push((v * draw.contrast + draw.brightness + n).clamp(0.0, 1.0));
        }
    }
    let alpha: Vec<f64> =
        apply_taps_plain(patch.alpha(), &taps).into_iter().map(|a| a.clamp(0.0, 1.0)).collect();
    Patch::new(w, h, rgb, alpha)
}

/// Thin plate spline deformation with a jittered control grid. Falls back to
/// the identity (reporting `fell_back = true`) when the fitted system is
/// singular.
pub fn apply_tps(
    patch: &Patch,
    tps_jitter: f64,
    grid: usize,
    rng: &mut impl Rng,
) -> Result<(Patch, bool)> {
    ensure_arg!(tps_jitter >= 0.0, "tps jitter must be non-negative");
    ensure_arg!(grid >= 2, "tps grid needs at least 2x2 control points");
    let (w, h) = (patch.width(), patch.height());
    match tps::plan_tps_taps(w, h, tps_jitter, grid, rng) {
        Some(taps) => {
            let plane = w * h;
            let mut rgb = Vec::with_capacity(3 * plane);
            for c in 0..3 {
                rgb.extend(
                    apply_taps_plain(&patch.rgb()[c * plane..(c + 1) * plane], &taps)
                        .into_iter()
                        .map(|v| v.clamp(0.0, 1.0)),
                );
            }
            let alpha: Vec<f64> = apply_taps_plain(patch.alpha(), &taps)
                .into_iter()
                .map(|a| a.clamp(0.0, 1.0))
                .collect();
            Ok((Patch::new(w, h, rgb, alpha)?, false))
        }
        None => Ok((patch.clone(), true)),
    }
}

/// Wrap-around index map for a toroidal crop.
pub fn toroidal_index_map(
    src_w: usize,
    src_h: usize,
    crop_w: usize,
    crop_h: usize,
    origin: (i64, i64),
) -> Vec<u32> {
    let ox = origin.0.rem_euclid(src_w as i64) as usize;
    let oy = origin.1.rem_euclid(src_h as i64) as usize;
    let mut idx = Vec::with_capacity(crop_w * crop_h);
    for j in 0..crop_h {
        let sy = (oy + j) % src_h;
        for i in 0..crop_w {
            let sx = (ox + i) % src_w;
            idx.push((sy * src_w + sx) as u32);
        }
    }
    idx
}

/// Toroidal crop: output `(i, j)` takes input `((ox + i) mod W, (oy + j) mod H)`.
/// The crop may exceed the patch dimensions, producing a tiling.
pub fn toroidal_crop(patch: &Patch, crop_w: usize, crop_h: usize, origin: (i64, i64)) -> Result<Patch> {
    ensure_arg!(crop_w >= 1 && crop_h >= 1, "crop dimensions must be positive");
    let (w, h) = (patch.width(), patch.height());
    let idx = toroidal_index_map(w, h, crop_w, crop_h, origin);
    let plane = w * h;
    let mut rgb = Vec::with_capacity(3 * crop_w * crop_h);
    for c in 0..3 {
        let src = &patch.rgb()[c * plane..(c + 1) * plane];
        rgb.extend(idx.iter().map(|&i| src[i as usize]));
    }
    let alpha: Vec<f64> = idx.iter().map(|&i| patch.alpha()[i as usize]).collect();
    Patch::new(crop_w, crop_h, rgb, alpha)
}

/// Evaluation-time occlusion: make a region covering exactly
/// `round(r * W * H)` pixels (to the nearest pixel) fully transparent, at a
/// uniformly random position. The region is square whenever it fits.
pub fn occlude(patch: &Patch, ratio: f64, rng: &mut impl Rng) -> Result<Patch> {
    ensure_arg!((0.0..=1.0).contains(&ratio), "occlusion ratio must lie in [0, 1]");
    let (w, h) = (patch.width(), patch.height());
    let target = (ratio * (w * h) as f64).round() as usize;
    if target == 0 {
        return Ok(patch.clone());
    }
    let mut rw = (target as f64).sqrt().ceil() as usize;
    rw = rw.min(w);
    let rh = target.div_ceil(rw).min(h);
    if rw * rh < target {
        rw = target.div_ceil(rh).min(w);
    }
    debug_assert!(rw * rh >= target);
    let x0 = rng.gen_range(0..=w - rw);
    let y0 = rng.gen_range(0..=h - rh);
    let mut alpha = patch.alpha().to_vec();
    let mut remaining = target;
    'outer: for j in 0..rh {
        for i in 0..rw {
            if remaining == 0 {
                break 'outer;
            }
            alpha[(y0 + j) * w + (x0 + i)] = 0.0;
            remaining -= 1;
        }
    }
    patch.with_alpha(alpha)
}

/// One planned placement of the patch onto a box: shared geometry and
/// photometric constants for the plain and recorded executors.
#[derive(Debug, Clone)]
pub struct BoxPlacement {
    pub taps: Vec<Tap4>,
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub contrast: f64,
    pub brightness: f64,
    /// Additive per-pixel noise, `[3 * canvas]`, empty when amplitude is 0.
    pub noise: Vec<f64>,
    pub warped_alpha: Vec<f64>,
    pub x0: i64,
    pub y0: i64,
    pub draw: EotDraw,
}

/// Plan one placement per box. Each box gets an independent EoT draw.
pub fn plan_attachments(
    patch_w: usize,
    patch_h: usize,
    patch_alpha: &[f64],
    boxes: &[BBox],
    rule: &PlacementRule,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<Vec<BoxPlacement>> {
    spec.validate()?;
    rule.validate()?;
    let mut plans = Vec::with_capacity(boxes.len());
    for b in boxes {
        let draw = sample_eot(spec, rng);
        let nominal = rule.relative_width * b.width().max(b.height());
        let target_w = (nominal * draw.scale).max(2.0);
        let target_h = target_w * patch_h as f64 / patch_w as f64;
        let (canvas_w, canvas_h) = rotated_canvas(target_w, target_h, draw.rotation_deg);
        let taps = warp_taps(
            patch_w,
            patch_h,
            target_w,
            target_h,
            canvas_w,
            canvas_h,
            draw.rotation_deg,
        );
        let warped_alpha: Vec<f64> = apply_taps_plain(patch_alpha, &taps)
            .into_iter()
            .map(|a| a.clamp(0.0, 1.0))
            .collect();
        let noise = sample_noise(3 * canvas_w * canvas_h, spec.noise, rng);
        let cx = (b.x1 + b.x2) / 2.0;
        let cy = b.y1 + rule.vertical_anchor * b.height();
        plans.push(BoxPlacement {
            taps,
            canvas_w,
            canvas_h,
            contrast: draw.contrast,
            brightness: draw.brightness,
            noise,
            warped_alpha,
            x0: (cx - canvas_w as f64 / 2.0).round() as i64,
            y0: (cy - canvas_h as f64 / 2.0).round() as i64,
            draw,
        });
    }
    Ok(plans)
}

/// Execute placements on a plain image: per box, warp, photometric, then
/// `out = alpha * patch + (1 - alpha) * image` clipped at image borders.
pub fn attach_plans(image: &ImageBuf, patch: &Patch, plans: &[BoxPlacement]) -> ImageBuf {
    let mut out = image.clone();
    let plane = patch.width() * patch.height();
    for plan in plans {
        let cplane = plan.canvas_w * plan.canvas_h;
        let mut fg = Vec::with_capacity(3 * cplane);
        for c in 0..3 {
            let warped = apply_taps_plain(&patch.rgb()[c * plane..(c + 1) * plane], &plan.taps);
            for (i, v) in warped.into_iter().enumerate() {
                let n = plan.noise.get(c * cplane + i).copied().unwrap_or(0.0);
                fg.push((v * plan.contrast + plan.brightness + n).clamp(0.0, 1.0));
            }
        }
        composite_plain(&mut out, &fg, &plan.warped_alpha, plan.canvas_w, plan.canvas_h, plan.x0, plan.y0);
    }
    out
}

fn composite_plain(
    bg: &mut ImageBuf,
    fg: &[f64],
    alpha: &[f64],
    fw: usize,
    fh: usize,
    x0: i64,
    y0: i64,
) {
    let (bw, bh) = (bg.width, bg.height);
    let bplane = bw * bh;
    let fplane = fw * fh;
    for fy in 0..fh {
        let by = fy as i64 + y0;
        if by < 0 || by >= bh as i64 {
            continue;
        }
        for fx in 0..fw {
            let bx = fx as i64 + x0;
            if bx < 0 || bx >= bw as i64 {
                continue;
            }
            let a = alpha[fy * fw + fx];
            if a == 0.0 {
                continue;
            }
            let bi = by as usize * bw + bx as usize;
            for c in 0..3 {
                let o = c * bplane + bi;
                bg.data[o] += a * (fg[c * fplane + fy * fw + fx] - bg.data[o]);
            }
        }
    }
}

/// Attach the patch to every box with fresh per-box EoT draws.
pub fn attach(
    image: &ImageBuf,
    patch: &Patch,
    boxes: &[BBox],
    rule: &PlacementRule,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<ImageBuf> {
    if boxes.is_empty() {
        return Ok(image.clone());
    }
    let plans =
        plan_attachments(patch.width(), patch.height(), patch.alpha(), boxes, rule, spec, rng)?;
    Ok(attach_plans(image, patch, &plans))
}

/// Recorded (differentiable) counterpart of [`attach_plans`]: the same
/// geometry and constants, applied to a patch RGB node over a background
/// node.
pub fn attach_graph(g: &mut Graph, background: T, patch_rgb: T, plans: &[BoxPlacement]) -> T {
    let mut out = background;
    for plan in plans {
        let warped = g.bilinear_gather(patch_rgb, plan.taps.clone(), plan.canvas_h, plan.canvas_w);
        let scaled = g.mul_scalar(warped, plan.contrast);
        let cplane = plan.canvas_w * plan.canvas_h;
        let mut offset = vec![plan.brightness; 3 * cplane];
        if !plan.noise.is_empty() {
            for (o, n) in offset.iter_mut().zip(&plan.noise) {
                *o += n;
            }
        }
        let offset_node = g.constant(offset, &[3, plan.canvas_h, plan.canvas_w]);
        let lit = g.add(scaled, offset_node);
        let clamped = g.clamp01(lit);
        out = g.composite_over(out, clamped, plan.warped_alpha.clone(), plan.x0, plan.y0);
    }
    out
}
