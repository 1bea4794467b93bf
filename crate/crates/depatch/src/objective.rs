//! The attack objective: accuracy-score box selection, the non-printability
//! score, total variation, and their weighted combination.
//!
//! Prior patch attacks minimize the object score of the *highest-scoring*
//! box. Here each predicted box gets an accuracy score
//! `s_k = w * IoU_k + obj_k` against ground truth, and the objective
//! minimizes the object score of the box with the highest accuracy score:
//! the box that is actually the most correct detection, not merely the most
//! confident one. Setting `w = 0` recovers the prior criterion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{ensure_arg, Error, Result};
use crate::patch::Patch;

/// Trade-off parameters of the total objective
/// `L = L_acc + alpha * L_nps + beta * L_tv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    /// Accuracy-score trade-off (IoU weight in `s_k`).
    pub w: f64,
    /// Non-printability weight.
    pub alpha: f64,
    /// Total-variation weight.
    pub beta: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { w: 3.0, alpha: 0.01, beta: 2.5 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.w.is_finite() && self.alpha.is_finite() && self.beta.is_finite(),
            "objective weights must be finite"
        );
        Ok(())
    }
}

/// Values and weights of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_acc: f64,
    pub l_nps: f64,
    pub l_tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_acc: f64, l_nps: f64, l_tv: f64, weights: &ObjectiveWeights) -> Self {
        LossBreakdown {
            l_acc,
            l_nps,
            l_tv,
            total: l_acc + weights.alpha * l_nps + weights.beta * l_tv,
        }
    }
}

/// Result of accuracy-score selection over one image's detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// No candidate boxes: the image is already evaded and contributes no
    /// gradient.
    Evaded,
    Selected { index: usize, objectness: f64 },
}

/// Select the box with the highest accuracy score `s_k = w * IoU_k + obj_k`
/// and return its object score. `scored` holds `(obj_k, iou_k)` pairs; ties
/// break toward the lowest index.
pub fn accuracy_select(scored: &[(f64, f64)], w: f64) -> Selection {
    let mut best: Option<(usize, f64)> = None;
    for (k, &(obj, iou)) in scored.iter().enumerate() {
        debug_assert!((0.0..=1.0).contains(&obj), "obj score {obj} out of range");
        debug_assert!((0.0..=1.0).contains(&iou), "iou {iou} out of range");
        let s = w * iou + obj;
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((k, s));
        }
    }
    match best {
        None => Selection::Evaded,
        Some((k, _)) => Selection::Selected { index: k, objectness: scored[k].0 },
    }
}

/// Best IoU of a predicted box against a ground-truth list; 0 when empty.
pub fn best_iou(bbox: &BBox, truths: &[BBox]) -> f64 {
    truths.iter().map(|t| crate::detector::iou(bbox, t)).fold(0.0, f64::max)
}

/// Printable color set for the non-printability score.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintPalette {
    colors: Vec<[f64; 3]>,
}

impl PrintPalette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        ensure_arg!(!colors.is_empty(), "palette must not be empty");
        ensure_arg!(
            colors.iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))),
            "palette values must lie in [0, 1]"
        );
        Ok(PrintPalette { colors })
    }

    /// The bundled 30-color default.
    pub fn default_printable() -> Self {
        Self::parse(include_str!("../assets/printable_palette.txt"))
            .expect("bundled palette parses")
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Parse the palette text format: one `r g b` triplet per line,
    /// `#` comments, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| {
                        Error::invalid(format!("palette line {}: bad number '{t}': {e}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            ensure_arg!(
                vals.len() == 3,
                "palette line {}: expected 3 values, got {}",
                lineno + 1,
                vals.len()
            );
            colors.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(colors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Non-printability score: mean over kept (opaque) pixels of the Euclidean
/// distance to the nearest palette color; 0 when every pixel is erased.
pub fn nps_loss(patch: &Patch, palette: &PrintPalette) -> f64 {
    let kept = patch.kept_indices();
    if kept.is_empty() {
        return 0.0;
    }
    let plane = patch.width() * patch.height();
    let rgb = patch.rgb();
    let mut total = 0.0;
    for &s in &kept {
        let s = s as usize;
        let px = [rgb[s], rgb[plane + s], rgb[2 * plane + s]];
        let mut best = f64::INFINITY;
        for c in palette.colors() {
            let d2 = (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2);
            best = best.min(d2);
        }
        total += best.sqrt();
    }
    total / kept.len() as f64
}

/// Smoothing epsilon inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

/// Total variation: sum over channels and pixels of
/// `sqrt(dx^2 + dy^2 + eps)`, divided by the pixel count. Computed on the
/// full RGB field regardless of alpha.
pub fn tv_loss(patch: &Patch) -> f64 {
    let (w, h) = (patch.width(), patch.height());
    debug_assert!(w >= 2 && h >= 2, "tv_loss expects at least a 2x2 patch");
    let plane = w * h;
    let mut total = 0.0;
    for c in 0..3 {
        let p = &patch.rgb()[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                let dx = if x + 1 < w { p[y * w + x + 1] - v } else { 0.0 };
                let dy = if y + 1 < h { p[(y + 1) * w + x] - v } else { 0.0 };
                total += (dx * dx + dy * dy + TV_EPS).sqrt();
            }
        }
    }
    total / plane as f64
}

/// Batch objective: `l_acc` is averaged over the images that still have at
/// least one detection; fully evaded batches contribute zero.
pub fn total_objective(
    patch: &Patch,
    selections: &[Selection],
    weights: &ObjectiveWeights,
    palette: &PrintPalette,
) -> LossBreakdown {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in selections {
        if let Selection::Selected { objectness, .. } = s {
            sum += objectness;
            count += 1;
        }
    }
    let l_acc = if count == 0 { 0.0 } else { sum / count as f64 };
    LossBreakdown::compose(l_acc, nps_loss(patch, palette), tv_loss(patch), weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_select_prefers_high_iou_box() {
        // s = (3*0.9 + 0.8, 3*0.2 + 0.95) = (3.5, 1.55) -> first box.
        match accuracy_select(&[(0.8, 0.9), (0.95, 0.2)], 3.0) {
            Selection::Selected { index, objectness } => {
                assert_eq!(index, 0);
                assert_eq!(objectness, 0.8);
            }
            Selection::Evaded => panic!("expected a selection"),
        }
    }

    #[test]
    fn accuracy_select_single_and_empty() {
        assert_eq!(
            accuracy_select(&[(0.7, 0.5)], 3.0),
            Selection::Selected { index: 0, objectness: 0.7 }
        );
        assert_eq!(accuracy_select(&[], 3.0), Selection::Evaded);
    }

    #[test]
    fn accuracy_select_ties_break_low_index() {
        match accuracy_select(&[(0.5, 0.5), (0.5, 0.5)], 1.0) {
            Selection::Selected { index, .. } => assert_eq!(index, 0),
            _ => panic!(),
        }
    }

    #[test]
    fn zero_w_degenerates_to_max_objectness() {
        let scored = [(0.31, 0.9), (0.72, 0.1), (0.55, 0.99)];
        let max_obj = scored
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
            .unwrap()
            .0;
        match accuracy_select(&scored, 0.0) {
            Selection::Selected { index, .. } => assert_eq!(index, max_obj),
            _ => panic!(),
        }
    }

    #[test]
    fn selection_is_invariant_to_constant_score_shift() {
        // Adding a constant to every s_k never changes the argmax; here the
        // shift is realized by adding c/w to every IoU.
        let scored = [(0.31, 0.4), (0.72, 0.1), (0.55, 0.3)];
        let base = accuracy_select(&scored, 2.0);
        let shifted: Vec<(f64, f64)> = scored.iter().map(|&(o, i)| (o, i + 0.2)).collect();
        let after = accuracy_select(&shifted, 2.0);
        match (base, after) {
            (Selection::Selected { index: a, .. }, Selection::Selected { index: b, .. }) => {
                assert_eq!(a, b)
            }
            _ => panic!(),
        }
    }

    #[test]
    fn best_iou_cases() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(best_iou(&b, &[b]), 1.0);
        assert_eq!(best_iou(&b, &[BBox::new(10.0, 10.0, 12.0, 12.0).unwrap()]), 0.0);
        assert_eq!(best_iou(&b, &[]), 0.0);
        let c = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((best_iou(&b, &[c]) - 1.0 / 3.0).abs() < 1e-12);
        // Degenerate (zero-area) box.
        let degenerate = BBox { x1: 1.0, y1: 1.0, x2: 1.0, y2: 1.0 };
        assert_eq!(best_iou(&degenerate, &[b]), 0.0);
    }

    #[test]
    fn palette_parsing_and_default() {
        let p = PrintPalette::parse("0 0 0\n# comment\n1 0.5 0.25  # inline\n\n").unwrap();
        assert_eq!(p.colors().len(), 2);
        assert!(PrintPalette::parse("0 0\n").is_err());
        assert!(PrintPalette::parse("0 0 2\n").is_err());
        assert!(PrintPalette::parse("# only comments\n").is_err());
        let d = PrintPalette::default_printable();
        assert_eq!(d.colors().len(), 30);
    }

    #[test]
    fn nps_examples() {
        let black = PrintPalette::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let white = Patch::filled(1, 1, [1.0, 1.0, 1.0]).unwrap();
        assert!((nps_loss(&white, &black) - 3f64.sqrt()).abs() < 1e-12);

        let two = PrintPalette::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let red = Patch::filled(1, 1, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(nps_loss(&red, &two), 0.0);

        // Every pixel exactly a palette color.
        let p = Patch::filled(4, 4, [0.5, 0.5, 0.5]).unwrap();
        let pal = PrintPalette::new(vec![[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(nps_loss(&p, &pal), 0.0);

        // All pixels erased.
        let erased = p.with_alpha(vec![0.0; 16]).unwrap();
        assert_eq!(nps_loss(&erased, &black), 0.0);
    }

    #[test]
    fn nps_is_permutation_invariant() {
        let pal = PrintPalette::default_printable();
        let rgb: Vec<f64> = (0..27).map(|i| (i % 11) as f64 / 10.0).collect();
        let p = Patch::opaque(3, 3, rgb.clone()).unwrap();
        // Reverse the spatial order of every channel plane.
        let plane = 9;
        let mut shuffled = vec![0.0; 27];
        for c in 0..3 {
            for i in 0..plane {
                shuffled[c * plane + i] = rgb[c * plane + (plane - 1 - i)];
            }
        }
        let q = Patch::opaque(3, 3, shuffled).unwrap();
        assert!((nps_loss(&p, &pal) - nps_loss(&q, &pal)).abs() < 1e-12);
    }

    #[test]
    fn tv_constant_patch_is_pure_epsilon() {
        let p = Patch::filled(5, 5, [0.3, 0.3, 0.3]).unwrap();
        let expected = 3.0 * 25.0 * TV_EPS.sqrt() / 25.0;
        assert!((tv_loss(&p) - expected).abs() < 1e-15);
    }

    #[test]
    fn tv_two_by_two_hand_value() {
        // Channel 0 carries [[0,1],[0,1]]; channels 1, 2 are constant zero.
        let rgb = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = Patch::opaque(2, 2, rgb).unwrap();
        let chan0 = (2.0 * (1.0f64 + TV_EPS).sqrt() + 2.0 * TV_EPS.sqrt()) / 4.0;
        let constants = 2.0 * 4.0 * TV_EPS.sqrt() / 4.0;
        let expected = chan0 + constants;
        assert!((tv_loss(&p) - expected).abs() < 1e-12, "{} vs {expected}", tv_loss(&p));
    }

    #[test]
    fn stripes_have_higher_tv_than_blurred() {
        let w = 16usize;
        let stripe: Vec<f64> = (0..w * w).map(|i| ((i % w) % 2) as f64).collect();
        // 1-2-1 horizontal blur with clamped borders.
        let mut blurred = stripe.clone();
        for y in 0..w {
            for x in 0..w {
                let l = stripe[y * w + x.saturating_sub(1)];
                let c = stripe[y * w + x];
                let r = stripe[y * w + (x + 1).min(w - 1)];
                blurred[y * w + x] = (l + 2.0 * c + r) / 4.0;
            }
        }
        let mk = |chan: &[f64]| {
            let mut rgb = chan.to_vec();
            rgb.extend_from_slice(chan);
            rgb.extend_from_slice(chan);
            Patch::opaque(w, w, rgb).unwrap()
        };
        assert!(tv_loss(&mk(&stripe)) > tv_loss(&mk(&blurred)));
    }

    #[test]
    fn total_objective_weighted_sum() {
        let weights = ObjectiveWeights::default();
        let b = LossBreakdown::compose(0.8, 10.0, 0.04, &weights);
        assert!((b.total - 1.0).abs() < 1e-12);

        // alpha = beta = 0 leaves the mean accuracy loss.
        let p = Patch::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let pal = PrintPalette::default_printable();
        let zero = ObjectiveWeights { w: 3.0, alpha: 0.0, beta: 0.0 };
        let sels = [
            Selection::Selected { index: 0, objectness: 0.9 },
            Selection::Selected { index: 1, objectness: 0.5 },
            Selection::Evaded,
        ];
        let out = total_objective(&p, &sels, &zero, &pal);
        assert!((out.total - 0.7).abs() < 1e-12);
        assert!((out.l_acc - 0.7).abs() < 1e-12);

        // Fully evaded batch: only the regularizers remain.
        let out = total_objective(&p, &[Selection::Evaded], &weights, &pal);
        assert_eq!(out.l_acc, 0.0);
        let expected = weights.alpha * out.l_nps + weights.beta * out.l_tv;
        assert!((out.total - expected).abs() < 1e-15);
    }
}
