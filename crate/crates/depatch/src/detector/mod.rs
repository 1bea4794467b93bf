//! Detector contract, bounding-box types, and the bundled toy detector.
//!
//! The optimization loop only assumes a differentiable mapping from input
//! pixels to scored boxes, captured by [`DetectorAdapter`]. A small
//! convolutional grid predictor ([`toy::ToyDetector`]) ships with the crate
//! and is trained by the repo's own script on synthetic scenes, so the whole
//! pipeline runs without external model weights. Adapters for real detectors
//! can be registered by name.

pub mod toy;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, T};
use crate::error::{ensure_arg, Error, Result};
use crate::imagebuf::ImageBuf;

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        ensure_arg!(x1 < x2 && y1 < y2, "degenerate box ({x1},{y1},{x2},{y2})");
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// From normalized (cx, cy, w, h) relative to an image size.
    pub fn from_normalized(cx: f64, cy: f64, w: f64, h: f64, img_w: usize, img_h: usize) -> Result<Self> {
        let (iw, ih) = (img_w as f64, img_h as f64);
        BBox::new(
            (cx - w / 2.0) * iw,
            (cy - h / 2.0) * ih,
            (cx + w / 2.0) * iw,
            (cy + h / 2.0) * ih,
        )
    }

    pub fn to_normalized(&self, img_w: usize, img_h: usize) -> (f64, f64, f64, f64) {
        let (iw, ih) = (img_w as f64, img_h as f64);
        let (cx, cy) = self.center();
        (cx / iw, cy / ih, self.width() / iw, self.height() / ih)
    }

    pub fn clipped(&self, img_w: usize, img_h: usize) -> Option<Self> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(img_w as f64);
        let y2 = self.y2.min(img_h as f64);
        (x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
    }
}

/// Intersection-over-union of two boxes. Degenerate (zero-area) inputs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// How the per-box object score entering the objective is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjScoreMode {
    /// Objectness times the person-class probability.
    #[default]
    ObjTimesClass,
    /// Raw objectness.
    ObjectnessOnly,
}

/// A scored detection (inference view, no gradient handles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    /// Two-class simplex: `[person, other]`.
    pub class_probs: [f64; 2],
    /// Score per the configured [`ObjScoreMode`].
    pub obj_score: f64,
}

/// A detection carrying a differentiable score node recorded on a [`Graph`].
#[derive(Debug, Clone)]
pub struct RawDetection {
    pub detection: Detection,
    /// Scalar node: the obj score with gradient support.
    pub score_node: T,
}

/// Contract for a differentiable detector.
///
/// `forward_graph` must record all score computations on the supplied graph
/// so that gradients flow from every returned score node back to the image
/// node. Inference must be deterministic for fixed weights.
pub trait DetectorAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Expected (width, height) of input images.
    fn input_size(&self) -> (usize, usize);

    /// Record a forward pass. `image` must be an `[3, H, W]` node of the
    /// adapter's input size. Returns all candidates with
    /// `obj_score >= threshold`, pre-NMS.
    fn forward_graph(
        &self,
        graph: &mut Graph,
        image: T,
        mode: ObjScoreMode,
        threshold: f64,
    ) -> Result<Vec<RawDetection>>;

    /// Plain inference. Default: record on a throwaway graph.
    fn detect(&self, image: &ImageBuf, mode: ObjScoreMode, threshold: f64) -> Result<Vec<Detection>> {
        let (w, h) = self.input_size();
        ensure_arg!(
            image.width == w && image.height == h,
            "detector {} expects {}x{} input, got {}x{}",
            self.name(),
            w,
            h,
            image.width,
            image.height
        );
        let mut g = Graph::new();
        let node = g.constant(image.data.clone(), &[3, h, w]);
        let raw = self.forward_graph(&mut g, node, mode, threshold)?;
        Ok(raw.into_iter().map(|r| r.detection).collect())
    }
}

/// Greedy non-maximum suppression by descending obj score.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Result<Vec<Detection>> {
    ensure_arg!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "nms threshold must lie in (0, 1]"
    );
    detections.sort_by(|a, b| b.obj_score.partial_cmp(&a.obj_score).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Load a detector adapter by registry name. The toy detector is bundled;
/// other names are reserved for user plug-ins.
pub fn load_adapter(
    name: &str,
    checkpoint: Option<&std::path::Path>,
) -> Result<Box<dyn DetectorAdapter>> {
    match name {
        "toy" => {
            let path = checkpoint.ok_or_else(|| {
                Error::config("detector 'toy' requires a checkpoint path".to_string())
            })?;
            Ok(Box::new(toy::ToyDetector::load(path)?))
        }
        other => Err(Error::config(format!(
            "unknown detector adapter '{other}'; supported: toy"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            objectness: score,
            class_probs: [1.0, 0.0],
            obj_score: score,
        }
    }

    #[test]
    fn iou_basic_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
        let c = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        let got = iou(&a, &c);
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn iou_matches_rasterized_overlap() {
        // Pixel-count oracle on an integer grid.
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        let mut inter = 0;
        let mut union = 0;
        for y in 0..3 {
            for x in 0..3 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_a = fx > a.x1 && fx < a.x2 && fy > a.y1 && fy < a.y2;
                let in_c = fx > c.x1 && fx < c.x2 && fy > c.y1 && fy < c.y2;
                inter += (in_a && in_c) as usize;
                union += (in_a || in_c) as usize;
            }
        }
        assert!((iou(&a, &c) - inter as f64 / union as f64).abs() < 1e-12);
    }

    #[test]
    fn nms_suppresses_duplicates_keeps_disjoint() {
        let single = nms(vec![det(0.0, 0.0, 2.0, 2.0, 0.9)], 0.5).unwrap();
        assert_eq!(single.len(), 1);

        let dup = nms(
            vec![det(0.0, 0.0, 2.0, 2.0, 0.8), det(0.0, 0.0, 2.0, 2.0, 0.9)],
            0.5,
        )
        .unwrap();
        assert_eq!(dup.len(), 1);
        assert_eq!(dup[0].obj_score, 0.9);

        let spread = vec![
            det(0.0, 0.0, 2.0, 2.0, 0.9),
            det(10.0, 0.0, 12.0, 2.0, 0.8),
            det(0.0, 10.0, 2.0, 12.0, 0.7),
        ];
        for a in &spread {
            for b in &spread {
                if a.bbox != b.bbox {
                    assert!(iou(&a.bbox, &b.bbox) < 0.5);
                }
            }
        }
        assert_eq!(nms(spread, 0.5).unwrap().len(), 3);
    }

    #[test]
    fn nms_output_is_subset_below_threshold() {
        let mut rng = crate::rng::SeedStreams::new(3).stream("nms");
        use rand::Rng;
        let dets: Vec<Detection> = (0..30)
            .map(|_| {
                let x = rng.gen_range(0.0..50.0);
                let y = rng.gen_range(0.0..50.0);
                det(x, y, x + rng.gen_range(2.0..10.0), y + rng.gen_range(2.0..10.0), rng.gen())
            })
            .collect();
        let kept = nms(dets.clone(), 0.4).unwrap();
        for k in &kept {
            assert!(dets.iter().any(|d| d.bbox == k.bbox));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) < 0.4);
            }
        }
    }

    #[test]
    fn unknown_adapter_is_rejected() {
        let err = match load_adapter("yolov2", None) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        assert!(err.to_string().contains("supported: toy"));
    }
}
