//! The bundled toy detector: an anchor-free convolutional grid predictor.
//!
//! Five stride-2-free stages: four 3x3 stride-2 convolutions, one 3x3
//! stride-1 context convolution at grid resolution, then a 1x1 head that
//! predicts, per grid cell, a box (center offset, log-size), an objectness
//! logit, and two class logits (person / other). With the default 160x160
//! input the grid is 10x10 (stride 16).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, T};
use crate::ckpt::TensorFile;
use crate::detector::{BBox, Detection, DetectorAdapter, ObjScoreMode, RawDetection};
use crate::error::{ensure_arg, Error, Result};

pub const DEFAULT_INPUT_SIZE: usize = 160;
pub const STRIDE: usize = 16;
const LEAK: f64 = 0.1;

/// Head channel layout.
pub(crate) const CH_TX: usize = 0;
pub(crate) const CH_TY: usize = 1;
pub(crate) const CH_TW: usize = 2;
pub(crate) const CH_TH: usize = 3;
pub(crate) const CH_OBJ: usize = 4;
pub(crate) const CH_PERSON: usize = 5;
pub(crate) const CH_OTHER: usize = 6;
pub const HEAD_CHANNELS: usize = 7;

/// Base box size in pixels at `exp(0)`.
pub const BASE_W: f64 = 32.0;
pub const BASE_H: f64 = 64.0;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn init(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = (0..c_out * c_in * k * k).map(|_| normal.sample(rng)).collect();
        let b = vec![0.0; c_out];
        ConvLayer { w, b, c_in, c_out, k, stride, pad }
    }
}

/// Layer widths of the backbone.
pub const CHANNELS: [usize; 5] = [8, 16, 24, 32, 32];

#[derive(Debug, Clone)]
pub struct ToyDetector {
    input_size: usize,
    layers: Vec<ConvLayer>,
}

impl ToyDetector {
    /// Fresh detector with seeded random weights.
    pub fn random_init(input_size: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure_arg!(
            input_size >= 2 * STRIDE && input_size % STRIDE == 0,
            "input size must be a positive multiple of {STRIDE}"
        );
        let mut layers = Vec::new();
        let mut c_prev = 3;
        for (i, &c) in CHANNELS.iter().enumerate() {
            let stride = if i < 4 { 2 } else { 1 };
            layers.push(ConvLayer::init(c_prev, c, 3, stride, 1, rng));
            c_prev = c;
        }
        layers.push(ConvLayer::init(c_prev, HEAD_CHANNELS, 1, 1, 0, rng));
        Ok(ToyDetector { input_size, layers })
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / STRIDE
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    /// Record the backbone + head, returning the `[7, G, G]` head node.
    /// When `trainable` is set the weights are inserted as gradient-tracking
    /// params and returned alongside.
    pub fn head_graph(&self, g: &mut Graph, image: T, trainable: bool) -> (T, Vec<(T, T)>) {
        let mut x = g.add_scalar(image, -0.5);
        let mut params = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let dims_w = vec![layer.c_out, layer.c_in, layer.k, layer.k];
            let (wn, bn) = if trainable {
                (g.param(layer.w.clone(), &dims_w), g.param(layer.b.clone(), &[layer.c_out]))
            } else {
                (g.constant(layer.w.clone(), &dims_w), g.constant(layer.b.clone(), &[layer.c_out]))
            };
            if trainable {
                params.push((wn, bn));
            }
            x = g.conv2d(x, wn, bn, layer.stride, layer.pad);
            if i != last {
                x = g.leaky_relu(x, LEAK);
            }
        }
        (x, params)
    }

    /// Decode candidates above `threshold` from a recorded head, attaching a
    /// differentiable score node per candidate.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        head: T,
        mode: ObjScoreMode,
        threshold: f64,
    ) -> Vec<RawDetection> {
        let grid = self.grid_size();
        let plane = grid * grid;
        let head_data = g.data(head).to_vec();
        let ch = |c: usize, i: usize| head_data[c * plane + i];
        let mut out = Vec::new();
        for cy in 0..grid {
            for cx in 0..grid {
                let i = cy * grid + cx;
                let obj = sigmoid(ch(CH_OBJ, i));
                let person = sigmoid(ch(CH_PERSON, i) - ch(CH_OTHER, i));
                let score = match mode {
                    ObjScoreMode::ObjTimesClass => obj * person,
                    ObjScoreMode::ObjectnessOnly => obj,
                };
                if score < threshold {
                    continue;
                }
                let ox = sigmoid(ch(CH_TX, i));
                let oy = sigmoid(ch(CH_TY, i));
                let bw = BASE_W * ch(CH_TW, i).clamp(-4.0, 4.0).exp();
                let bh = BASE_H * ch(CH_TH, i).clamp(-4.0, 4.0).exp();
                let ccx = (cx as f64 + ox) * STRIDE as f64;
                let ccy = (cy as f64 + oy) * STRIDE as f64;
                let bbox = BBox {
                    x1: ccx - bw / 2.0,
                    y1: ccy - bh / 2.0,
                    x2: ccx + bw / 2.0,
                    y2: ccy + bh / 2.0,
                };
                let Some(bbox) = bbox.clipped(self.input_size, self.input_size) else {
                    continue;
                };
                // Differentiable score: sigmoid(obj) [* sigmoid(person - other)].
                let obj_logit = g.gather_scalar(head, CH_OBJ * plane + i);
                let obj_node = g.sigmoid(obj_logit);
                let score_node = match mode {
                    ObjScoreMode::ObjectnessOnly => obj_node,
                    ObjScoreMode::ObjTimesClass => {
                        let p_logit = g.gather_scalar(head, CH_PERSON * plane + i);
                        let o_logit = g.gather_scalar(head, CH_OTHER * plane + i);
                        let d = g.sub(p_logit, o_logit);
                        let p = g.sigmoid(d);
                        g.mul(obj_node, p)
                    }
                };
                out.push(RawDetection {
                    detection: Detection {
                        bbox,
                        objectness: obj,
                        class_probs: [person, 1.0 - person],
                        obj_score: score,
                    },
                    score_node,
                });
            }
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = TensorFile::new();
        f.push("meta", vec![2], vec![self.input_size as f64, self.layers.len() as f64]);
        for (i, l) in self.layers.iter().enumerate() {
            f.push(
                format!("conv{i}.shape"),
                vec![5],
                vec![l.c_out as f64, l.c_in as f64, l.k as f64, l.stride as f64, l.pad as f64],
            );
            f.push(format!("conv{i}.w"), vec![l.c_out, l.c_in, l.k, l.k], l.w.clone());
            f.push(format!("conv{i}.b"), vec![l.c_out], l.b.clone());
        }
        f.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = TensorFile::load(path)?;
        let bad = |detail: &str| Error::Format {
            what: "toy detector checkpoint",
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let meta = f.get("meta").ok_or_else(|| bad("missing meta tensor"))?;
        let input_size = meta.data[0] as usize;
        let n_layers = meta.data[1] as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let shape = f.get(&format!("conv{i}.shape")).ok_or_else(|| bad("missing layer shape"))?;
            let w = f.get(&format!("conv{i}.w")).ok_or_else(|| bad("missing layer weights"))?;
            let b = f.get(&format!("conv{i}.b")).ok_or_else(|| bad("missing layer bias"))?;
            layers.push(ConvLayer {
                w: w.data.clone(),
                b: b.data.clone(),
                c_out: shape.data[0] as usize,
                c_in: shape.data[1] as usize,
                k: shape.data[2] as usize,
                stride: shape.data[3] as usize,
                pad: shape.data[4] as usize,
            });
        }
        Ok(ToyDetector { input_size, layers })
    }
}

impl DetectorAdapter for ToyDetector {
    fn name(&self) -> &str {
        "toy"
    }

    fn input_size(&self) -> (usize, usize) {
        (self.input_size, self.input_size)
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        image: T,
        mode: ObjScoreMode,
        threshold: f64,
    ) -> Result<Vec<RawDetection>> {
        let dims = g.dims(image).to_vec();
        ensure_arg!(
            dims == [3, self.input_size, self.input_size],
            "toy detector expects [3, {s}, {s}] input, got {dims:?}",
            s = self.input_size
        );
        let (head, _) = self.head_graph(g, image, false);
        Ok(self.decode_graph(g, head, mode, threshold))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Target assignment for one labeled box: the cell containing its center.
pub(crate) fn assign_cell(bbox: &BBox, grid: usize, input_size: usize) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let fx = (cx / STRIDE as f64).clamp(0.0, grid as f64 - 1e-6);
    let fy = (cy / STRIDE as f64).clamp(0.0, grid as f64 - 1e-6);
    let _ = input_size;
    (fx as usize, fy as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn rejects_wrong_input_size() {
        let mut rng = SeedStreams::new(1).stream("toy");
        let det = ToyDetector::random_init(160, &mut rng).unwrap();
        let img = crate::imagebuf::ImageBuf::zeros(80, 80);
        assert!(det.detect(&img, ObjScoreMode::ObjTimesClass, 0.1).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = SeedStreams::new(1).stream("toy");
        let det = ToyDetector::random_init(160, &mut rng).unwrap();
        let mut img = crate::imagebuf::ImageBuf::zeros(160, 160);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0;
        }
        let a = det.detect(&img, ObjScoreMode::ObjTimesClass, 0.0).unwrap();
        let b = det.detect(&img, ObjScoreMode::ObjTimesClass, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeedStreams::new(2).stream("toy");
        let det = ToyDetector::random_init(160, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.dptf");
        det.save(&path).unwrap();
        let loaded = ToyDetector::load(&path).unwrap();
        assert_eq!(loaded.input_size, 160);
        assert_eq!(loaded.layers.len(), det.layers.len());
        for (a, b) in det.layers.iter().zip(loaded.layers.iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn gradient_of_scores_reaches_input_pixels() {
        let mut rng = SeedStreams::new(3).stream("toy");
        let det = ToyDetector::random_init(160, &mut rng).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3 * 160 * 160).map(|i| (i % 97) as f64 / 97.0).collect();
        let img = g.param(data, &[3, 160, 160]);
        let dets = det.forward_graph(&mut g, img, ObjScoreMode::ObjTimesClass, 0.0).unwrap();
        assert!(!dets.is_empty());
        let nodes: Vec<_> = dets.iter().map(|d| d.score_node).collect();
        let total = g.add_n(&nodes);
        g.backward(total).unwrap();
        let nonzero = g.grad(img).iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero > 0, "no gradient reached the input");
    }
}
