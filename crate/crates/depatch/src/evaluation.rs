//! Digital evaluation: AP at IoU 0.5 against detector-derived pseudo ground
//! truth, the Original / EoT / TC-Mean / Oc(r) / JPEG protocol columns, the
//! occlusion degradation sweep, the attack success rate, and the
//! information-deletion baseline comparison harness.
//!
//! Ground truth is what the detector finds on the clean images above a
//! confidence floor, so clean AP is 1.0 by construction and every drop below
//! that is attributable to the patch. Per-image RNG streams are shared across
//! columns, so Oc(0) reproduces the EoT column bit-exactly.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalColumn, EvalConfig, ExperimentConfig};
use crate::dataset::Dataset;
use crate::detector::{nms, Detection, DetectorAdapter};
use crate::error::{ensure_arg, Error, Result};
use crate::imagebuf::ImageBuf;
use crate::masks::BaselineMaskMode;
use crate::patch::Patch;
use crate::rng::SeedStreams;
use crate::scheduler::Strategy;
use crate::trainer::PatchTrainer;
use crate::transforms::{self, TransformSpec};

/// Pseudo ground truth for one dataset: confident post-NMS clean detections.
#[derive(Debug, Clone)]
pub struct PseudoGroundTruth {
    /// Per kept image: (dataset index, ground-truth boxes).
    pub images: Vec<(usize, Vec<crate::detector::BBox>)>,
    /// Images with no confident clean detection, excluded from AP.
    pub excluded: usize,
}

/// Detections of clean images above `gt_confidence` become ground truth.
pub fn pseudo_ground_truth(
    detector: &dyn DetectorAdapter,
    data: &Dataset,
    eval_candidate_threshold: f64,
    nms_iou: f64,
    gt_confidence: f64,
) -> Result<PseudoGroundTruth> {
    let mut images = Vec::new();
    let mut excluded = 0usize;
    for (i, entry) in data.entries.iter().enumerate() {
        let dets = detector.detect(
            &entry.image,
            crate::detector::ObjScoreMode::ObjTimesClass,
            eval_candidate_threshold,
        )?;
        let kept = nms(dets, nms_iou)?;
        let boxes: Vec<_> = kept
            .into_iter()
            .filter(|d| d.obj_score >= gt_confidence)
            .map(|d| d.bbox)
            .collect();
        if boxes.is_empty() {
            excluded += 1;
        } else {
            images.push((i, boxes));
        }
    }
    Ok(PseudoGroundTruth { images, excluded })
}

/// All-point interpolated average precision at one IoU threshold.
///
/// Detections are ranked globally by score (ties: image order, then
/// insertion order), greedily matched to the highest-IoU unmatched ground
/// truth of their image, and the precision envelope is integrated over
/// recall. `None` when there is no ground truth at all.
pub fn average_precision(
    images: &[(Vec<Detection>, Vec<crate::detector::BBox>)],
    iou_threshold: f64,
) -> Option<f64> {
    let n_gt: usize = images.iter().map(|(_, gt)| gt.len()).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, det index)
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (dets, _)) in images.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            ranked.push((d.obj_score, i, j));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut matched: Vec<Vec<bool>> = images.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for (_, i, j) in ranked {
        let (dets, gts) = &images[i];
        let bbox = &dets[j].bbox;
        let mut best = (0.0, usize::MAX);
        for (k, gt) in gts.iter().enumerate() {
            if matched[i][k] {
                continue;
            }
            let v = crate::detector::iou(bbox, gt);
            if v > best.0 {
                best = (v, k);
            }
        }
        if best.0 >= iou_threshold && best.1 != usize::MAX {
            matched[i][best.1] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // All-point interpolation: integrate the running-max precision envelope
    // right-to-left over recall increments.
    let mut ap = 0.0;
    let mut max_prec = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |c| c.0);
    for &(recall, precision) in curve.iter().rev() {
        max_prec = max_prec.max(precision);
        ap += (prev_recall - recall) * max_prec;
        prev_recall = recall;
    }
    ap += prev_recall * max_prec;
    Some(ap)
}

/// One evaluated column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnResult {
    pub label: String,
    pub ap: Option<f64>,
    /// Per-repeat APs for stochastic columns (TC-Mean).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub repeats: Vec<f64>,
    /// Set when the column semantics did not fully apply (e.g. TC-Mean on a
    /// patch that was not TC-trained).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Full evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<ColumnResult>,
    /// Mean AP across all non-Original columns.
    pub overall: Option<f64>,
    pub excluded_images: usize,
    pub evaluated_images: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn ap(&self, label: &str) -> Option<f64> {
        self.columns.iter().find(|c| c.label == label).and_then(|c| c.ap)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("column,ap\n");
        for c in &self.columns {
            text.push_str(&format!(
                "{},{}\n",
                c.label,
                c.ap.map_or("na".to_string(), |v| format!("{v:.6}"))
            ));
        }
        text.push_str(&format!(
            "overall,{}\n",
            self.overall.map_or("na".to_string(), |v| format!("{v:.6}"))
        ));
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Context shared by the evaluation entry points.
pub struct Evaluator<'a> {
    pub detector: &'a dyn DetectorAdapter,
    pub data: &'a Dataset,
    pub eval_cfg: &'a EvalConfig,
    pub transforms: &'a TransformSpec,
    pub placement: &'a transforms::PlacementRule,
    pub eval_candidate_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl<'a> Evaluator<'a> {
    pub fn from_config(
        cfg: &'a ExperimentConfig,
        detector: &'a dyn DetectorAdapter,
        data: &'a Dataset,
    ) -> Self {
        Evaluator {
            detector,
            data,
            eval_cfg: &cfg.eval,
            transforms: &cfg.train.transforms,
            placement: &cfg.train.placement,
            eval_candidate_threshold: cfg.detector.eval_candidate_threshold,
            nms_iou: cfg.detector.nms_iou,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        }
    }

    fn detect_attacked(
        &self,
        image: &ImageBuf,
    ) -> Result<Vec<Detection>> {
        let dets = self.detector.detect(
            image,
            crate::detector::ObjScoreMode::ObjTimesClass,
            self.eval_candidate_threshold,
        )?;
        nms(dets, self.nms_iou)
    }

    /// Evaluate one column variant over the ground-truth image set, under a
    /// patch transformer `f(image_index, repeat) -> patch`.
    fn column_ap(
        &self,
        gt: &PseudoGroundTruth,
        patch: &Patch,
        repeat: usize,
        spec: &TransformSpec,
        prep: &(dyn Fn(&Patch, usize, usize) -> Result<Patch> + Sync),
        jpeg: Option<u8>,
    ) -> Result<Option<f64>> {
        let streams = SeedStreams::new(self.seed);
        let run_image = |&(idx, ref boxes): &(usize, Vec<crate::detector::BBox>)|
            -> Result<(Vec<Detection>, Vec<crate::detector::BBox>)> {
            let entry = &self.data.entries[idx];
            let p = prep(patch, idx, repeat)?;
            let mut rng = streams.stream_indexed("eval-attach", (idx * 1009 + repeat) as u64);
            let mut attacked =
                transforms::attach(&entry.image, &p, boxes, self.placement, spec, &mut rng)?;
            if let Some(q) = jpeg {
                attacked = attacked.jpeg_cycle(q)?;
            }
            Ok((self.detect_attacked(&attacked)?, boxes.clone()))
        };

        let images: Vec<(Vec<Detection>, Vec<crate::detector::BBox>)> =
            if self.eval_cfg.jobs > 1 {
                use rayon::prelude::*;
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(self.eval_cfg.jobs)
                    .build()
                    .map_err(|e| Error::config(e.to_string()))?;
                pool.install(|| gt.images.par_iter().map(run_image).collect::<Result<Vec<_>>>())?
            } else {
                gt.images.iter().map(run_image).collect::<Result<Vec<_>>>()?
            };
        Ok(average_precision(&images, self.eval_cfg.iou_threshold))
    }

    /// Run the configured protocol columns on a patch.
    pub fn evaluate(&self, patch: &Patch) -> Result<EvalReport> {
        let patch = self.normalized_patch(patch)?;
        let gt = pseudo_ground_truth(
            self.detector,
            self.data,
            self.eval_candidate_threshold,
            self.nms_iou,
            self.eval_cfg.gt_confidence,
        )?;
        ensure_arg!(!gt.images.is_empty(), "no image produced confident clean detections");

        let identity = TransformSpec::identity();
        let streams = SeedStreams::new(self.seed);
        let mut columns = Vec::new();
        for col in &self.eval_cfg.columns {
            let result = match col {
                EvalColumn::Original => ColumnResult {
                    label: col.label(),
                    ap: self.column_ap(&gt, &patch, 0, &identity, &|p, _, _| Ok(p.clone()), None)?,
                    repeats: Vec::new(),
                    note: None,
                },
                EvalColumn::Eot => ColumnResult {
                    label: col.label(),
                    ap: self.column_ap(&gt, &patch, 0, self.transforms, &|p, _, _| Ok(p.clone()), None)?,
                    repeats: Vec::new(),
                    note: None,
                },
                EvalColumn::TcMean => {
                    let mut repeats = Vec::with_capacity(self.eval_cfg.tc_repeats);
                    for rep in 0..self.eval_cfg.tc_repeats {
                        let ap = self.column_ap(
                            &gt,
                            &patch,
                            rep,
                            self.transforms,
                            &|p, idx, rep| {
                                let mut rng = streams
                                    .stream_indexed("eval-tc", (idx * 1009 + rep) as u64);
                                let ox = rng.gen_range(0..p.width() as i64);
                                let oy = rng.gen_range(0..p.height() as i64);
                                transforms::toroidal_crop(p, p.width(), p.height(), (ox, oy))
                            },
                            None,
                        )?;
                        if let Some(v) = ap {
                            repeats.push(v);
                        }
                    }
                    let ap = (!repeats.is_empty())
                        .then(|| repeats.iter().sum::<f64>() / repeats.len() as f64);
                    ColumnResult { label: col.label(), ap, repeats, note: None }
                }
                EvalColumn::Oc(r) => {
                    let r = *r;
                    let ap = self.column_ap(
                        &gt,
                        &patch,
                        0,
                        self.transforms,
                        &|p, idx, _| {
                            let mut rng = streams.stream_indexed(
                                &format!("eval-oc-{r}"),
                                idx as u64,
                            );
                            transforms::occlude(p, r, &mut rng)
                        },
                        None,
                    )?;
                    ColumnResult { label: col.label(), ap, repeats: Vec::new(), note: None }
                }
                EvalColumn::Jpeg => ColumnResult {
                    label: col.label(),
                    ap: self.column_ap(
                        &gt,
                        &patch,
                        0,
                        self.transforms,
                        &|p, _, _| Ok(p.clone()),
                        Some(self.eval_cfg.jpeg_quality),
                    )?,
                    repeats: Vec::new(),
                    note: None,
                },
            };
            columns.push(result);
        }

        let non_original: Vec<f64> = columns
            .iter()
            .filter(|c| c.label != "original")
            .filter_map(|c| c.ap)
            .collect();
        let overall = (!non_original.is_empty())
            .then(|| non_original.iter().sum::<f64>() / non_original.len() as f64);
        Ok(EvalReport {
            columns,
            overall,
            excluded_images: gt.excluded,
            evaluated_images: gt.images.len(),
            config_hash: self.config_hash.clone(),
        })
    }

    /// Occlusion degradation curve: Oc(r) AP per ratio (ascending).
    pub fn degradation_sweep(&self, patch: &Patch, ratios: &[f64]) -> Result<Vec<(f64, f64)>> {
        ensure_arg!(
            ratios.windows(2).all(|w| w[0] <= w[1]),
            "ratios must be ascending"
        );
        ensure_arg!(
            ratios.iter().all(|r| (0.0..=1.0).contains(r)),
            "ratios must lie in [0, 1]"
        );
        let patch = self.normalized_patch(patch)?;
        let gt = pseudo_ground_truth(
            self.detector,
            self.data,
            self.eval_candidate_threshold,
            self.nms_iou,
            self.eval_cfg.gt_confidence,
        )?;
        let streams = SeedStreams::new(self.seed);
        let mut curve = Vec::with_capacity(ratios.len());
        for &r in ratios {
            let ap = self.column_ap(
                &gt,
                &patch,
                0,
                self.transforms,
                &|p, idx, _| {
                    let mut rng = streams.stream_indexed(&format!("eval-oc-{r}"), idx as u64);
                    transforms::occlude(p, r, &mut rng)
                },
                None,
            )?;
            curve.push((r, ap.unwrap_or(f64::NAN)));
        }
        Ok(curve)
    }

    fn normalized_patch(&self, patch: &Patch) -> Result<Patch> {
        match self.eval_cfg.normalize_pixels {
            None => Ok(patch.clone()),
            Some(total) => {
                let aspect = patch.width() as f64 / patch.height() as f64;
                let h = ((total as f64 / aspect).sqrt()).round().max(1.0) as usize;
                let w = ((total as f64 / h as f64).round()).max(1.0) as usize;
                if w == patch.width() && h == patch.height() {
                    Ok(patch.clone())
                } else {
                    patch.resized(w, h)
                }
            }
        }
    }
}

/// Write a sweep curve as CSV (`ratio,ap`).
pub fn write_sweep_csv(curve: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut text = String::from("ratio,ap\n");
    for (r, ap) in curve {
        text.push_str(&format!("{r},{ap:.6}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Attack success rate over a frame sequence: the fraction of frames whose
/// best person detection has confidence below 0.5 or IoU below 0.5 against
/// ground truth.
pub fn attack_success_rate(
    frames: &[(Vec<Detection>, Vec<crate::detector::BBox>)],
) -> Result<f64> {
    ensure_arg!(!frames.is_empty(), "attack success rate needs at least one frame");
    let mut successes = 0usize;
    for (dets, gt) in frames {
        let best = dets
            .iter()
            .max_by(|a, b| a.obj_score.partial_cmp(&b.obj_score).unwrap());
        let success = match best {
            None => true,
            Some(d) => {
                d.obj_score < 0.5 || crate::objective::best_iou(&d.bbox, gt) < 0.5
            }
        };
        successes += success as usize;
    }
    Ok(successes as f64 / frames.len() as f64)
}

/// One row of the information-deletion comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub report: EvalReport,
}

/// The masking strategies compared by the harness, in output order.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainMaskMode {
    Vanilla,
    Baseline(BaselineMaskMode),
    Decouple,
}

impl TrainMaskMode {
    pub fn label(&self) -> &'static str {
        match self {
            TrainMaskMode::Vanilla => "vanilla",
            TrainMaskMode::Baseline(BaselineMaskMode::Has { .. }) => "has",
            TrainMaskMode::Baseline(BaselineMaskMode::Cutout { .. }) => "cutout",
            TrainMaskMode::Baseline(BaselineMaskMode::Gridmask { .. }) => "gridmask",
            TrainMaskMode::Baseline(BaselineMaskMode::RandomErasing { .. }) => "random_erasing",
            TrainMaskMode::Decouple => "decouple",
        }
    }

    /// The standard comparison set.
    pub fn standard_set() -> Vec<TrainMaskMode> {
        vec![
            TrainMaskMode::Vanilla,
            TrainMaskMode::Baseline(BaselineMaskMode::has_default()),
            TrainMaskMode::Baseline(BaselineMaskMode::cutout_default()),
            TrainMaskMode::Baseline(BaselineMaskMode::gridmask_default()),
            TrainMaskMode::Baseline(BaselineMaskMode::random_erasing_default()),
            TrainMaskMode::Decouple,
        ]
    }
}

/// Train one patch per masking strategy under a shared config and evaluate
/// each with the same protocol, producing the comparison table.
pub fn baseline_comparison(
    base_cfg: &ExperimentConfig,
    detector: &dyn DetectorAdapter,
    train_data: &Dataset,
    eval_data: &Dataset,
    modes: &[TrainMaskMode],
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut cfg = base_cfg.clone();
        cfg.output_dir = base_cfg.output_dir.join(mode.label());
        match mode {
            TrainMaskMode::Vanilla => {
                cfg.train.strategy = Strategy::none();
            }
            TrainMaskMode::Baseline(_) | TrainMaskMode::Decouple => {
                // Decouple keeps the configured strategy; baselines replace
                // the masking inside the trainer via `baseline_mask`.
            }
        }
        let patch = match mode {
            TrainMaskMode::Baseline(b) => {
                train_with_baseline_mask(&cfg, detector, train_data, b)?
            }
            _ => PatchTrainer::new(&cfg, detector, train_data)?.run(None)?.patch,
        };
        let evaluator = Evaluator::from_config(base_cfg, detector, eval_data);
        let report = evaluator.evaluate(&patch)?;
        rows.push(ComparisonRow { mode: mode.label().to_string(), report });
    }
    Ok(rows)
}

/// Baseline-mask training: the decoupling stage is replaced by a fixed-value
/// deletion mask baked into RGB, the semantics of the original augmentation
/// methods. Implemented as vanilla strategy plus a per-step RGB mask.
fn train_with_baseline_mask(
    cfg: &ExperimentConfig,
    detector: &dyn DetectorAdapter,
    train_data: &Dataset,
    mode: &BaselineMaskMode,
) -> Result<Patch> {
    let mut cfg = cfg.clone();
    cfg.train.strategy = Strategy::none();
    let trainer = PatchTrainer::new(&cfg, detector, train_data)?;
    trainer.run_with_baseline_mask(mode).map(|o| o.patch)
}

/// Render the comparison table as CSV.
pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    ensure_arg!(!rows.is_empty(), "comparison table is empty");
    let labels: Vec<String> = rows[0].report.columns.iter().map(|c| c.label.clone()).collect();
    let mut text = String::from("mode");
    for l in &labels {
        text.push_str(&format!(",{l}"));
    }
    text.push_str(",overall\n");
    for row in rows {
        text.push_str(&row.mode);
        for c in &row.report.columns {
            text.push_str(&format!(
                ",{}",
                c.ap.map_or("na".to_string(), |v| format!("{v:.6}"))
            ));
        }
        text.push_str(&format!(
            ",{}\n",
            row.report.overall.map_or("na".to_string(), |v| format!("{v:.6}"))
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection { bbox, objectness: score, class_probs: [1.0, 0.0], obj_score: score }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)];
        let dets = vec![det(gt[0], 0.9), det(gt[1], 0.8)];
        let images = vec![(dets, gt)];
        assert!((average_precision(&images, 0.5).unwrap() - 1.0).abs() < 1e-12);

        let images = vec![(Vec::new(), vec![bx(0.0, 0.0, 1.0, 1.0)])];
        assert_eq!(average_precision(&images, 0.5), Some(0.0));

        let images: Vec<(Vec<Detection>, Vec<BBox>)> = vec![(Vec::new(), Vec::new())];
        assert_eq!(average_precision(&images, 0.5), None);
    }

    #[test]
    fn ap_hand_built_curve() {
        // 2 GT; detections ranked 0.9 (TP), 0.8 (FP), 0.7 (TP).
        // PR points: (0.5, 1), (0.5, 1/2), (1.0, 2/3).
        // All-point AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0)];
        let dets = vec![
            det(gt[0], 0.9),
            det(bx(50.0, 50.0, 60.0, 60.0), 0.8),
            det(gt[1], 0.7),
        ];
        let images = vec![(dets, gt)];
        let ap = average_precision(&images, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn ap_monotone_when_tp_scores_drop_below_fp() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let tp_high = vec![(vec![det(gt[0], 0.9), det(bx(40.0, 40.0, 50.0, 50.0), 0.5)], gt.clone())];
        let tp_low = vec![(vec![det(gt[0], 0.3), det(bx(40.0, 40.0, 50.0, 50.0), 0.5)], gt.clone())];
        let hi = average_precision(&tp_high, 0.5).unwrap();
        let lo = average_precision(&tp_low, 0.5).unwrap();
        assert!(hi >= lo);
        assert!((hi - 1.0).abs() < 1e-12);
        assert!((lo - 0.5).abs() < 1e-12);
    }

    #[test]
    fn asr_rule_application() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        // (conf 0.9, IoU 1) detected; (conf 0.4, IoU 1) low conf;
        // (conf 0.9, IoU 0) bad box.
        let frames = vec![
            (vec![det(gt[0], 0.9)], gt.clone()),
            (vec![det(gt[0], 0.4)], gt.clone()),
            (vec![det(bx(50.0, 50.0, 60.0, 60.0), 0.9)], gt.clone()),
        ];
        let asr = attack_success_rate(&frames).unwrap();
        assert!((asr - 2.0 / 3.0).abs() < 1e-12);

        let all_missed: Vec<(Vec<Detection>, Vec<BBox>)> =
            vec![(Vec::new(), gt.clone()), (Vec::new(), gt.clone())];
        assert_eq!(attack_success_rate(&all_missed).unwrap(), 1.0);

        let all_hit = vec![(vec![det(gt[0], 0.99)], gt.clone())];
        assert_eq!(attack_success_rate(&all_hit).unwrap(), 0.0);

        assert!(attack_success_rate(&[]).is_err());
    }
}
