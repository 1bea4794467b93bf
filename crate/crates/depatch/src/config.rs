//! Experiment configuration: one JSON document drives training, evaluation,
//! and comparison runs. Unknown keys are rejected; missing keys take the
//! documented defaults; every run writes its fully resolved config back out
//! next to the artifacts, plus a stable hash for cross-referencing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::ObjScoreMode;
use crate::error::{ensure_arg, Error, Result};
use crate::objective::ObjectiveWeights;
use crate::scheduler::Strategy;
use crate::transforms::{PlacementRule, TransformSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Adapter registry name.
    pub adapter: String,
    pub checkpoint: Option<PathBuf>,
    /// Pre-NMS objectness floor for boxes entering the training objective.
    pub candidate_threshold: f64,
    /// Candidate floor during evaluation (before NMS).
    pub eval_candidate_threshold: f64,
    pub nms_iou: f64,
    pub obj_score_mode: ObjScoreMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            adapter: "toy".into(),
            checkpoint: None,
            candidate_threshold: 0.1,
            eval_candidate_threshold: 0.05,
            nms_iou: 0.45,
            obj_score_mode: ObjScoreMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: ObjectiveWeights,
    pub strategy: Strategy,
    /// Toroidal border shifting of the decoupling mask.
    pub border_shift: bool,
    /// Sample one mask per image instead of one per step.
    pub mask_per_image: bool,
    /// Apply toroidal cropping inside the transform stack (expandable patch).
    pub tc_training: bool,
    /// Optimize logits through a sigmoid instead of clamping after updates.
    pub sigmoid_reparam: bool,
    pub transforms: TransformSpec,
    pub placement: PlacementRule,
    /// Palette file; the bundled 30-color set when absent.
    pub palette: Option<PathBuf>,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Write every sampled transform draw to `transforms.jsonl`.
    pub log_transforms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_width: 300,
            patch_height: 300,
            epochs: 2000,
            batch_size: 8,
            learning_rate: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: ObjectiveWeights::default(),
            strategy: Strategy::pds(),
            border_shift: true,
            mask_per_image: false,
            tc_training: false,
            sigmoid_reparam: false,
            transforms: TransformSpec::default(),
            placement: PlacementRule::default(),
            palette: None,
            checkpoint_every: 200,
            log_transforms: false,
        }
    }
}

/// One evaluation column of the digital protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalColumn {
    /// Raw patch, no transformations.
    Original,
    /// The simulated transformation stack.
    Eot,
    /// Toroidal resampling, averaged over repeats.
    TcMean,
    /// Occlusion of the given patch fraction, then EoT.
    Oc(f64),
    /// EoT, then JPEG re-encoding of the attached image.
    Jpeg,
}

impl EvalColumn {
    pub fn label(&self) -> String {
        match self {
            EvalColumn::Original => "original".into(),
            EvalColumn::Eot => "eot".into(),
            EvalColumn::TcMean => "tc_mean".into(),
            EvalColumn::Oc(r) => format!("oc({r})"),
            EvalColumn::Jpeg => "jpeg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub columns: Vec<EvalColumn>,
    /// Repeats for the stochastic toroidal-resampling column.
    pub tc_repeats: usize,
    pub iou_threshold: f64,
    /// Clean detections above this confidence become pseudo ground truth.
    pub gt_confidence: f64,
    pub jpeg_quality: u8,
    /// Rescale the patch so `width * height` equals this pixel count before
    /// evaluation, for fair cross-patch comparison. `null` disables.
    pub normalize_pixels: Option<usize>,
    /// Worker threads for per-image evaluation.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            columns: vec![
                EvalColumn::Original,
                EvalColumn::Eot,
                EvalColumn::TcMean,
                EvalColumn::Oc(0.1),
                EvalColumn::Oc(0.2),
                EvalColumn::Oc(0.3),
            ],
            tc_repeats: 10,
            iou_threshold: 0.5,
            gt_confidence: 0.5,
            jpeg_quality: 75,
            normalize_pixels: Some(90_000),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!(
                "{}: {e}",
                path.display()
            )))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        ensure_arg!(t.patch_width >= 2 && t.patch_height >= 2, "patch must be at least 2x2");
        ensure_arg!(t.batch_size >= 1, "batch size must be positive");
        ensure_arg!(t.learning_rate >= 0.0, "learning rate must be non-negative");
        t.weights.validate()?;
        t.strategy.validate()?;
        t.transforms.validate()?;
        t.placement.validate()?;
        let d = &self.detector;
        ensure_arg!(
            (0.0..=1.0).contains(&d.candidate_threshold)
                && (0.0..=1.0).contains(&d.eval_candidate_threshold),
            "candidate thresholds must lie in [0, 1]"
        );
        ensure_arg!(d.nms_iou > 0.0 && d.nms_iou <= 1.0, "nms iou must lie in (0, 1]");
        let e = &self.eval;
        ensure_arg!(e.tc_repeats >= 1, "tc repeats must be at least 1");
        ensure_arg!((0.0..=1.0).contains(&e.iou_threshold), "iou threshold in [0, 1]");
        ensure_arg!((0.0..=1.0).contains(&e.gt_confidence), "gt confidence in [0, 1]");
        ensure_arg!(e.jobs >= 1, "jobs must be at least 1");
        for c in &e.columns {
            if let EvalColumn::Oc(r) = c {
                ensure_arg!((0.0..=1.0).contains(r), "occlusion ratio in [0, 1]");
            }
        }
        Ok(())
    }

    /// Stable short hash of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Write the fully resolved config next to the run artifacts.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.json");
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"patch_width": 64, "bogus_key": 1}}"#).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn partial_config_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "train": {"epochs": 10}}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.patch_width, 300);
        assert_eq!(cfg.eval.tc_repeats, 10);
    }

    #[test]
    fn eval_columns_serialize_readably() {
        let cols = vec![EvalColumn::Original, EvalColumn::Oc(0.3), EvalColumn::Jpeg];
        let json = serde_json::to_string(&cols).unwrap();
        assert_eq!(json, r#"["original",{"oc":0.3},"jpeg"]"#);
        let back: Vec<EvalColumn> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cols);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.patch_width = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.eval.columns.push(EvalColumn::Oc(1.5));
        assert!(cfg.validate().is_err());
    }
}
