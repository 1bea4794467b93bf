//! The end-to-end patch optimization loop.
//!
//! Each step: sample the epoch's (n, r) plan, decouple the patch into an
//! alpha mask with a toroidal border shift, optionally crop toroidally and
//! deform with a thin plate spline, attach to every labeled person box under
//! fresh EoT draws, run the detector, select the accuracy-score box per
//! image, and take one optimizer step on the mean selected object score plus
//! the printability and smoothness regularizers. RGB is clamped to `[0, 1]`
//! after every update unless sigmoid reparameterization is enabled.
//!
//! All stochasticity derives from named per-step streams of the root seed,
//! so a resumed run replays exactly the draws of an uninterrupted one.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_taps_plain, Graph, T};
use crate::ckpt::TensorFile;
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::detector::DetectorAdapter;
use crate::error::{ensure_arg, Error, Result};
use crate::masks::{self, BaselineMaskMode, ShiftOffset};
use crate::objective::{self, accuracy_select, LossBreakdown, PrintPalette, Selection};
use crate::opt::{Adam, AdamConfig};
use crate::patch::{Patch, PatchSidecar};
use crate::rng::SeedStreams;
use crate::scheduler::{schedule, MaskPlan};
use crate::transforms::{self, tps};

/// Initialize a patch from clipped Gaussian noise (mean 0.5, std 0.25) with
/// an opaque alpha channel.
pub fn init_patch(width: usize, height: usize, rng: &mut impl Rng) -> Result<Patch> {
    ensure_arg!(width >= 2 && height >= 2, "patch must be at least 2x2");
    let normal = Normal::new(0.5, 0.25).expect("valid normal");
    let rgb = (0..3 * width * height)
        .map(|_| f64::clamp(normal.sample(rng), 0.0, 1.0))
        .collect();
    Patch::opaque(width, height, rgb)
}

/// Per-epoch manifest record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub n: Option<usize>,
    pub r: Option<f64>,
    pub l_acc: f64,
    pub l_nps: f64,
    pub l_tv: f64,
    pub total: f64,
    pub evaded_images: usize,
    pub skipped_batches: usize,
    pub tps_fallbacks: usize,
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub patch: Patch,
    pub epochs_run: usize,
    pub manifest_path: PathBuf,
    pub patch_path: PathBuf,
    pub records: Vec<EpochRecord>,
}

struct StepStats {
    breakdown: LossBreakdown,
    evaded: usize,
    tps_fallbacks: usize,
}

/// Optimizer state that survives checkpointing.
struct PatchState {
    /// The optimized variable: RGB values, or logits under reparameterization.
    theta: Vec<f64>,
    adam: Adam,
    width: usize,
    height: usize,
}

impl PatchState {
    fn rgb(&self, sigmoid_reparam: bool) -> Vec<f64> {
        if sigmoid_reparam {
            self.theta.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
        } else {
            self.theta.clone()
        }
    }

    fn to_patch(&self, sigmoid_reparam: bool) -> Patch {
        Patch::opaque(self.width, self.height, self.rgb(sigmoid_reparam))
            .expect("state values stay in range")
    }
}

pub struct PatchTrainer<'a> {
    cfg: &'a ExperimentConfig,
    detector: &'a dyn DetectorAdapter,
    data: &'a Dataset,
    palette: PrintPalette,
    streams: SeedStreams,
    batches_per_epoch: usize,
}

impl<'a> PatchTrainer<'a> {
    /// `data` must already be at the detector's input size.
    pub fn new(
        cfg: &'a ExperimentConfig,
        detector: &'a dyn DetectorAdapter,
        data: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure_arg!(!data.is_empty(), "training dataset is empty");
        let (iw, ih) = detector.input_size();
        for e in &data.entries {
            ensure_arg!(
                e.image.width == iw && e.image.height == ih,
                "training image {} is {}x{}, detector expects {}x{}",
                e.name,
                e.image.width,
                e.image.height,
                iw,
                ih
            );
        }
        let palette = match &cfg.train.palette {
            Some(path) => PrintPalette::load(path)?,
            None => PrintPalette::default_printable(),
        };
        let batches_per_epoch = data.len().div_ceil(cfg.train.batch_size);
        Ok(PatchTrainer {
            cfg,
            detector,
            data,
            palette,
            streams: SeedStreams::new(cfg.seed),
            batches_per_epoch,
        })
    }

    pub fn palette(&self) -> &PrintPalette {
        &self.palette
    }

    fn initial_state(&self) -> Result<PatchState> {
        let t = &self.cfg.train;
        let patch = init_patch(t.patch_width, t.patch_height, &mut self.streams.stream("patch-init"))?;
        let (rgb, _) = patch.into_parts();
        let theta = if t.sigmoid_reparam {
            rgb.iter().map(|&v| logit(v.clamp(1e-3, 1.0 - 1e-3))).collect()
        } else {
            rgb
        };
        let n = theta.len();
        Ok(PatchState {
            theta,
            adam: Adam::new(self.adam_config(), n),
            width: t.patch_width,
            height: t.patch_height,
        })
    }

    fn adam_config(&self) -> AdamConfig {
        let t = &self.cfg.train;
        AdamConfig { lr: t.learning_rate, beta1: t.adam_beta1, beta2: t.adam_beta2, eps: t.adam_eps }
    }

    /// Epoch-order permutation of dataset indices.
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = self.streams.stream_indexed("data-order", epoch as u64);
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Insert the patch variable into a graph, returning (variable, rgb).
    fn insert_patch(&self, g: &mut Graph, state: &PatchState) -> (T, T) {
        let dims = [3, state.height, state.width];
        let var = g.param(state.theta.clone(), &dims);
        let rgb = if self.cfg.train.sigmoid_reparam { g.sigmoid(var) } else { var };
        (var, rgb)
    }

    /// One optimization step over a batch of dataset indices.
    fn train_step(
        &self,
        state: &mut PatchState,
        epoch: usize,
        global_step: u64,
        batch: &[usize],
        plan: MaskPlan,
        baseline: Option<&BaselineMaskMode>,
        audit: Option<&mut Vec<serde_json::Value>>,
    ) -> Result<StepStats> {
        let t = &self.cfg.train;
        let (pw, ph) = (state.width, state.height);
        let plane = pw * ph;

        // Step-level draws: decoupling mask, border shift, toroidal crop
        // origin, TPS taps. One of each per step unless mask_per_image.
        let step_mask = |idx: u64| -> Result<Option<Vec<f64>>> {
            match plan {
                MaskPlan::None => Ok(None),
                MaskPlan::Sample { n, r } => {
                    let mut mask_rng = self.streams.stream_indexed("mask", idx);
                    let grid = masks::sample_block_grid(n, r, &mut mask_rng)?;
                    let mask = masks::render_pixel_mask(&grid, pw, ph)?;
                    let shifted = if t.border_shift {
                        let mut shift_rng = self.streams.stream_indexed("shift", idx);
                        let offset = ShiftOffset::sample(pw, ph, &mut shift_rng);
                        masks::border_shift(&mask, offset)
                    } else {
                        mask
                    };
                    Ok(Some(shifted.as_alpha()))
                }
            }
        };

        let tc_origin: Option<(i64, i64)> = if t.tc_training {
            let mut rng = self.streams.stream_indexed("tc", global_step);
            Some((rng.gen_range(0..pw as i64), rng.gen_range(0..ph as i64)))
        } else {
            None
        };

        let mut tps_fallbacks = 0usize;
        let tps_taps = if t.transforms.tps_enabled && t.transforms.tps_jitter > 0.0 {
            let mut rng = self.streams.stream_indexed("tps", global_step);
            match tps::plan_tps_taps(pw, ph, t.transforms.tps_jitter, t.transforms.tps_grid, &mut rng)
            {
                Some(taps) => Some(taps),
                None => {
                    tps_fallbacks += 1;
                    None
                }
            }
        } else {
            None
        };

        let shared_alpha = if t.mask_per_image { None } else { step_mask(global_step)? };

        // Fixed-value deletion baseline, baked into RGB by multiplication
        // (the original augmentation methods' semantics). Sampled per step
        // or per image, mirroring the decoupling mask granularity.
        let baseline_mask3 = |idx: u64| -> Result<Option<Vec<f64>>> {
            match baseline {
                None => Ok(None),
                Some(mode) => {
                    let mut rng = self.streams.stream_indexed("baseline-mask", idx);
                    let mask = masks::sample_baseline_mask(mode, pw, ph, &mut rng)?;
                    let m = mask.as_alpha();
                    let mut m3 = Vec::with_capacity(3 * plane);
                    for _ in 0..3 {
                        m3.extend_from_slice(&m);
                    }
                    Ok(Some(m3))
                }
            }
        };
        let shared_baseline3 =
            if t.mask_per_image { None } else { baseline_mask3(global_step)? };

        let mut acc_grad = vec![0.0; 3 * plane];
        let mut l_acc_sum = 0.0;
        let mut n_selected = 0usize;
        let mut evaded = 0usize;
        let mut audit_rows: Vec<serde_json::Value> = Vec::new();

        for (slot, &img_idx) in batch.iter().enumerate() {
            let entry = &self.data.entries[img_idx];
            if entry.person_boxes.is_empty() {
                continue;
            }
            let alpha_full = match &shared_alpha {
                Some(a) => Some(a.clone()),
                None => step_mask(global_step * 1024 + slot as u64)?,
            };

            let mut g = Graph::new();
            let (var_node, mut rgb_node) = self.insert_patch(&mut g, state);
            let image_baseline3 = match &shared_baseline3 {
                Some(m3) => Some(m3.clone()),
                None => baseline_mask3(global_step * 1024 + slot as u64)?,
            };
            if let Some(m3) = image_baseline3 {
                let mask_node = g.constant(m3, &[3, ph, pw]);
                rgb_node = g.mul(rgb_node, mask_node);
            }
            let mut alpha = alpha_full.unwrap_or_else(|| vec![1.0; plane]);

            if let Some((ox, oy)) = tc_origin {
                let idx = transforms::toroidal_index_map(pw, ph, pw, ph, (ox, oy));
                alpha = idx.iter().map(|&i| alpha[i as usize]).collect();
                rgb_node = g.gather_idx(rgb_node, idx, ph, pw);
            }
            if let Some(taps) = &tps_taps {
                alpha = apply_taps_plain(&alpha, taps)
                    .into_iter()
                    .map(|a| a.clamp(0.0, 1.0))
                    .collect();
                rgb_node = g.bilinear_gather(rgb_node, taps.clone(), ph, pw);
                rgb_node = g.clamp01(rgb_node);
            }

            let mut attach_rng =
                self.streams.stream_indexed(&format!("attach-{slot}"), global_step);
            let plans = transforms::plan_attachments(
                pw,
                ph,
                &alpha,
                &entry.person_boxes,
                &t.placement,
                &t.transforms,
                &mut attach_rng,
            )?;
            if audit.is_some() {
                for (b, plan) in plans.iter().enumerate() {
                    audit_rows.push(serde_json::json!({
                        "step": global_step,
                        "epoch": epoch,
                        "image": entry.name,
                        "box": b,
                        "draw": plan.draw,
                        "tc_origin": tc_origin,
                    }));
                }
            }
            let (iw, ih) = (entry.image.width, entry.image.height);
            let bg = g.constant(entry.image.data.clone(), &[3, ih, iw]);
            let attached = transforms::attach_graph(&mut g, bg, rgb_node, &plans);
            let dets = self.detector.forward_graph(
                &mut g,
                attached,
                self.cfg.detector.obj_score_mode,
                self.cfg.detector.candidate_threshold,
            )?;
            let scored: Vec<(f64, f64)> = dets
                .iter()
                .map(|d| {
                    (d.detection.obj_score, objective::best_iou(&d.detection.bbox, &entry.person_boxes))
                })
                .collect();
            match accuracy_select(&scored, t.weights.w) {
                Selection::Evaded => evaded += 1,
                Selection::Selected { index, objectness } => {
                    g.backward(dets[index].score_node)?;
                    for (a, gr) in acc_grad.iter_mut().zip(g.grad(var_node)) {
                        *a += gr;
                    }
                    l_acc_sum += objectness;
                    n_selected += 1;
                }
            }
        }

        if n_selected > 0 {
            let inv = 1.0 / n_selected as f64;
            for v in acc_grad.iter_mut() {
                *v *= inv;
            }
        }

        // Regularizers on the raw patch (or, under TC training, on this
        // step's toroidal crop: the surface that would actually be printed).
        let mut g = Graph::new();
        let (reg_var, mut reg_rgb) = self.insert_patch(&mut g, state);
        if let Some((ox, oy)) = tc_origin {
            let idx = transforms::toroidal_index_map(pw, ph, pw, ph, (ox, oy));
            reg_rgb = g.gather_idx(reg_rgb, idx, ph, pw);
        }
        let tv = g.tv_loss(reg_rgb, objective::TV_EPS);
        let kept: Vec<u32> = (0..plane as u32).collect();
        let nps = g.nps_loss(reg_rgb, self.palette.colors(), kept);
        let wtv = g.mul_scalar(tv, t.weights.beta);
        let wnps = g.mul_scalar(nps, t.weights.alpha);
        let reg_total = g.add(wtv, wnps);
        g.backward(reg_total)?;
        let l_tv = g.scalar(tv);
        let l_nps = g.scalar(nps);

        let mut grad = acc_grad;
        for (v, r) in grad.iter_mut().zip(g.grad(reg_var)) {
            *v += r;
        }

        if t.learning_rate > 0.0 {
            state.adam.step(&mut state.theta, &grad);
            if !t.sigmoid_reparam {
                for v in state.theta.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }

        if let Some(audit) = audit {
            audit.extend(audit_rows);
        }

        let l_acc = if n_selected > 0 { l_acc_sum / n_selected as f64 } else { 0.0 };
        Ok(StepStats {
            breakdown: LossBreakdown::compose(l_acc, l_nps, l_tv, &t.weights),
            evaded,
            tps_fallbacks,
        })
    }

    /// Run the full training loop, optionally resuming from a checkpoint.
    pub fn run(&self, resume_from: Option<&Path>) -> Result<TrainOutput> {
        self.run_inner(resume_from, None)
    }

    /// Training variant for the information-deletion comparison: the
    /// decoupling stage is replaced by a per-step fixed-value deletion mask.
    pub fn run_with_baseline_mask(&self, mode: &BaselineMaskMode) -> Result<TrainOutput> {
        mode.validate()?;
        self.run_inner(None, Some(mode))
    }

    fn run_inner(
        &self,
        resume_from: Option<&Path>,
        baseline: Option<&BaselineMaskMode>,
    ) -> Result<TrainOutput> {
        let t = &self.cfg.train;
        let out_dir = &self.cfg.output_dir;
        std::fs::create_dir_all(out_dir)?;
        self.cfg.write_resolved(out_dir)?;
        let config_hash = self.cfg.hash();

        let (mut state, start_epoch) = match resume_from {
            Some(path) => self.load_checkpoint(path)?,
            None => (self.initial_state()?, 0),
        };

        let manifest_path = out_dir.join("manifest.jsonl");
        let mut manifest = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest_path)?;
        if start_epoch == 0 {
            writeln!(
                manifest,
                "{}",
                serde_json::json!({
                    "type": "header",
                    "config_hash": config_hash,
                    "code_version": crate::CODE_VERSION,
                })
            )?;
        }

        let mut audit_file = if t.log_transforms {
            Some(std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(out_dir.join("transforms.jsonl"))?)
        } else {
            None
        };

        let mut records = Vec::new();
        for epoch in start_epoch..t.epochs {
            let mut sched_rng = self.streams.stream_indexed("schedule", epoch as u64);
            let plan = schedule(epoch, t.epochs.max(1), &t.strategy, &mut sched_rng)?.plan;
            let order = self.epoch_order(epoch);

            let mut skipped_batches = 0usize;
            let mut evaded = 0usize;
            let mut tps_fallbacks = 0usize;
            let mut sums = [0.0f64; 4];
            let mut steps = 0usize;
            for (batch_idx, batch) in order.chunks(t.batch_size).enumerate() {
                if batch.iter().all(|&i| self.data.entries[i].person_boxes.is_empty()) {
                    skipped_batches += 1;
                    continue;
                }
                let global_step = (epoch * self.batches_per_epoch + batch_idx) as u64;
                let mut audit_rows = audit_file.as_ref().map(|_| Vec::new());
                let stats = self.train_step(
                    &mut state,
                    epoch,
                    global_step,
                    batch,
                    plan,
                    baseline,
                    audit_rows.as_mut(),
                )?;
                if let (Some(file), Some(rows)) = (audit_file.as_mut(), audit_rows) {
                    for row in rows {
                        writeln!(file, "{row}")?;
                    }
                }
                sums[0] += stats.breakdown.l_acc;
                sums[1] += stats.breakdown.l_nps;
                sums[2] += stats.breakdown.l_tv;
                sums[3] += stats.breakdown.total;
                evaded += stats.evaded;
                tps_fallbacks += stats.tps_fallbacks;
                steps += 1;
            }
            let denom = steps.max(1) as f64;
            let record = EpochRecord {
                epoch,
                n: plan.n(),
                r: plan.r(),
                l_acc: sums[0] / denom,
                l_nps: sums[1] / denom,
                l_tv: sums[2] / denom,
                total: sums[3] / denom,
                evaded_images: evaded,
                skipped_batches,
                tps_fallbacks,
            };
            writeln!(
                manifest,
                "{}",
                serde_json::json!({ "type": "epoch", "record": record })
            )?;
            records.push(record);

            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 && epoch + 1 < t.epochs
            {
                let path = out_dir.join(format!("ckpt_{:06}.dptf", epoch + 1));
                self.save_checkpoint(&state, epoch + 1, &path)?;
                writeln!(
                    manifest,
                    "{}",
                    serde_json::json!({ "type": "checkpoint", "epoch": epoch + 1,
                                        "path": path.file_name().unwrap().to_str() })
                )?;
            }
        }

        let patch = state.to_patch(t.sigmoid_reparam);
        let patch_path = out_dir.join("patch.png");
        patch.save_png(&patch_path)?;
        PatchSidecar::new(config_hash.clone(), t.epochs).save(&out_dir.join("patch.json"))?;
        let final_ckpt = out_dir.join("ckpt_final.dptf");
        self.save_checkpoint(&state, t.epochs, &final_ckpt)?;
        writeln!(
            manifest,
            "{}",
            serde_json::json!({ "type": "final", "patch": "patch.png", "epochs": t.epochs })
        )?;

        Ok(TrainOutput {
            patch,
            epochs_run: t.epochs - start_epoch,
            manifest_path,
            patch_path,
            records,
        })
    }

    fn save_checkpoint(&self, state: &PatchState, epoch: usize, path: &Path) -> Result<()> {
        let mut f = TensorFile::new();
        let (m, v, step) = state.adam.state();
        f.push("meta", vec![4], vec![
            epoch as f64,
            step as f64,
            state.width as f64,
            state.height as f64,
        ]);
        f.push("theta", vec![3, state.height, state.width], state.theta.clone());
        f.push("adam.m", vec![m.len()], m);
        f.push("adam.v", vec![v.len()], v);
        f.save(path)?;
        let sidecar = serde_json::json!({
            "epoch": epoch,
            "config_hash": self.cfg.hash(),
            "code_version": crate::CODE_VERSION,
        });
        std::fs::write(path.with_extension("json"), sidecar.to_string())?;
        Ok(())
    }

    fn load_checkpoint(&self, path: &Path) -> Result<(PatchState, usize)> {
        let f = TensorFile::load(path)?;
        let bad = |d: &str| Error::Format {
            what: "training checkpoint",
            path: path.to_path_buf(),
            detail: d.to_string(),
        };
        let meta = f.get("meta").ok_or_else(|| bad("missing meta"))?;
        let epoch = meta.data[0] as usize;
        let step = meta.data[1] as u64;
        let width = meta.data[2] as usize;
        let height = meta.data[3] as usize;
        ensure_arg!(
            width == self.cfg.train.patch_width && height == self.cfg.train.patch_height,
            "checkpoint patch {}x{} does not match config {}x{}",
            width,
            height,
            self.cfg.train.patch_width,
            self.cfg.train.patch_height
        );
        let theta = f.get("theta").ok_or_else(|| bad("missing theta"))?.data.clone();
        let m = f.get("adam.m").ok_or_else(|| bad("missing adam.m"))?.data.clone();
        let v = f.get("adam.v").ok_or_else(|| bad("missing adam.v"))?.data.clone();
        let adam = Adam::restore(self.adam_config(), m, v, step);
        Ok((PatchState { theta, adam, width, height }, epoch))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::toy::ToyDetector;
    use crate::detector::DetectorAdapter;

    fn tiny_setup(epochs: usize, lr: f64) -> (ExperimentConfig, ToyDetector, Dataset) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 77;
        cfg.train.patch_width = 12;
        cfg.train.patch_height = 12;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 2;
        cfg.train.learning_rate = lr;
        cfg.train.checkpoint_every = 0;
        cfg.train.transforms.tps_enabled = false;
        cfg.train.placement.relative_width = 0.4;
        let det = ToyDetector::random_init(96, &mut SeedStreams::new(5).stream("det")).unwrap();

        let dir = tempfile::tempdir().unwrap();
        crate::dataset::generate_synthetic_dataset(dir.path(), 4, 96, 3).unwrap();
        let data = Dataset::load(dir.path(), Some(96)).unwrap();
        (cfg, det, data)
    }

    #[test]
    fn init_patch_statistics_and_determinism() {
        let streams = SeedStreams::new(1);
        let a = init_patch(300, 300, &mut streams.stream("patch-init")).unwrap();
        let b = init_patch(300, 300, &mut streams.stream("patch-init")).unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.rgb().iter().sum::<f64>() / a.rgb().len() as f64;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
        let tiny = init_patch(2, 2, &mut streams.stream("x")).unwrap();
        assert_eq!(tiny.width(), 2);
        assert!(init_patch(1, 5, &mut streams.stream("y")).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_patch_but_reports_loss() {
        let (mut cfg, det, data) = tiny_setup(1, 0.0);
        cfg.output_dir = tempfile::tempdir().unwrap().path().join("run");
        let trainer = PatchTrainer::new(&cfg, &det, &data).unwrap();
        let init = init_patch(12, 12, &mut SeedStreams::new(77).stream("patch-init")).unwrap();
        let out = trainer.run(None).unwrap();
        assert_eq!(out.patch.rgb(), init.rgb());
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].total.is_finite());
    }

    #[test]
    fn single_step_is_deterministic() {
        let (mut cfg, det, data) = tiny_setup(1, 0.05);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cfg.output_dir = d1.path().join("a");
        let out1 = PatchTrainer::new(&cfg, &det, &data).unwrap().run(None).unwrap();
        cfg.output_dir = d2.path().join("b");
        let out2 = PatchTrainer::new(&cfg, &det, &data).unwrap().run(None).unwrap();
        assert_eq!(out1.patch, out2.patch);
    }

    #[test]
    fn epochs_zero_returns_initial_patch() {
        let (mut cfg, det, data) = tiny_setup(0, 0.05);
        cfg.output_dir = tempfile::tempdir().unwrap().path().join("run");
        let trainer = PatchTrainer::new(&cfg, &det, &data).unwrap();
        let out = trainer.run(None).unwrap();
        let init = init_patch(12, 12, &mut SeedStreams::new(77).stream("patch-init")).unwrap();
        assert_eq!(out.patch, init);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut cfg, det, data) = tiny_setup(4, 0.05);
        cfg.train.checkpoint_every = 2;

        let full_dir = tempfile::tempdir().unwrap();
        cfg.output_dir = full_dir.path().to_path_buf();
        let full = PatchTrainer::new(&cfg, &det, &data).unwrap().run(None).unwrap();

        let resume_dir = tempfile::tempdir().unwrap();
        cfg.output_dir = resume_dir.path().to_path_buf();
        let trainer = PatchTrainer::new(&cfg, &det, &data).unwrap();
        // First half happens to have written a checkpoint at epoch 2.
        trainer.run(None).unwrap();
        let ckpt = resume_dir.path().join("ckpt_000002.dptf");
        assert!(ckpt.is_file());
        let resumed = trainer.run(Some(&ckpt)).unwrap();
        assert_eq!(resumed.patch, full.patch);
    }

    #[test]
    fn patch_stays_in_range_and_sigmoid_reparam_works() {
        let (mut cfg, det, data) = tiny_setup(2, 0.1);
        cfg.train.sigmoid_reparam = true;
        cfg.output_dir = tempfile::tempdir().unwrap().path().join("run");
        let out = PatchTrainer::new(&cfg, &det, &data).unwrap().run(None).unwrap();
        assert!(out.patch.rgb().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_totals_recompose() {
        let (mut cfg, det, data) = tiny_setup(2, 0.05);
        cfg.output_dir = tempfile::tempdir().unwrap().path().join("run");
        let out = PatchTrainer::new(&cfg, &det, &data).unwrap().run(None).unwrap();
        for r in &out.records {
            let expected =
                r.l_acc + cfg.train.weights.alpha * r.l_nps + cfg.train.weights.beta * r.l_tv;
            assert!((r.total - expected).abs() < 1e-9);
        }
    }
}
