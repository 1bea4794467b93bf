//! Temporary pilot harness used while tuning the desk-scale setup.

use depatch::dataset::{generate_scene, SceneOptions};
use depatch::detector::train::{cached_toy_detector, ToyTrainConfig};
use depatch::detector::{nms, DetectorAdapter, ObjScoreMode};
use depatch::imagebuf::ImageBuf;
use depatch::rng::SeedStreams;

#[test]
#[ignore]
fn pilot_detector_quality() {
    let t0 = std::time::Instant::now();
    let cfg = ToyTrainConfig::default();
    let (det, path) = cached_toy_detector(&cfg).unwrap();
    println!("detector ready in {:?} at {}", t0.elapsed(), path.display());

    // Blank image.
    let blank = ImageBuf::zeros(160, 160);
    let dets = det.detect(&blank, ObjScoreMode::ObjTimesClass, 0.05).unwrap();
    let confident = dets.iter().filter(|d| d.obj_score > 0.5).count();
    println!("blank image: {} candidates, {} above 0.5", dets.len(), confident);

    // Scenes.
    let opts = SceneOptions::new(160);
    let streams = SeedStreams::new(999);
    let mut detected = 0;
    let mut total_persons = 0;
    let mut score_sum = 0.0;
    for i in 0..30 {
        let mut rng = streams.stream_indexed("pilot-scene", i);
        let (img, labels) = generate_scene(&opts, &mut rng);
        let dets = det.detect(&img, ObjScoreMode::ObjTimesClass, 0.05).unwrap();
        let kept = nms(dets, 0.45).unwrap();
        for l in labels.iter().filter(|l| l.person) {
            total_persons += 1;
            if let Some(d) = kept
                .iter()
                .filter(|d| depatch::detector::iou(&d.bbox, &l.bbox) >= 0.5)
                .max_by(|a, b| a.obj_score.partial_cmp(&b.obj_score).unwrap())
            {
                detected += 1;
                score_sum += d.obj_score;
            }
        }
    }
    println!(
        "persons detected {detected}/{total_persons}, mean score of hits {:.3}",
        score_sum / detected.max(1) as f64
    );
}

use depatch::config::{EvalColumn, ExperimentConfig};
use depatch::dataset::Dataset;
use depatch::evaluation::Evaluator;
use depatch::scheduler::Strategy;
use depatch::trainer::{init_patch, PatchTrainer};

fn pilot_config(seed: u64, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.output_dir = out.to_path_buf();
    cfg.train.patch_width = 64;
    cfg.train.patch_height = 64;
    cfg.train.epochs = 60;
    cfg.train.batch_size = 8;
    cfg.train.checkpoint_every = 0;
    cfg.train.placement.relative_width = 0.45;
    cfg.train.transforms.tps_jitter = 0.02;
    cfg.eval.columns = vec![
        EvalColumn::Original,
        EvalColumn::Eot,
        EvalColumn::Oc(0.1),
        EvalColumn::Oc(0.2),
        EvalColumn::Oc(0.3),
    ];
    cfg.eval.normalize_pixels = None;
    cfg
}

#[test]
#[ignore]
fn pilot_attack() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");
    depatch::dataset::generate_synthetic_dataset(&train_dir, 60, 160, 100).unwrap();
    depatch::dataset::generate_synthetic_dataset(&eval_dir, 40, 160, 200).unwrap();
    let train_data = Dataset::load(&train_dir, Some(160)).unwrap();
    let eval_data = Dataset::load(&eval_dir, Some(160)).unwrap();

    let (det, _) = cached_toy_detector(&ToyTrainConfig::default()).unwrap();

    let cfg = pilot_config(42, &tmp.path().join("run"));
    let evaluator = Evaluator::from_config(&cfg, &det, &eval_data);

    // Noise patch baseline.
    let noise = init_patch(64, 64, &mut SeedStreams::new(7).stream("noise")).unwrap();
    let t0 = std::time::Instant::now();
    let report = evaluator.evaluate(&noise).unwrap();
    println!("noise eval in {:?}", t0.elapsed());
    for c in &report.columns {
        println!("noise {:<10} AP {:?}", c.label, c.ap);
    }

    // Vanilla attack.
    let mut vcfg = pilot_config(42, &tmp.path().join("vanilla"));
    vcfg.train.strategy = Strategy::none();
    let t0 = std::time::Instant::now();
    let out = PatchTrainer::new(&vcfg, &det, &train_data).unwrap().run(None).unwrap();
    println!("vanilla train in {:?}", t0.elapsed());
    for r in out.records.iter().step_by(10) {
        println!("epoch {:>3} l_acc {:.4} total {:.4} evaded {}", r.epoch, r.l_acc, r.total, r.evaded_images);
    }
    let report = evaluator.evaluate(&out.patch).unwrap();
    for c in &report.columns {
        println!("vanilla {:<10} AP {:?}", c.label, c.ap);
    }
}

#[test]
#[ignore]
fn pilot_decoupled() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");
    depatch::dataset::generate_synthetic_dataset(&train_dir, 60, 160, 100).unwrap();
    depatch::dataset::generate_synthetic_dataset(&eval_dir, 40, 160, 200).unwrap();
    let train_data = Dataset::load(&train_dir, Some(160)).unwrap();
    let eval_data = Dataset::load(&eval_dir, Some(160)).unwrap();
    let (det, _) = cached_toy_detector(&ToyTrainConfig::default()).unwrap();

    let cfg = pilot_config(42, &tmp.path().join("run"));
    let evaluator = Evaluator::from_config(&cfg, &det, &eval_data);

    let mut dcfg = pilot_config(42, &tmp.path().join("depatch"));
    dcfg.train.strategy = Strategy::pds();
    let t0 = std::time::Instant::now();
    let out = PatchTrainer::new(&dcfg, &det, &train_data).unwrap().run(None).unwrap();
    println!("depatch train in {:?}", t0.elapsed());
    for r in out.records.iter().step_by(10) {
        println!("epoch {:>3} n {:?} r {:?} l_acc {:.4} evaded {}", r.epoch, r.n, r.r, r.l_acc, r.evaded_images);
    }
    let report = evaluator.evaluate(&out.patch).unwrap();
    for c in &report.columns {
        println!("depatch {:<10} AP {:?}", c.label, c.ap);
    }
}

#[test]
#[ignore]
fn pilot_long() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");
    depatch::dataset::generate_synthetic_dataset(&train_dir, 60, 160, 100).unwrap();
    depatch::dataset::generate_synthetic_dataset(&eval_dir, 40, 160, 200).unwrap();
    let train_data = Dataset::load(&train_dir, Some(160)).unwrap();
    let eval_data = Dataset::load(&eval_dir, Some(160)).unwrap();
    let (det, _) = cached_toy_detector(&ToyTrainConfig::default()).unwrap();

    let cfg = pilot_config(42, &tmp.path().join("run"));
    let evaluator = Evaluator::from_config(&cfg, &det, &eval_data);

    for (name, strategy) in [("vanilla", Strategy::none()), ("depatch", Strategy::pds())] {
        let mut c = pilot_config(42, &tmp.path().join(name));
        c.train.strategy = strategy;
        c.train.epochs = 300;
        let t0 = std::time::Instant::now();
        let out = PatchTrainer::new(&c, &det, &train_data).unwrap().run(None).unwrap();
        println!("{name} train in {:?}", t0.elapsed());
        for r in out.records.iter().step_by(60) {
            println!("  epoch {:>3} l_acc {:.4} evaded {}", r.epoch, r.l_acc, r.evaded_images);
        }
        let report = evaluator.evaluate(&out.patch).unwrap();
        let row: Vec<String> = report.columns.iter()
            .map(|c| format!("{} {:.3}", c.label, c.ap.unwrap()))
            .collect();
        println!("{name}: {}", row.join(" | "));
    }
}

#[test]
#[ignore]
fn pilot_tuned() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");
    depatch::dataset::generate_synthetic_dataset(&train_dir, 60, 160, 100).unwrap();
    depatch::dataset::generate_synthetic_dataset(&eval_dir, 40, 160, 200).unwrap();
    let train_data = Dataset::load(&train_dir, Some(160)).unwrap();
    let eval_data = Dataset::load(&eval_dir, Some(160)).unwrap();
    let (det, _) = cached_toy_detector(&ToyTrainConfig::default()).unwrap();

    let tune = |mut c: ExperimentConfig| {
        c.train.placement.relative_width = 0.55;
        c.train.learning_rate = 0.05;
        c.train.mask_per_image = true;
        c.train.epochs = 300;
        c.train.transforms.rotation_deg = (-15.0, 15.0);
        c.train.transforms.noise = 0.08;
        c
    };
    let cfg = tune(pilot_config(42, &tmp.path().join("run")));
    let evaluator = Evaluator::from_config(&cfg, &det, &eval_data);

    for (name, strategy) in [("vanilla", Strategy::none()), ("depatch", Strategy::pds())] {
        let mut c = tune(pilot_config(42, &tmp.path().join(name)));
        c.train.strategy = strategy;
        let t0 = std::time::Instant::now();
        let out = PatchTrainer::new(&c, &det, &train_data).unwrap().run(None).unwrap();
        println!("{name} train in {:?}", t0.elapsed());
        for r in out.records.iter().step_by(60) {
            println!("  epoch {:>3} l_acc {:.4} evaded {}", r.epoch, r.l_acc, r.evaded_images);
        }
        let report = evaluator.evaluate(&out.patch).unwrap();
        let row: Vec<String> = report.columns.iter()
            .map(|c| format!("{} {:.3}", c.label, c.ap.unwrap()))
            .collect();
        println!("{name}: {}", row.join(" | "));
    }
}

#[test]
#[ignore]
fn pilot_comparison() {
    use depatch::evaluation::{baseline_comparison, TrainMaskMode};
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");
    depatch::dataset::generate_synthetic_dataset(&train_dir, 48, 160, 100).unwrap();
    depatch::dataset::generate_synthetic_dataset(&eval_dir, 40, 160, 200).unwrap();
    let train_data = Dataset::load(&train_dir, Some(160)).unwrap();
    let eval_data = Dataset::load(&eval_dir, Some(160)).unwrap();
    let (det, _) = cached_toy_detector(&ToyTrainConfig::default()).unwrap();

    let mut cfg = pilot_config(42, &tmp.path().join("cmp"));
    cfg.train.placement.relative_width = 0.55;
    cfg.train.learning_rate = 0.05;
    cfg.train.mask_per_image = true;
    cfg.train.epochs = 200;
    cfg.train.transforms.rotation_deg = (-15.0, 15.0);
    cfg.train.transforms.noise = 0.08;
    cfg.eval.columns = vec![
        EvalColumn::Eot,
        EvalColumn::Oc(0.1),
        EvalColumn::Oc(0.2),
        EvalColumn::Oc(0.3),
    ];

    let t0 = std::time::Instant::now();
    let rows = baseline_comparison(&cfg, &det, &train_data, &eval_data,
        &TrainMaskMode::standard_set()).unwrap();
    println!("comparison in {:?}", t0.elapsed());
    for row in &rows {
        let cols: Vec<String> = row.report.columns.iter()
            .map(|c| format!("{:.3}", c.ap.unwrap()))
            .collect();
        println!("{:<16} {} overall {:.3}", row.mode, cols.join(" "), row.report.overall.unwrap());
    }
}
