//! Command-line entry points tying the toolkit into reproducible
//! experiments: `train`, `eval`, `compare`, `sweep`, `import`, `plot`, and
//! `detector-train`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depatch::config::{EvalColumn, ExperimentConfig};
use depatch::dataset::{self, Dataset};
use depatch::detector::{train as toy_train, DetectorAdapter};
use depatch::error::Error;
use depatch::evaluation::{self, Evaluator, TrainMaskMode};
use depatch::patch::Patch;
use depatch::scheduler::{RatioPolicy, Strategy, StrategyMode};
use depatch::trainer::PatchTrainer;

#[derive(Parser)]
#[command(name = "depatch", version, about = "Decoupled adversarial patch toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a patch per the experiment config.
    Train(TrainArgs),
    /// Evaluate a patch with the digital protocol columns.
    Eval(EvalArgs),
    /// Train one patch per masking strategy and emit the comparison table.
    Compare(CompareArgs),
    /// Occlusion degradation curve for a patch.
    Sweep(SweepArgs),
    /// Convert or generate datasets in the normalized layout.
    Import(ImportArgs),
    /// Render a CSV curve as an SVG line plot.
    Plot(PlotArgs),
    /// Pretrain the bundled toy detector on synthetic scenes.
    DetectorTrain(DetectorTrainArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from the most recent checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Experiment preset adjusting strategy and objective switches.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
}

#[derive(Clone, Copy, Debug)]
enum Preset {
    Vanilla,
    VarB,
    VarC,
    VarD,
    Depatch,
    DepatchTc,
    Sn2,
    Sn4,
    Sn6,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Ok(match s {
        "vanilla" => Preset::Vanilla,
        "var-b" => Preset::VarB,
        "var-c" => Preset::VarC,
        "var-d" => Preset::VarD,
        "depatch" => Preset::Depatch,
        "depatch-tc" => Preset::DepatchTc,
        "sn2" => Preset::Sn2,
        "sn4" => Preset::Sn4,
        "sn6" => Preset::Sn6,
        other => {
            return Err(format!(
                "unknown preset '{other}' (vanilla, var-b, var-c, var-d, depatch, depatch-tc, sn2, sn4, sn6)"
            ))
        }
    })
}

fn apply_preset(cfg: &mut ExperimentConfig, preset: Preset) {
    let t = &mut cfg.train;
    match preset {
        // Vanilla baseline: no decoupling, prior max-objectness criterion.
        Preset::Vanilla => {
            t.strategy = Strategy::none();
            t.weights.w = 0.0;
            t.tc_training = false;
        }
        // Decoupling with PDS and border shift, prior criterion.
        Preset::VarB => {
            t.strategy = Strategy::pds();
            t.border_shift = true;
            t.weights.w = 0.0;
        }
        // Accuracy score and PDS, no border shift.
        Preset::VarC => {
            t.strategy = Strategy::pds();
            t.border_shift = false;
        }
        // Accuracy score and border shift, fixed mid-granularity decoupling.
        Preset::VarD => {
            t.strategy = Strategy {
                mode: StrategyMode::FixedN { n: 4 },
                r_policy: RatioPolicy::Fixed { r: 0.35 },
                stage_table: None,
            };
            t.border_shift = true;
        }
        Preset::Depatch => {
            t.strategy = Strategy::pds();
            t.border_shift = true;
            t.tc_training = false;
        }
        Preset::DepatchTc => {
            t.strategy = Strategy::pds();
            t.border_shift = true;
            t.tc_training = true;
        }
        Preset::Sn2 => t.strategy = Strategy::fixed_n(2),
        Preset::Sn4 => t.strategy = Strategy::fixed_n(4),
        Preset::Sn6 => t.strategy = Strategy::fixed_n(6),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Patch PNG to evaluate.
    #[arg(long)]
    patch: PathBuf,
    /// Comma-separated column override, e.g. `original,eot,oc:0.1,jpeg`.
    #[arg(long)]
    columns: Option<String>,
    /// Worker threads for evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    patch: PathBuf,
    /// Comma-separated ascending occlusion ratios.
    #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5")]
    ratios: String,
}

#[derive(Args)]
struct ImportArgs {
    /// Source layout: yolo, coco, or synthetic (generated, no source dir).
    #[arg(long)]
    format: String,
    /// Source directory (yolo/coco formats).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Destination split directory.
    #[arg(long)]
    dst: PathBuf,
    /// Person class id for the yolo format.
    #[arg(long, default_value_t = 0)]
    person_class: usize,
    /// Image count for the synthetic generator.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Image side for the synthetic generator.
    #[arg(long, default_value_t = 160)]
    size: usize,
    /// Seed for the synthetic generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Input CSV with a header line and `x,y` rows.
    #[arg(long)]
    input: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "degradation sweep")]
    title: String,
    #[arg(long, default_value = "occlusion ratio")]
    x_label: String,
    #[arg(long, default_value = "AP")]
    y_label: String,
}

#[derive(Args)]
struct DetectorTrainArgs {
    /// Output checkpoint path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 160)]
    input_size: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<Error>()
                .map_or(1u8, |e| match e {
                    Error::Config(_) | Error::InvalidArgument(_) => 2,
                    _ => 1,
                });
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Import(args) => cmd_import(args),
        Command::Plot(args) => cmd_plot(args),
        Command::DetectorTrain(args) => cmd_detector_train(args),
    }
}

/// Load the configured detector, pretraining and caching the toy detector
/// when no checkpoint is configured.
fn load_detector(cfg: &ExperimentConfig) -> anyhow::Result<Box<dyn DetectorAdapter>> {
    match (&cfg.detector.adapter[..], &cfg.detector.checkpoint) {
        ("toy", None) => {
            let (det, path) = toy_train::cached_toy_detector(&toy_train::ToyTrainConfig::default())?;
            eprintln!("using cached toy detector at {}", path.display());
            Ok(Box::new(det))
        }
        (name, ckpt) => Ok(depatch::detector::load_adapter(name, ckpt.as_deref())?),
    }
}

fn load_split(cfg: &ExperimentConfig, dir: &Path, what: &str) -> anyhow::Result<Dataset> {
    if dir.as_os_str().is_empty() {
        return Err(Error::config(format!("dataset.{what} is not set")).into());
    }
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "dataset.{what} does not exist: {}",
            dir.display()
        ))
        .into());
    }
    let _ = cfg;
    Ok(Dataset::load(dir, None)?)
}

fn resized_for(detector: &dyn DetectorAdapter, data: Dataset) -> anyhow::Result<Dataset> {
    let (w, _) = detector.input_size();
    let mut entries = Vec::with_capacity(data.entries.len());
    for mut e in data.entries {
        if e.image.width != w {
            let scale_x = w as f64 / e.image.width as f64;
            let scale_y = w as f64 / e.image.height as f64;
            e.image = e.image.resized(w, w)?;
            for b in e.person_boxes.iter_mut() {
                b.x1 *= scale_x;
                b.x2 *= scale_x;
                b.y1 *= scale_y;
                b.y2 *= scale_y;
            }
        }
        entries.push(e);
    }
    Ok(Dataset { entries })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(preset) = args.preset {
        apply_preset(&mut cfg, preset);
    }
    cfg.validate()?;
    let detector = load_detector(&cfg)?;
    let data = resized_for(detector.as_ref(), load_split(&cfg, &cfg.dataset.train_dir, "train_dir")?)?;

    let resume_path = if args.resume { latest_checkpoint(&cfg.output_dir) } else { None };
    let trainer = PatchTrainer::new(&cfg, detector.as_ref(), &data)?;
    let out = trainer.run(resume_path.as_deref())?;
    println!(
        "trained {} epochs; patch: {}; manifest: {}",
        out.epochs_run,
        out.patch_path.display(),
        out.manifest_path.display()
    );
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "dptf")
                && p.file_stem().is_some_and(|s| s.to_string_lossy().starts_with("ckpt_"))
                && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("final"))
        })
        .collect();
    ckpts.sort();
    ckpts.pop()
}

fn parse_columns(text: &str) -> anyhow::Result<Vec<EvalColumn>> {
    let mut cols = Vec::new();
    for tok in text.split(',') {
        let tok = tok.trim();
        let col = match tok {
            "original" => EvalColumn::Original,
            "eot" => EvalColumn::Eot,
            "tc_mean" => EvalColumn::TcMean,
            "jpeg" => EvalColumn::Jpeg,
            other => match other.strip_prefix("oc:") {
                Some(r) => EvalColumn::Oc(r.parse().map_err(|e| {
                    Error::config(format!("bad occlusion ratio '{r}': {e}"))
                })?),
                None => return Err(Error::config(format!("unknown column '{other}'")).into()),
            },
        };
        cols.push(col);
    }
    Ok(cols)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(cols) = &args.columns {
        cfg.eval.columns = parse_columns(cols)?;
    }
    if let Some(jobs) = args.jobs {
        cfg.eval.jobs = jobs.max(1);
    }
    cfg.validate()?;
    let patch = Patch::load_png(&args.patch)?;
    let detector = load_detector(&cfg)?;
    let data = resized_for(detector.as_ref(), load_split(&cfg, &cfg.dataset.eval_dir, "eval_dir")?)?;

    let evaluator = Evaluator::from_config(&cfg, detector.as_ref(), &data);
    let report = evaluator.evaluate(&patch)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    report.write_csv(&cfg.output_dir.join("report.csv"))?;
    report.write_json(&cfg.output_dir.join("report.json"))?;
    for c in &report.columns {
        println!("{:<12} AP {}", c.label, c.ap.map_or("n/a".into(), |v| format!("{v:.4}")));
    }
    println!(
        "{:<12} AP {}",
        "overall",
        report.overall.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let cfg = args.common.load()?;
    cfg.validate()?;
    let detector = load_detector(&cfg)?;
    let train_data =
        resized_for(detector.as_ref(), load_split(&cfg, &cfg.dataset.train_dir, "train_dir")?)?;
    let eval_data =
        resized_for(detector.as_ref(), load_split(&cfg, &cfg.dataset.eval_dir, "eval_dir")?)?;

    let rows = evaluation::baseline_comparison(
        &cfg,
        detector.as_ref(),
        &train_data,
        &eval_data,
        &TrainMaskMode::standard_set(),
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let table = cfg.output_dir.join("comparison.csv");
    evaluation::write_comparison_csv(&rows, &table)?;
    for row in &rows {
        println!(
            "{:<16} overall AP {}",
            row.mode,
            row.report.overall.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    println!("table: {}", table.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let cfg = args.common.load()?;
    cfg.validate()?;
    let ratios: Vec<f64> = args
        .ratios
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::config(format!("bad ratio: {e}"))))
        .collect::<Result<_, _>>()?;
    let patch = Patch::load_png(&args.patch)?;
    let detector = load_detector(&cfg)?;
    let data = resized_for(detector.as_ref(), load_split(&cfg, &cfg.dataset.eval_dir, "eval_dir")?)?;
    let evaluator = Evaluator::from_config(&cfg, detector.as_ref(), &data);
    let curve = evaluator.degradation_sweep(&patch, &ratios)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("sweep.csv");
    evaluation::write_sweep_csv(&curve, &csv)?;
    let svg = cfg.output_dir.join("sweep.svg");
    depatch::plot::render_line_chart(
        "occlusion degradation",
        "occlusion ratio",
        "AP",
        &[depatch::plot::Series { label: "patch".into(), points: curve.clone() }],
        &svg,
    )?;
    for (r, ap) in &curve {
        println!("oc({r}) AP {ap:.4}");
    }
    println!("csv: {}; plot: {}", csv.display(), svg.display());
    Ok(())
}

fn cmd_import(args: ImportArgs) -> anyhow::Result<()> {
    match args.format.as_str() {
        "synthetic" => {
            let n = dataset::generate_synthetic_dataset(&args.dst, args.count, args.size, args.seed)?;
            println!("generated {n} synthetic images under {}", args.dst.display());
        }
        other => {
            let src = args
                .src
                .as_deref()
                .ok_or_else(|| Error::config(format!("--src is required for format '{other}'")))?;
            let format = dataset::ImportFormat::parse(other, args.person_class)?;
            let stats = dataset::import_dataset(src, format, &args.dst)?;
            println!(
                "imported {} images, {} person boxes ({} non-person boxes dropped)",
                stats.images, stats.person_boxes, stats.dropped_boxes
            );
        }
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.input)?;
    let points = depatch::plot::parse_xy_csv(&text)?;
    depatch::plot::render_line_chart(
        &args.title,
        &args.x_label,
        &args.y_label,
        &[depatch::plot::Series { label: args.input.display().to_string(), points }],
        &args.output,
    )?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_detector_train(args: DetectorTrainArgs) -> anyhow::Result<()> {
    let mut cfg = toy_train::ToyTrainConfig { input_size: args.input_size, ..Default::default() };
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (det, tail_loss) = toy_train::train_toy_detector(&cfg)?;
    det.save(&args.output)?;
    println!(
        "trained toy detector ({} steps, tail loss {tail_loss:.4}); saved to {}",
        cfg.steps,
        args.output.display()
    );
    Ok(())
}
