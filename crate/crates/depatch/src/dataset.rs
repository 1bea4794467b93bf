//! Dataset ingestion, the on-disk annotation layout, the seeded synthetic
//! scene generator, and import converters for common detection layouts.
//!
//! On disk a split is a directory with `images/` plus one `annotations.txt`
//! listing person boxes in normalized `(cx, cy, w, h)`:
//!
//! ```text
//! 0000.png 0.512 0.430 0.201 0.552
//! 0001.png 0.310 0.505 0.188 0.490
//! ```
//!
//! One line per box; an image with several persons repeats its filename.
//! Images with no line carry no person annotation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::detector::BBox;
use crate::error::{ensure_arg, Error, Result};
use crate::imagebuf::ImageBuf;

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const IMAGES_DIR: &str = "images";

/// One image with its labeled person boxes (pixel coordinates).
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub image: ImageBuf,
    pub person_boxes: Vec<BBox>,
}

/// A fully loaded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load a split directory, resizing every image (and rescaling its
    /// boxes) to `target_size` when given.
    pub fn load(dir: &Path, target_size: Option<usize>) -> Result<Self> {
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let images_dir = dir.join(IMAGES_DIR);
        ensure_arg!(
            ann_path.is_file() && images_dir.is_dir(),
            "dataset at {} must contain {IMAGES_DIR}/ and {ANNOTATIONS_FILE}",
            dir.display()
        );
        let text = std::fs::read_to_string(&ann_path)?;
        let mut boxes_by_name: BTreeMap<String, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = |detail: String| Error::Format {
                what: "annotations",
                path: ann_path.clone(),
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let name = it.next().ok_or_else(|| bad("missing filename".into()))?.to_string();
            let nums: Vec<f64> = it
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("bad number '{t}': {e}"))))
                .collect::<std::result::Result<_, _>>()?;
            if nums.len() != 4 {
                return Err(bad(format!("expected 4 numbers, got {}", nums.len())));
            }
            boxes_by_name.entry(name).or_default().push((nums[0], nums[1], nums[2], nums[3]));
        }

        let mut names: Vec<String> = std::fs::read_dir(&images_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        ensure_arg!(!names.is_empty(), "dataset at {} has no images", dir.display());

        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let mut image = ImageBuf::load_png(&images_dir.join(&name))?;
            if let Some(s) = target_size {
                image = image.resized(s, s)?;
            }
            let person_boxes = boxes_by_name
                .get(&name)
                .map(|bs| {
                    bs.iter()
                        .filter_map(|&(cx, cy, w, h)| {
                            BBox::from_normalized(cx, cy, w, h, image.width, image.height)
                                .ok()
                                .and_then(|b| b.clipped(image.width, image.height))
                        })
                        .collect()
                })
                .unwrap_or_default();
            entries.push(DatasetEntry { name, image, person_boxes });
        }
        Ok(Dataset { entries })
    }
}

/// Write a split directory from in-memory images and normalized boxes.
pub fn write_dataset(
    dir: &Path,
    items: &[(String, ImageBuf, Vec<(f64, f64, f64, f64)>)],
) -> Result<()> {
    let images_dir = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir)?;
    let mut ann = String::new();
    for (name, image, boxes) in items {
        image.save_png(&images_dir.join(name))?;
        for &(cx, cy, w, h) in boxes {
            ann.push_str(&format!("{name} {cx:.6} {cy:.6} {w:.6} {h:.6}\n"));
        }
    }
    std::fs::write(dir.join(ANNOTATIONS_FILE), ann)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// A labeled object in a generated scene.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub person: bool,
}

/// Knobs for the procedural scene compositor.
#[derive(Debug, Clone, Copy)]
pub struct SceneOptions {
    pub size: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    pub max_distractors: usize,
    /// Probability of pasting a benign random-content rectangle on a
    /// person's torso. Used while pretraining the detector so that an
    /// arbitrary (non-optimized) patch does not already break detection.
    pub benign_patch_prob: f64,
}

impl SceneOptions {
    pub fn new(size: usize) -> Self {
        SceneOptions { size, min_persons: 1, max_persons: 2, max_distractors: 2, benign_patch_prob: 0.0 }
    }

    pub fn with_benign_patches(mut self, prob: f64) -> Self {
        self.benign_patch_prob = prob;
        self
    }
}

/// Compose one scene: textured background, person glyphs, distractors.
pub fn generate_scene(opts: &SceneOptions, rng: &mut impl Rng) -> (ImageBuf, Vec<LabeledBox>) {
    let mut img = textured_background(opts.size, rng);
    let mut labels: Vec<LabeledBox> = Vec::new();

    let n_persons = rng.gen_range(opts.min_persons..=opts.max_persons);
    for _ in 0..n_persons {
        for _attempt in 0..20 {
            if let Some(bbox) = draw_person(&mut img, rng, opts.benign_patch_prob, &labels) {
                labels.push(LabeledBox { bbox, person: true });
                break;
            }
        }
    }
    let n_distractors = rng.gen_range(0..=opts.max_distractors);
    for _ in 0..n_distractors {
        if let Some(bbox) = draw_distractor(&mut img, rng, &labels) {
            labels.push(LabeledBox { bbox, person: false });
        }
    }
    (img, labels)
}

fn textured_background(s: usize, rng: &mut impl Rng) -> ImageBuf {
    // Smooth, muted color field: a coarse random grid upsampled bilinearly.
    let g = 5usize;
    let mut coarse = vec![0.0; 3 * g * g];
    for v in coarse.iter_mut() {
        *v = rng.gen_range(0.25..0.75);
    }
    let coords = (0..s * s).map(|i| {
        let y = (i / s) as f64 / s as f64 * (g - 1) as f64;
        let x = (i % s) as f64 / s as f64 * (g - 1) as f64;
        (x, y)
    });
    let taps = crate::autodiff::bilinear_taps(g, g, coords);
    let mut data = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        data.extend(crate::autodiff::apply_taps_plain(&coarse[c * g * g..(c + 1) * g * g], &taps));
    }
    for v in data.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    ImageBuf { width: s, height: s, data }
}

fn overlaps_any(bbox: &BBox, labels: &[LabeledBox]) -> bool {
    labels.iter().any(|l| crate::detector::iou(&l.bbox, bbox) > 0.05)
}

fn fill_rect(img: &mut ImageBuf, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f64; 3], rng: &mut impl Rng) {
    let (w, h) = (img.width, img.height);
    let xa = x0.max(0.0) as usize;
    let ya = y0.max(0.0) as usize;
    let xb = (x1.min(w as f64 - 1.0)).max(0.0) as usize;
    let yb = (y1.min(h as f64 - 1.0)).max(0.0) as usize;
    for y in ya..=yb {
        for x in xa..=xb {
            let mut px = rgb;
            for v in px.iter_mut() {
                *v = (*v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
            }
            img.set_pixel(x, y, px);
        }
    }
}

fn fill_circle(img: &mut ImageBuf, cx: f64, cy: f64, r: f64, rgb: [f64; 3], rng: &mut impl Rng) {
    let (w, h) = (img.width, img.height);
    let xa = ((cx - r).max(0.0)) as usize;
    let ya = ((cy - r).max(0.0)) as usize;
    let xb = ((cx + r).min(w as f64 - 1.0)).max(0.0) as usize;
    let yb = ((cy + r).min(h as f64 - 1.0)).max(0.0) as usize;
    for y in ya..=yb {
        for x in xa..=xb {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                let mut px = rgb;
                for v in px.iter_mut() {
                    *v = (*v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
                }
                img.set_pixel(x, y, px);
            }
        }
    }
}

fn saturated_color(rng: &mut impl Rng) -> [f64; 3] {
    let hi = rng.gen_range(0.6..1.0);
    let mid = rng.gen_range(0.05..0.45);
    let lo = rng.gen_range(0.0..0.25);
    let mut c = [hi, mid, lo];
    // Random channel permutation for hue variety.
    for i in (1..3).rev() {
        let j = rng.gen_range(0..=i);
        c.swap(i, j);
    }
    c
}

fn draw_person(
    img: &mut ImageBuf,
    rng: &mut impl Rng,
    benign_patch_prob: f64,
    existing: &[LabeledBox],
) -> Option<BBox> {
    let s = img.width as f64;
    let h = rng.gen_range(0.38..0.62) * s;
    let half_w = 0.27 * h;
    let cx = rng.gen_range(half_w + 1.0..s - half_w - 1.0);
    let top = rng.gen_range(1.0..(s - h - 1.0).max(2.0f64));
    let bbox = BBox::new(cx - half_w, top, cx + half_w, top + h).ok()?;
    if overlaps_any(&bbox, existing) {
        return None;
    }

    let skin = {
        let j: f64 = rng.gen_range(-0.08..0.08);
        [(0.87 + j).clamp(0.0, 1.0), (0.68 + j).clamp(0.0, 1.0), (0.52 + j).clamp(0.0, 1.0)]
    };
    let shirt = saturated_color(rng);
    let pants = {
        let v: f64 = rng.gen_range(0.05..0.3);
        [v, v, (v + rng.gen_range(0.0..0.1)).clamp(0.0, 1.0)]
    };

    // Head, torso, arms, legs.
    let head_r = 0.11 * h;
    fill_circle(img, cx, top + head_r, head_r, skin, rng);
    fill_rect(img, cx - 0.19 * h, top + 0.20 * h, cx + 0.19 * h, top + 0.55 * h, shirt, rng);
    fill_rect(img, cx - 0.27 * h, top + 0.22 * h, cx - 0.19 * h, top + 0.50 * h, shirt, rng);
    fill_rect(img, cx + 0.19 * h, top + 0.22 * h, cx + 0.27 * h, top + 0.50 * h, shirt, rng);
    fill_rect(img, cx - 0.16 * h, top + 0.55 * h, cx - 0.03 * h, top + h, pants, rng);
    fill_rect(img, cx + 0.03 * h, top + 0.55 * h, cx + 0.16 * h, top + h, pants, rng);

    if rng.gen::<f64>() < benign_patch_prob {
        // Random-content rectangle where an adversarial patch would sit.
        let side = rng.gen_range(0.22..0.5) * h;
        let py = top + 0.45 * h;
        let x0 = cx - side / 2.0;
        let y0 = py - side / 2.0;
        let solid = rng.gen::<f64>() < 0.5;
        let base = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0.max(0.0) as usize..=((y0 + side).min(s - 1.0)) as usize {
            for x in x0.max(0.0) as usize..=((x0 + side).min(s - 1.0)) as usize {
                let px = if solid { base } else { [rng.gen(), rng.gen(), rng.gen()] };
                img.set_pixel(x, y, px);
            }
        }
    }

    bbox.clipped(img.width, img.height)
}

fn draw_distractor(img: &mut ImageBuf, rng: &mut impl Rng, existing: &[LabeledBox]) -> Option<BBox> {
    let s = img.width as f64;
    let w = rng.gen_range(0.08..0.22) * s;
    let h = rng.gen_range(0.08..0.22) * s;
    let x0 = rng.gen_range(1.0..(s - w - 1.0));
    let y0 = rng.gen_range(1.0..(s - h - 1.0));
    let bbox = BBox::new(x0, y0, x0 + w, y0 + h).ok()?;
    if overlaps_any(&bbox, existing) {
        return None;
    }
    let color = saturated_color(rng);
    if rng.gen::<f64>() < 0.5 {
        fill_rect(img, x0, y0, x0 + w, y0 + h, color, rng);
    } else {
        fill_circle(img, x0 + w / 2.0, y0 + h / 2.0, w.min(h) / 2.0, color, rng);
    }
    Some(bbox)
}

/// Generate a synthetic split on disk; returns the number of images written.
pub fn generate_synthetic_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<usize> {
    ensure_arg!(count >= 1, "count must be positive");
    let streams = crate::rng::SeedStreams::new(seed);
    let opts = SceneOptions::new(size);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = streams.stream_indexed("synthetic-scene", i as u64);
        let (img, labels) = generate_scene(&opts, &mut rng);
        let boxes: Vec<(f64, f64, f64, f64)> = labels
            .iter()
            .filter(|l| l.person)
            .map(|l| l.bbox.to_normalized(size, size))
            .collect();
        items.push((format!("{i:04}.png"), img, boxes));
    }
    write_dataset(dir, &items)?;
    Ok(count)
}

// ---------------------------------------------------------------------------
// Import converters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportFormat {
    /// Per-image `labels/<stem>.txt` files with `class cx cy w h` lines.
    Yolo { person_class: usize },
    /// Single COCO-style JSON with images/annotations/categories.
    Coco,
}

impl ImportFormat {
    pub fn parse(name: &str, person_class: usize) -> Result<Self> {
        match name {
            "yolo" => Ok(ImportFormat::Yolo { person_class }),
            "coco" => Ok(ImportFormat::Coco),
            other => Err(Error::config(format!(
                "unknown dataset format '{other}'; supported: yolo, coco, synthetic"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct ImportStats {
    pub images: usize,
    pub person_boxes: usize,
    pub dropped_boxes: usize,
}

/// Convert a source layout into the normalized split layout, keeping only
/// person boxes.
pub fn import_dataset(src: &Path, format: ImportFormat, dst: &Path) -> Result<ImportStats> {
    match format {
        ImportFormat::Yolo { person_class } => import_yolo(src, person_class, dst),
        ImportFormat::Coco => import_coco(src, dst),
    }
}

fn import_yolo(src: &Path, person_class: usize, dst: &Path) -> Result<ImportStats> {
    let images = src.join("images");
    let labels = src.join("labels");
    ensure_arg!(images.is_dir(), "yolo layout requires {}/images/", src.display());
    let mut names: Vec<PathBuf> = std::fs::read_dir(&images)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    ensure_arg!(!names.is_empty(), "no images found under {}", images.display());

    let mut stats = ImportStats::default();
    let mut items = Vec::new();
    for path in names {
        let img = ImageBuf::load_png(&path)?;
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let label_path = labels.join(format!("{stem}.txt"));
        let mut boxes = Vec::new();
        if label_path.is_file() {
            for line in std::fs::read_to_string(&label_path)?.lines() {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 5 {
                    continue;
                }
                let parse_err = |e: String| Error::Format {
                    what: "yolo label",
                    path: label_path.clone(),
                    detail: e,
                };
                let class: usize =
                    toks[0].parse().map_err(|e| parse_err(format!("{e}")))?;
                let nums: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(format!("{e}")))?;
                if class == person_class {
                    boxes.push((nums[0], nums[1], nums[2], nums[3]));
                    stats.person_boxes += 1;
                } else {
                    stats.dropped_boxes += 1;
                }
            }
        }
        stats.images += 1;
        items.push((format!("{stem}.png"), img, boxes));
    }
    write_dataset(dst, &items)?;
    Ok(stats)
}

#[derive(serde::Deserialize)]
struct CocoRoot {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnn>,
    categories: Vec<CocoCat>,
}

#[derive(serde::Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(serde::Deserialize)]
struct CocoAnn {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(serde::Deserialize)]
struct CocoCat {
    id: i64,
    name: String,
}

fn import_coco(src: &Path, dst: &Path) -> Result<ImportStats> {
    let json_path = src.join("annotations.json");
    ensure_arg!(
        json_path.is_file(),
        "coco layout requires {}/annotations.json",
        src.display()
    );
    let root: CocoRoot =
        serde_json::from_str(&std::fs::read_to_string(&json_path)?).map_err(|e| Error::Format {
            what: "coco annotations",
            path: json_path.clone(),
            detail: e.to_string(),
        })?;
    let person_cat = root
        .categories
        .iter()
        .find(|c| c.name == "person")
        .map(|c| c.id)
        .ok_or_else(|| Error::config("no 'person' category in COCO annotations"))?;

    let mut stats = ImportStats::default();
    let mut items = Vec::new();
    for im in &root.images {
        let img = ImageBuf::load_png(&src.join("images").join(&im.file_name))?;
        let mut boxes = Vec::new();
        for ann in root.annotations.iter().filter(|a| a.image_id == im.id) {
            if ann.category_id != person_cat {
                stats.dropped_boxes += 1;
                continue;
            }
            let [x, y, w, h] = ann.bbox;
            let cx = (x + w / 2.0) / im.width as f64;
            let cy = (y + h / 2.0) / im.height as f64;
            boxes.push((cx, cy, w / im.width as f64, h / im.height as f64));
            stats.person_boxes += 1;
        }
        let stem = Path::new(&im.file_name).file_stem().unwrap().to_string_lossy().into_owned();
        items.push((format!("{stem}.png"), img, boxes));
        stats.images += 1;
    }
    write_dataset(dst, &items)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn scene_generation_labels_are_in_bounds() {
        let opts = SceneOptions::new(160);
        for seed in 0..5 {
            let mut rng = SeedStreams::new(seed).stream("scene-test");
            let (img, labels) = generate_scene(&opts, &mut rng);
            assert_eq!(img.width, 160);
            assert!(!labels.is_empty());
            for l in &labels {
                assert!(l.bbox.x1 >= 0.0 && l.bbox.x2 <= 160.0);
                assert!(l.bbox.y1 >= 0.0 && l.bbox.y2 <= 160.0);
            }
            assert!(labels.iter().any(|l| l.person));
        }
    }

    #[test]
    fn synthetic_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n = generate_synthetic_dataset(dir.path(), 4, 96, 11).unwrap();
        assert_eq!(n, 4);
        let ds = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(ds.entries.iter().all(|e| e.image.width == 96));
        assert!(ds.entries.iter().any(|e| !e.person_boxes.is_empty()));

        // Deterministic for a fixed seed.
        let dir2 = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir2.path(), 4, 96, 11).unwrap();
        let a = std::fs::read(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        let b = std::fs::read(dir2.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_resizes_and_rescales_boxes() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), 2, 128, 3).unwrap();
        let ds = Dataset::load(dir.path(), Some(64)).unwrap();
        for e in &ds.entries {
            assert_eq!(e.image.width, 64);
            for b in &e.person_boxes {
                assert!(b.x2 <= 64.0 && b.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn empty_dataset_dir_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::load(dir.path(), None).is_err());
    }

    #[test]
    fn yolo_import_filters_person_class() {
        let src = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(src.path().join("images")).unwrap();
        std::fs::create_dir_all(src.path().join("labels")).unwrap();
        let img = ImageBuf::zeros(32, 32);
        img.save_png(&src.path().join("images/a.png")).unwrap();
        std::fs::write(
            src.path().join("labels/a.txt"),
            "0 0.5 0.5 0.4 0.6\n2 0.2 0.2 0.1 0.1\n0 0.7 0.4 0.2 0.3\n",
        )
        .unwrap();
        let dst = tempfile::tempdir().unwrap();
        let stats =
            import_dataset(src.path(), ImportFormat::Yolo { person_class: 0 }, dst.path()).unwrap();
        assert_eq!(stats.images, 1);
        assert_eq!(stats.person_boxes, 2);
        assert_eq!(stats.dropped_boxes, 1);
        let ds = Dataset::load(dst.path(), None).unwrap();
        assert_eq!(ds.entries[0].person_boxes.len(), 2);
    }

    #[test]
    fn coco_import_keeps_only_persons() {
        let src = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(src.path().join("images")).unwrap();
        ImageBuf::zeros(40, 20).save_png(&src.path().join("images/x.png")).unwrap();
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "x.png", "width": 40, "height": 20}],
            "annotations": [
                {"image_id": 1, "category_id": 7, "bbox": [10.0, 5.0, 8.0, 10.0]},
                {"image_id": 1, "category_id": 3, "bbox": [0.0, 0.0, 4.0, 4.0]}
            ],
            "categories": [
                {"id": 7, "name": "person"},
                {"id": 3, "name": "dog"}
            ]
        });
        std::fs::write(src.path().join("annotations.json"), json.to_string()).unwrap();
        let dst = tempfile::tempdir().unwrap();
        let stats = import_dataset(src.path(), ImportFormat::Coco, dst.path()).unwrap();
        assert_eq!(stats.person_boxes, 1);
        assert_eq!(stats.dropped_boxes, 1);
        let ds = Dataset::load(dst.path(), None).unwrap();
        let b = ds.entries[0].person_boxes[0];
        assert!((b.x1 - 10.0).abs() < 1e-6 && (b.y1 - 5.0).abs() < 1e-6);
    }
}
