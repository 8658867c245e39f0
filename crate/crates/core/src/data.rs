//! Detection datasets: loading, letterboxing, augmentation and batching.
//!
//! Two on-disk layouts are understood, both with `train.txt` / `val.txt`
//! manifests listing image paths relative to the dataset root:
//!
//! * `yolo`: `classes.txt` (one name per line) and `labels/<stem>.txt` with
//!   lines `class cx cy w h`, normalised to [0, 1];
//! * `index`: a single `annotations.json` with `images`, `annotations` and
//!   `categories`, boxes as absolute `[x, y, w, h]`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Targets};
use crate::error::{Error, Result};

/// Gray level used for letterbox and augmentation padding.
pub const PAD_VALUE: u8 = 114;

/// Slack allowed when checking boxes against image bounds.
const BOUND_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Yolo,
    Index,
}

impl AnnotationFormat {
    /// `index` when `annotations.json` exists under `root`, else `yolo`.
    pub fn detect(root: &Path) -> Self {
        if root.join("annotations.json").is_file() {
            AnnotationFormat::Index
        } else {
            AnnotationFormat::Yolo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: PathBuf,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

impl ImageRecord {
    pub fn targets(&self) -> Targets {
        Targets {
            boxes: self.boxes.clone(),
            classes: self.classes.clone(),
        }
    }
}

/// Annotated images of one split plus the class-name table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` images.
    pub fn subset(&self, n: usize) -> Self {
        Self {
            class_names: self.class_names.clone(),
            images: self.images.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: GroundTruthSet,
    pub val: GroundTruthSet,
}

fn dataset_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Checks a box against the image and class table. `Ok(None)` means the box
/// is degenerate and should be dropped.
fn validate_box(
    b: BBox,
    class: usize,
    (w, h): (usize, usize),
    num_classes: usize,
    path: &Path,
    line: usize,
) -> Result<Option<BBox>> {
    if class >= num_classes {
        return Err(dataset_err(
            path,
            line,
            format!("class id {class} outside table of {num_classes}"),
        ));
    }
    let (wf, hf) = (w as f64, h as f64);
    let inside = b.x1 >= -BOUND_EPS
        && b.y1 >= -BOUND_EPS
        && b.x2 <= wf + BOUND_EPS * wf.max(1.0)
        && b.y2 <= hf + BOUND_EPS * hf.max(1.0);
    if !inside || !b.to_array().iter().all(|v| v.is_finite()) {
        return Err(dataset_err(
            path,
            line,
            format!("box {:?} outside {w}x{h} image", b.to_array()),
        ));
    }
    let b = b.clip(wf, hf);
    if !b.is_valid() {
        log::warn!("{}:{line}: dropping zero-area box", path.display());
        return Ok(None);
    }
    Ok(Some(b))
}

/// Parses one YOLO label file body for an image of `size` pixels.
pub fn parse_yolo_labels(
    text: &str,
    size: (usize, usize),
    num_classes: usize,
    path: &Path,
) -> Result<Targets> {
    let mut t = Targets::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(dataset_err(
                path,
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| dataset_err(path, line_no, format!("bad class id {:?}", fields[0])))?;
        let mut v = [0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| dataset_err(path, line_no, format!("bad number {f:?}")))?;
        }
        let (w, h) = (size.0 as f64, size.1 as f64);
        let b = BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h);
        if let Some(b) = validate_box(b, class, size, num_classes, path, line_no)? {
            t.boxes.push(b);
            t.classes.push(class);
        }
    }
    Ok(t)
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok((w as usize, h as usize))
}

fn load_yolo_split(root: &Path, manifest: &Path, class_names: &[String]) -> Result<GroundTruthSet> {
    let mut images = Vec::new();
    for (i, rel) in read_manifest(manifest)?.into_iter().enumerate() {
        let file = root.join(&rel);
        if !file.is_file() {
            return Err(dataset_err(manifest, i + 1, format!("missing image {rel}")));
        }
        let (w, h) = image_size(&file)?;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = root.join("labels").join(format!("{stem}.txt"));
        let t = if label.is_file() {
            parse_yolo_labels(&read_text(&label)?, (w, h), class_names.len(), &label)?
        } else {
            Targets::default()
        };
        images.push(ImageRecord {
            id: rel,
            file,
            width: w,
            height: h,
            boxes: t.boxes,
            classes: t.classes,
        });
    }
    Ok(GroundTruthSet {
        class_names: class_names.to_vec(),
        images,
    })
}

#[derive(Debug, Deserialize, Serialize)]
struct IndexImage {
    id: serde_json::Value,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct IndexAnnotation {
    image_id: serde_json::Value,
    bbox: [f64; 4],
    category_id: serde_json::Value,
}

#[derive(Debug, Deserialize, Serialize)]
struct IndexCategory {
    id: serde_json::Value,
    name: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct IndexFile {
    images: Vec<IndexImage>,
    annotations: Vec<IndexAnnotation>,
    categories: Vec<IndexCategory>,
}

fn key(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn load_index(root: &Path) -> Result<(Vec<String>, BTreeMap<String, ImageRecord>)> {
    let path = root.join("annotations.json");
    let index: IndexFile = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| dataset_err(&path, e.line(), e.to_string()))?;
    let class_names: Vec<String> = index.categories.iter().map(|c| c.name.clone()).collect();
    let cat_index: BTreeMap<String, usize> = index
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (key(&c.id), i))
        .collect();
    let mut by_id: BTreeMap<String, ImageRecord> = BTreeMap::new();
    let mut id_by_file = BTreeMap::new();
    for img in &index.images {
        let file = root.join(&img.file);
        by_id.insert(
            key(&img.id),
            ImageRecord {
                id: img.file.clone(),
                file,
                width: img.width,
                height: img.height,
                boxes: Vec::new(),
                classes: Vec::new(),
            },
        );
        id_by_file.insert(img.file.clone(), key(&img.id));
    }
    for (i, a) in index.annotations.iter().enumerate() {
        let rec = by_id.get_mut(&key(&a.image_id)).ok_or_else(|| {
            dataset_err(&path, i + 1, format!("annotation {i} refers to unknown image {}", a.image_id))
        })?;
        let class = *cat_index.get(&key(&a.category_id)).ok_or_else(|| {
            dataset_err(&path, i + 1, format!("annotation {i} has unknown category {}", a.category_id))
        })?;
        let [x, y, w, h] = a.bbox;
        let b = BBox::from_xywh(x, y, w, h);
        if let Some(b) = validate_box(b, class, (rec.width, rec.height), class_names.len(), &path, i + 1)? {
            rec.boxes.push(b);
            rec.classes.push(class);
        }
    }
    let by_file = id_by_file
        .into_iter()
        .map(|(file, id)| {
            let rec = by_id.remove(&id).expect("id registered above");
            (file, rec)
        })
        .collect();
    Ok((class_names, by_file))
}

fn load_index_split(
    manifest: &Path,
    class_names: &[String],
    by_file: &BTreeMap<String, ImageRecord>,
) -> Result<GroundTruthSet> {
    let mut images = Vec::new();
    for (i, rel) in read_manifest(manifest)?.into_iter().enumerate() {
        let rec = by_file
            .get(&rel)
            .ok_or_else(|| dataset_err(manifest, i + 1, format!("{rel} not in annotations.json")))?;
        if !rec.file.is_file() {
            return Err(dataset_err(manifest, i + 1, format!("missing image {rel}")));
        }
        images.push(rec.clone());
    }
    Ok(GroundTruthSet {
        class_names: class_names.to_vec(),
        images,
    })
}

/// Loads both splits of a dataset rooted at `root`.
pub fn load_dataset(root: &Path, format: Option<AnnotationFormat>) -> Result<Dataset> {
    let format = format.unwrap_or_else(|| AnnotationFormat::detect(root));
    let (train_m, val_m) = (root.join("train.txt"), root.join("val.txt"));
    let (train, val) = match format {
        AnnotationFormat::Yolo => {
            let classes_path = root.join("classes.txt");
            let class_names: Vec<String> = read_manifest(&classes_path)?;
            if class_names.is_empty() {
                return Err(dataset_err(&classes_path, 0, "empty class table"));
            }
            (
                load_yolo_split(root, &train_m, &class_names)?,
                load_yolo_split(root, &val_m, &class_names)?,
            )
        }
        AnnotationFormat::Index => {
            let (class_names, by_file) = load_index(root)?;
            (
                load_index_split(&train_m, &class_names, &by_file)?,
                load_index_split(&val_m, &class_names, &by_file)?,
            )
        }
    };
    let train_ids: HashSet<&str> = train.images.iter().map(|r| r.id.as_str()).collect();
    if let Some(shared) = val.images.iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(dataset_err(
            &val_m,
            0,
            format!("{} appears in both train and val manifests", shared.id),
        ));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        train,
        val,
    })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8())
}

/// Aspect-preserving resize plus symmetric padding: `x' = x·scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_left: f64,
    pub pad_top: f64,
}

impl LetterboxTransform {
    pub fn for_size(width: usize, height: usize, target: usize) -> Self {
        let scale = target as f64 / width.max(height) as f64;
        let (nw, nh) = scaled_dims(width, height, scale, target);
        Self {
            scale,
            pad_left: ((target - nw) / 2) as f64,
            pad_top: ((target - nh) / 2) as f64,
        }
    }

    pub fn apply(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_left,
            b.y1 * self.scale + self.pad_top,
            b.x2 * self.scale + self.pad_left,
            b.y2 * self.scale + self.pad_top,
        )
    }

    pub fn invert(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.pad_left) / self.scale,
            (b.y1 - self.pad_top) / self.scale,
            (b.x2 - self.pad_left) / self.scale,
            (b.y2 - self.pad_top) / self.scale,
        )
    }
}

fn scaled_dims(width: usize, height: usize, scale: f64, target: usize) -> (usize, usize) {
    let nw = ((width as f64 * scale).round() as usize).clamp(1, target);
    let nh = ((height as f64 * scale).round() as usize).clamp(1, target);
    (nw, nh)
}

/// Letterboxes an image to `target × target` and maps its boxes.
pub fn letterbox(image: &RgbImage, boxes: &[BBox], target: usize) -> (RgbImage, Vec<BBox>, LetterboxTransform) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let tf = LetterboxTransform::for_size(w, h, target);
    let (nw, nh) = scaled_dims(w, h, tf.scale, target);
    let mut canvas = RgbImage::from_pixel(target as u32, target as u32, Rgb([PAD_VALUE; 3]));
    let resized = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, nw as u32, nh as u32, imageops::FilterType::Triangle)
    };
    imageops::replace(&mut canvas, &resized, tf.pad_left as i64, tf.pad_top as i64);
    let boxes = boxes.iter().map(|b| tf.apply(b)).collect();
    (canvas, boxes, tf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Relative scale jitter, e.g. 0.1 for ±10 %.
    pub scale_jitter: f64,
    pub hsv_h: f64,
    pub hsv_s: f64,
    pub hsv_v: f64,
    pub mosaic: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_jitter: 0.1,
            hsv_h: 0.015,
            hsv_s: 0.4,
            hsv_v: 0.3,
            mosaic: false,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale_jitter: 0.0,
            hsv_h: 0.0,
            hsv_s: 0.0,
            hsv_v: 0.0,
            mosaic: false,
        }
    }
}

pub fn flip_boxes(boxes: &[BBox], width: f64) -> Vec<BBox> {
    boxes
        .iter()
        .map(|b| BBox::new(width - b.x2, b.y1, width - b.x1, b.y2))
        .collect()
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hsv_jitter(image: &mut RgbImage, gains: [f64; 3]) {
    for p in image.pixels_mut() {
        let rgb = p.0.map(|v| v as f64 / 255.0);
        let [h, s, v] = rgb_to_hsv(rgb);
        let out = hsv_to_rgb([h + gains[0], (s * gains[1]).clamp(0.0, 1.0), (v * gains[2]).clamp(0.0, 1.0)]);
        p.0 = out.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
}

/// Rescales the square canvas about its centre by `s`, keeping its size.
fn scale_about_center(image: &RgbImage, boxes: &[BBox], s: f64) -> (RgbImage, Vec<BBox>) {
    let size = image.width() as usize;
    let n = ((size as f64 * s).round() as usize).max(1);
    let resized = imageops::resize(image, n as u32, n as u32, imageops::FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(size as u32, size as u32, Rgb([PAD_VALUE; 3]));
    let off = (size as i64 - n as i64) / 2;
    imageops::replace(&mut canvas, &resized, off, off);
    let k = n as f64 / size as f64;
    let o = off as f64;
    let boxes = boxes
        .iter()
        .map(|b| BBox::new(b.x1 * k + o, b.y1 * k + o, b.x2 * k + o, b.y2 * k + o))
        .collect();
    (canvas, boxes)
}

/// Keeps boxes that stay at least 2 px wide and tall and keep 20 % of their
/// area after clipping.
fn clip_targets(t: &Targets, size: f64) -> Targets {
    let mut out = Targets::default();
    for (b, &c) in t.boxes.iter().zip(&t.classes) {
        let clipped = b.clip(size, size);
        if clipped.width() >= 2.0 && clipped.height() >= 2.0 && clipped.area() >= 0.2 * b.area() {
            out.boxes.push(clipped);
            out.classes.push(c);
        }
    }
    out
}

/// Applies the policy to a square canvas and its targets.
pub fn augment(image: &RgbImage, targets: &Targets, policy: &AugmentPolicy, rng: &mut impl Rng) -> (RgbImage, Targets) {
    let size = image.width() as f64;
    let mut img = image.clone();
    let mut t = targets.clone();
    if policy.scale_jitter > 0.0 {
        let s = 1.0 + rng.random_range(-policy.scale_jitter..=policy.scale_jitter);
        let (i, b) = scale_about_center(&img, &t.boxes, s);
        img = i;
        t = clip_targets(&Targets { boxes: b, classes: t.classes }, size);
    }
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob.clamp(0.0, 1.0)) {
        imageops::flip_horizontal_in_place(&mut img);
        t.boxes = flip_boxes(&t.boxes, size);
    }
    if policy.hsv_h > 0.0 || policy.hsv_s > 0.0 || policy.hsv_v > 0.0 {
        let mut gain = |g: f64| if g > 0.0 { rng.random_range(-g..=g) } else { 0.0 };
        let gains = [gain(policy.hsv_h), 1.0 + gain(policy.hsv_s), 1.0 + gain(policy.hsv_v)];
        hsv_jitter(&mut img, gains);
    }
    (img, t)
}

/// Tiles four square canvases into one of the same size (2×2 at half scale).
pub fn mosaic(parts: [(&RgbImage, &Targets); 4]) -> (RgbImage, Targets) {
    let size = parts[0].0.width();
    let half = size / 2;
    let mut canvas = RgbImage::from_pixel(size, size, Rgb([PAD_VALUE; 3]));
    let mut out = Targets::default();
    for (i, (img, t)) in parts.into_iter().enumerate() {
        let small = imageops::resize(img, half, half, imageops::FilterType::Triangle);
        let (ox, oy) = ((i as u32 % 2) * half, (i as u32 / 2) * half);
        imageops::replace(&mut canvas, &small, ox as i64, oy as i64);
        let k = half as f64 / img.width() as f64;
        for (b, &c) in t.boxes.iter().zip(&t.classes) {
            let nb = BBox::new(b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k).translate(ox as f64, oy as f64);
            if nb.width() >= 2.0 && nb.height() >= 2.0 {
                out.boxes.push(nb);
                out.classes.push(c);
            }
        }
    }
    (canvas, out)
}

/// RGB image → (3, h, w) f32 tensor in [0, 1].
pub fn image_to_tensor(image: &RgbImage) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// One letterboxed image with its targets in canvas pixels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub image: RgbImage,
    pub targets: Targets,
    pub transform: LetterboxTransform,
}

pub fn prepare_sample(set: &GroundTruthSet, index: usize, size: usize) -> Result<Sample> {
    let rec = &set.images[index];
    let img = load_image(&rec.file)?;
    let (image, boxes, transform) = letterbox(&img, &rec.boxes, size);
    Ok(Sample {
        index,
        image,
        targets: Targets {
            boxes,
            classes: rec.classes.clone(),
        },
        transform,
    })
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// (b, 3, size, size) in [0, 1].
    pub images: Tensor,
    pub targets: Vec<Targets>,
    pub indices: Vec<usize>,
    pub transforms: Vec<LetterboxTransform>,
}

/// Shuffling, augmenting batch assembler over an in-memory letterboxed cache.
pub struct Loader {
    samples: Vec<Sample>,
    batch_size: usize,
    policy: AugmentPolicy,
    seed: u64,
}

impl Loader {
    pub fn new(set: &GroundTruthSet, size: usize, batch_size: usize, policy: AugmentPolicy, seed: u64) -> Result<Self> {
        let samples = (0..set.len())
            .map(|i| prepare_sample(set, i, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            batch_size: batch_size.max(1),
            policy,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Batches of one epoch; order and augmentation depend only on
    /// `(seed, epoch)`. `train = false` keeps order and skips augmentation.
    pub fn epoch(&self, epoch: usize, train: bool) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if train {
            order.shuffle(&mut rng);
        }
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut images = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let s = &self.samples[i];
                    let (img, t) = if !train {
                        (s.image.clone(), s.targets.clone())
                    } else if self.policy.mosaic && rng.random_bool(0.5) {
                        let n = self.samples.len();
                        let others: Vec<&Sample> =
                            (0..3).map(|_| &self.samples[rng.random_range(0..n)]).collect();
                        let (m, mt) = mosaic([
                            (&s.image, &s.targets),
                            (&others[0].image, &others[0].targets),
                            (&others[1].image, &others[1].targets),
                            (&others[2].image, &others[2].targets),
                        ]);
                        let p = AugmentPolicy {
                            scale_jitter: 0.0,
                            ..self.policy.clone()
                        };
                        augment(&m, &mt, &p, &mut rng)
                    } else {
                        augment(&s.image, &s.targets, &self.policy, &mut rng)
                    };
                    images.push(image_to_tensor(&img)?);
                    targets.push(t);
                }
                Ok(Batch {
                    images: Tensor::stack(&images, 0)?,
                    targets,
                    indices: chunk.to_vec(),
                    transforms: chunk.iter().map(|&i| self.samples[i].transform).collect(),
                })
            })
            .collect()
    }
}
