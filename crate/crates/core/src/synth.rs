//! Procedurally generated stand-ins for small medical detection datasets,
//! written in the same on-disk layouts the loader reads.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::BBox;
use crate::data::AnnotationFormat;
use crate::error::{Error, Result};

/// Appearance of one object class: ellipse radius range and colour.
#[derive(Debug, Clone)]
pub struct ObjectStyle {
    pub name: String,
    pub radius: (f64, f64),
    pub color: [u8; 3],
    /// Lighter core as a fraction of the radius (0 = solid).
    pub core: f64,
    /// Relative sampling weight.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub width: u32,
    pub height: u32,
    pub objects: (usize, usize),
    pub background: [u8; 3],
    pub noise: f64,
    pub styles: Vec<ObjectStyle>,
}

impl SynthSpec {
    /// Blood-smear-like images: red cells, white cells and platelets,
    /// 292 training and 72 validation images.
    pub fn blood_cells() -> Self {
        Self {
            train: 292,
            val: 72,
            width: 320,
            height: 240,
            objects: (3, 7),
            background: [236, 214, 206],
            noise: 6.0,
            styles: vec![
                ObjectStyle {
                    name: "RBC".into(),
                    radius: (18.0, 26.0),
                    color: [206, 96, 102],
                    core: 0.45,
                    weight: 0.6,
                },
                ObjectStyle {
                    name: "WBC".into(),
                    radius: (28.0, 38.0),
                    color: [96, 60, 150],
                    core: 0.0,
                    weight: 0.2,
                },
                ObjectStyle {
                    name: "Platelets".into(),
                    radius: (7.0, 10.0),
                    color: [120, 70, 140],
                    core: 0.0,
                    weight: 0.2,
                },
            ],
        }
    }

    /// Brain-MRI-like grayscale images with one bright lesion each,
    /// 500 training and 201 validation images.
    pub fn brain_tumor() -> Self {
        Self {
            train: 500,
            val: 201,
            width: 256,
            height: 256,
            objects: (1, 1),
            background: [40, 40, 40],
            noise: 10.0,
            styles: vec![ObjectStyle {
                name: "tumor".into(),
                radius: (16.0, 40.0),
                color: [215, 215, 215],
                core: 0.0,
                weight: 1.0,
            }],
        }
    }

    pub fn with_counts(mut self, train: usize, val: usize) -> Self {
        self.train = train;
        self.val = val;
        self
    }

    pub fn class_names(&self) -> Vec<String> {
        self.styles.iter().map(|s| s.name.clone()).collect()
    }
}

/// One rendered image and its boxes.
pub fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<BBox>, Vec<usize>) {
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::new(w, h);
    for p in img.pixels_mut() {
        let n = rng.random_range(-spec.noise..=spec.noise);
        p.0 = spec.background.map(|c| (c as f64 + n).clamp(0.0, 255.0) as u8);
    }
    let total_w: f64 = spec.styles.iter().map(|s| s.weight).sum();
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut classes = Vec::new();
    for _ in 0..count {
        let mut pick = rng.random_range(0.0..total_w);
        let class = spec
            .styles
            .iter()
            .position(|s| {
                pick -= s.weight;
                pick < 0.0
            })
            .unwrap_or(0);
        let style = &spec.styles[class];
        for _attempt in 0..30 {
            let rx = rng.random_range(style.radius.0..=style.radius.1);
            let ry = rx * rng.random_range(0.8..=1.2);
            let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
            let b = BBox::new(cx - rx, cy - ry, cx + rx, cy + ry);
            if boxes.iter().any(|o| o.iou(&b) > 0.0) {
                continue;
            }
            let x0 = b.x1.floor().max(0.0) as u32;
            let y0 = b.y1.floor().max(0.0) as u32;
            let x1 = (b.x2.ceil() as u32).min(w - 1);
            let y1 = (b.y2.ceil() as u32).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let r = (dx * dx + dy * dy).sqrt();
                    if r > 1.0 {
                        continue;
                    }
                    let light = if style.core > 0.0 && r < style.core { 0.35 } else { 0.0 };
                    let n = rng.random_range(-spec.noise..=spec.noise);
                    let c = style.color.map(|v| {
                        let v = v as f64 + (255.0 - v as f64) * light + n;
                        v.clamp(0.0, 255.0) as u8
                    });
                    img.put_pixel(x, y, Rgb(c));
                }
            }
            boxes.push(b);
            classes.push(class);
            break;
        }
    }
    (img, boxes, classes)
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct IndexImage<'a> {
    id: usize,
    file: &'a str,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct IndexAnnotation {
    image_id: usize,
    bbox: [f64; 4],
    category_id: usize,
}

#[derive(Serialize)]
struct IndexCategory<'a> {
    id: usize,
    name: &'a str,
}

/// Writes `spec.train + spec.val` images under `root` in the given layout.
pub fn write_dataset(root: &Path, spec: &SynthSpec, format: AnnotationFormat, seed: u64) -> Result<()> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    if format == AnnotationFormat::Yolo {
        std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train + spec.val;
    let mut files = Vec::with_capacity(total);
    let mut index_images = Vec::new();
    let mut index_anns = Vec::new();
    for i in 0..total {
        let (img, boxes, classes) = render(spec, &mut rng);
        let rel = format!("images/{i:05}.png");
        let path = root.join(&rel);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        match format {
            AnnotationFormat::Yolo => {
                let (w, h) = (spec.width as f64, spec.height as f64);
                let body: String = boxes
                    .iter()
                    .zip(&classes)
                    .map(|(b, c)| {
                        let (cx, cy) = b.center();
                        format!("{c} {:.6} {:.6} {:.6} {:.6}\n", cx / w, cy / h, b.width() / w, b.height() / h)
                    })
                    .collect();
                write(&labels_dir.join(format!("{i:05}.txt")), &body)?;
            }
            AnnotationFormat::Index => {
                for (b, &c) in boxes.iter().zip(&classes) {
                    index_anns.push(IndexAnnotation {
                        image_id: i,
                        bbox: [b.x1, b.y1, b.width(), b.height()],
                        category_id: c + 1,
                    });
                }
            }
        }
        files.push(rel);
    }
    if format == AnnotationFormat::Index {
        for (i, f) in files.iter().enumerate() {
            index_images.push(IndexImage {
                id: i,
                file: f,
                width: spec.width,
                height: spec.height,
            });
        }
        let names = spec.class_names();
        let cats: Vec<IndexCategory> = names
            .iter()
            .enumerate()
            .map(|(i, n)| IndexCategory { id: i + 1, name: n })
            .collect();
        let body = serde_json::json!({
            "images": index_images,
            "annotations": index_anns,
            "categories": cats,
        });
        write(&root.join("annotations.json"), &body.to_string())?;
    } else {
        write(&root.join("classes.txt"), &(spec.class_names().join("\n") + "\n"))?;
    }
    write(&root.join("train.txt"), &(files[..spec.train].join("\n") + "\n"))?;
    write(&root.join("val.txt"), &(files[spec.train..].join("\n") + "\n"))?;
    Ok(())
}
