//! Inference on image files: annotated copies plus JSON detection records.

use std::path::{Path, PathBuf};

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection};
use crate::data::{image_to_tensor, letterbox, load_image};
use crate::error::{Error, Result};
use crate::eval::{predict, EvalConfig};
use crate::network::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub class_id: usize,
    pub class_name: String,
    pub score: f64,
    /// x1, y1, x2, y2 in original image pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<DetectionEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

const PALETTE: [[u8; 3]; 6] = [
    [255, 56, 56],
    [56, 120, 255],
    [40, 200, 90],
    [255, 160, 30],
    [190, 70, 230],
    [0, 200, 200],
];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    Rgb(PALETTE[class_id % PALETTE.len()])
}

/// Detections of one image, in its own pixel coordinates.
pub fn detect_image(model: &Model, image: &RgbImage, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let size = model.config().input_size;
    let (canvas, _, tf) = letterbox(image, &[], size);
    let x = image_to_tensor(&canvas)?.unsqueeze(0)?;
    let dims = (image.width() as usize, image.height() as usize);
    Ok(predict(model, &x, &[tf], &[dims], cfg)?.remove(0))
}

fn draw_rect(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = b.x1.round() as i64;
    let y1 = b.y1.round() as i64;
    let x2 = (b.x2.round() as i64 - 1).max(x1);
    let y2 = (b.y2.round() as i64 - 1).max(y1);
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..thickness as i64 {
        for x in x1..=x2 {
            put(x, y1 + t);
            put(x, y2 - t);
        }
        for y in y1..=y2 {
            put(x1 + t, y);
            put(x2 - t, y);
        }
    }
}

/// Draws `text` with an 8×8 bitmap font on a filled background.
pub fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str, bg: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let width = 8 * text.chars().count() as i64 + 2;
    for yy in y..y + 10 {
        for xx in x..x + width {
            if xx >= 0 && yy >= 0 && xx < w && yy < h {
                img.put_pixel(xx as u32, yy as u32, bg);
            }
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
            continue;
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                let px = x + 1 + 8 * i as i64 + col;
                let py = y + 1 + row as i64;
                if px >= 0 && py >= 0 && px < w && py < h {
                    img.put_pixel(px as u32, py as u32, Rgb([255, 255, 255]));
                }
            }
        }
    }
}

/// Copy of `image` with boxes, class names and confidences drawn on it.
pub fn render(image: &RgbImage, dets: &[Detection], class_names: &[String]) -> RgbImage {
    let mut out = image.clone();
    let thickness = (image.width().max(image.height()) / 320).max(1);
    for d in dets {
        let color = class_color(d.class_id);
        draw_rect(&mut out, &d.bbox, color, thickness);
        let name = class_names
            .get(d.class_id)
            .cloned()
            .unwrap_or_else(|| d.class_id.to_string());
        let label = format!("{name} {:.2}", d.score);
        let ly = if d.bbox.y1 >= 10.0 { d.bbox.y1 as i64 - 10 } else { d.bbox.y1 as i64 };
        draw_label(&mut out, d.bbox.x1 as i64, ly, &label, color);
    }
    out
}

pub fn to_record(image: &str, dims: (usize, usize), dets: &[Detection], class_names: &[String]) -> DetectionRecord {
    DetectionRecord {
        image: image.to_string(),
        width: dims.0,
        height: dims.1,
        detections: dets
            .iter()
            .map(|d| DetectionEntry {
                class_id: d.class_id,
                class_name: class_names.get(d.class_id).cloned().unwrap_or_default(),
                score: d.score,
                bbox: d.bbox.to_array(),
            })
            .collect(),
        error: None,
    }
}

/// Runs detection on every path, writing `<stem>.png` overlays and one
/// `detections.jsonl` line per input under `out_dir`. Unreadable images
/// produce a record with `error` set and do not stop the run.
pub fn detect_files(
    model: &Model,
    class_names: &[String],
    paths: &[PathBuf],
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<DetectionRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.display().to_string();
        let record = match load_image(path) {
            Ok(img) => {
                let dets = detect_image(model, &img, cfg)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                let out = out_dir.join(format!("{stem}.png"));
                render(&img, &dets, class_names)
                    .save(&out)
                    .map_err(|e| Error::Image { path: out.clone(), source: e })?;
                to_record(&name, (img.width() as usize, img.height() as usize), &dets, class_names)
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                DetectionRecord {
                    image: name,
                    width: 0,
                    height: 0,
                    detections: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        records.push(record);
    }
    let body: String = records
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let jsonl = out_dir.join("detections.jsonl");
    std::fs::write(&jsonl, body).map_err(|e| Error::io(&jsonl, e))?;
    Ok(records)
}
