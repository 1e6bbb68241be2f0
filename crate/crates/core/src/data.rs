//! Data model and persistence: grounding records (line-delimited JSON),
//! deterministic dataset splitting, resizing, and image/mask files.

use crate::error::{Error, Result};
use crate::types::{ImageTensor, PseudoMask};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One box/phrase pair inside a grounding record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// `[x1, y1, x2, y2]` in absolute pixels.
    pub bbox: [f64; 4],
    pub phrase: String,
}

/// A grounding record aligning an image with phrase-labelled boxes.
/// Serialized as one JSON object per line with this exact field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub text: String,
    pub regions: Vec<Region>,
}

impl GroundingRecord {
    pub fn validate(&self, line: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::parse(line, "width/height", "must be positive"));
        }
        for (i, region) in self.regions.iter().enumerate() {
            let [x1, y1, x2, y2] = region.bbox;
            let field = format!("regions[{i}].bbox");
            if !(x1 < x2 && y1 < y2) {
                return Err(Error::parse(
                    line,
                    field,
                    format!("bbox [{x1}, {y1}, {x2}, {y2}] must have x1 < x2 and y1 < y2"),
                ));
            }
            if x1 < 0.0 || y1 < 0.0 || x2 > self.width as f64 || y2 > self.height as f64 {
                return Err(Error::parse(
                    line,
                    field,
                    format!(
                        "bbox [{x1}, {y1}, {x2}, {y2}] outside [0, {}] x [0, {}]",
                        self.width, self.height
                    ),
                ));
            }
            if region.phrase.is_empty() {
                return Err(Error::parse(
                    line,
                    format!("regions[{i}].phrase"),
                    "phrase must be non-empty",
                ));
            }
        }
        Ok(())
    }
}

/// Parse one grounding record from a JSON line (1-based line number for
/// error reporting).
pub fn parse_grounding_record(line_text: &str, line: usize) -> Result<GroundingRecord> {
    let record: GroundingRecord = serde_json::from_str(line_text)
        .map_err(|e| Error::parse(line, "<record>", e.to_string()))?;
    record.validate(line)?;
    Ok(record)
}

/// Canonical serialization: fixed field order, compact separators.
pub fn serialize_grounding_record(record: &GroundingRecord) -> String {
    serde_json::to_string(record).expect("grounding record serializes")
}

pub fn read_odvg(path: &Path) -> Result<Vec<GroundingRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_text = line?;
        if line_text.trim().is_empty() {
            continue;
        }
        records.push(parse_grounding_record(&line_text, i + 1)?);
    }
    Ok(records)
}

pub fn write_odvg(path: &Path, records: &[GroundingRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        writeln!(file, "{}", serialize_grounding_record(record))?;
    }
    Ok(())
}

/// Split ratios plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        if ratios.0 <= 0.0 || ratios.1 <= 0.0 || ratios.2 <= 0.0 {
            return Err(Error::config(format!(
                "split ratios must be positive, got {ratios:?}"
            )));
        }
        Ok(Self { ratios, seed })
    }

    fn normalized(&self) -> [f64; 3] {
        let sum = self.ratios.0 + self.ratios.1 + self.ratios.2;
        [
            self.ratios.0 / sum,
            self.ratios.1 / sum,
            self.ratios.2 / sum,
        ]
    }
}

/// The three id lists of a dataset partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffle followed by a largest-remainder partition: each
/// split size differs from `ratio * N` by less than one.
pub fn split_dataset(ids: &[String], spec: &SplitSpec) -> Result<Splits> {
    if ids.is_empty() {
        return Err(Error::config("cannot split an empty id list".to_string()));
    }
    let mut seen = std::collections::BTreeMap::new();
    for id in ids {
        *seen.entry(id.clone()).or_insert(0usize) += 1;
    }
    let duplicates: Vec<String> = seen
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(id, _)| id)
        .collect();
    if !duplicates.is_empty() {
        return Err(Error::config(format!(
            "duplicate ids: {}",
            duplicates.join(", ")
        )));
    }

    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let ratios = spec.normalized();
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = n - sizes.iter().sum::<usize>();
    // hand out leftovers by descending fractional remainder, index as tiebreak
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }

    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok(Splits {
        train: shuffled[..val_start].to_vec(),
        val: shuffled[val_start..test_start].to_vec(),
        test: shuffled[test_start..].to_vec(),
    })
}

pub fn write_split_manifests(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, ids) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let mut file = std::fs::File::create(dir.join(format!("{name}.txt")))?;
        for id in ids {
            writeln!(file, "{id}")?;
        }
    }
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)?;
    let mut ids = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            ids.push(trimmed.to_string());
        }
    }
    Ok(ids)
}

/// Bilinear image resize with half-pixel centers and border clamping.
pub fn resize_image_bilinear(image: &ImageTensor, size: (usize, usize)) -> Result<ImageTensor> {
    let (oh, ow) = size;
    let (h, w, _) = image.data().dim();
    if (h, w) == (oh, ow) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Array3::<f64>::zeros((oh, ow, 3));
    let sy_scale = h as f64 / oh as f64;
    let sx_scale = w as f64 / ow as f64;
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            for c in 0..3 {
                out[[oy, ox, c]] = (1.0 - wy) * (1.0 - wx) * src[[y0, x0, c]]
                    + (1.0 - wy) * wx * src[[y0, x1, c]]
                    + wy * (1.0 - wx) * src[[y1, x0, c]]
                    + wy * wx * src[[y1, x1, c]];
            }
        }
    }
    // interpolation of in-range values stays in range
    ImageTensor::new(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Nearest-neighbour mask resize; output stays binary.
pub fn resize_mask_nearest(mask: &PseudoMask, size: (usize, usize)) -> Result<PseudoMask> {
    let (oh, ow) = size;
    let (h, w) = mask.data().dim();
    if (h, w) == (oh, ow) {
        return Ok(mask.clone());
    }
    let src = mask.data();
    let sy_scale = h as f64 / oh as f64;
    let sx_scale = w as f64 / ow as f64;
    let out = Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * sy_scale).floor() as usize).min(h - 1);
        let sx = (((ox as f64 + 0.5) * sx_scale).floor() as usize).min(w - 1);
        src[[sy, sx]]
    });
    PseudoMask::new(out)
}

/// Resize an image (bilinear) and optional mask (nearest) to a model input
/// size; the target must be divisible by 32.
pub fn resize_pair(
    image: &ImageTensor,
    mask: Option<&PseudoMask>,
    size: (usize, usize),
) -> Result<(ImageTensor, Option<PseudoMask>)> {
    if size.0 == 0 || size.1 == 0 || size.0 % 32 != 0 || size.1 % 32 != 0 {
        return Err(Error::config(format!(
            "resize target {size:?} must be positive and divisible by 32"
        )));
    }
    let image = resize_image_bilinear(image, size)?;
    let mask = mask.map(|m| resize_mask_nearest(m, size)).transpose()?;
    Ok((image, mask))
}

/// Save a binary mask as a single-channel 8-bit PNG with values 0 and 255.
pub fn save_mask(path: &Path, mask: &PseudoMask) -> Result<()> {
    let (h, w) = mask.data().dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.data().indexed_iter() {
        buf.put_pixel(x as u32, y as u32, image::Luma([if v == 1 { 255 } else { 0 }]));
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<PseudoMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = match pixel.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::numeric(format!(
                    "mask file {} has non-binary value {other} at ({x}, {y})",
                    path.display()
                )))
            }
        };
    }
    PseudoMask::new(out)
}

/// Save an image as 8-bit RGB PNG (values quantized by rounding).
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w, _) = image.data().dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image.data()[[y, x, 0]] * 255.0).round() as u8,
                (image.data()[[y, x, 1]] * 255.0).round() as u8,
                (image.data()[[y, x, 2]] * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = pixel.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(out)
}

/// One id/text line of `texts.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEntry {
    pub id: String,
    pub text: String,
}

pub fn write_texts(path: &Path, entries: &[TextEntry]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for entry in entries {
        writeln!(file, "{}", serde_json::to_string(entry).expect("text entry"))?;
    }
    Ok(())
}

pub fn read_texts(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TextEntry =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, "<text>", e.to_string()))?;
        map.insert(entry.id, entry.text);
    }
    Ok(map)
}

/// One training/eval sample.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: ImageTensor,
    pub text: String,
    pub mask: Option<PseudoMask>,
}

impl SegSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            if (mask.height(), mask.width()) != (self.image.height(), self.image.width()) {
                return Err(Error::shape(format!(
                    "sample {}: mask ({}, {}) does not match image ({}, {})",
                    self.id,
                    mask.height(),
                    mask.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
        }
        Ok(())
    }
}

/// Load a dataset directory: `images/*.png`, optional `masks/<id>.png`,
/// `texts.jsonl`. Ids are file stems, ordered lexicographically.
pub fn load_seg_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(Error::config(format!(
            "dataset directory {} has no images/ subdirectory",
            dir.display()
        )));
    }
    let texts = {
        let path = dir.join("texts.jsonl");
        if path.is_file() {
            read_texts(&path)?
        } else {
            BTreeMap::new()
        }
    };
    let mut stems: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&images_dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for id in stems {
        let image = load_image(&images_dir.join(format!("{id}.png")))?;
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.is_file() {
            Some(load_mask(&mask_path)?)
        } else {
            None
        };
        let text = texts.get(&id).cloned().unwrap_or_else(|| "lesion".to_string());
        let sample = SegSample {
            id,
            image,
            text,
            mask,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Persist a synthetic corpus as a dataset directory (images, ground-truth
/// masks, texts, and a grounding-record file built from the exact boxes).
pub fn save_corpus(dir: &Path, items: &[crate::synth::SyntheticItem]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut texts = Vec::new();
    let mut records = Vec::new();
    for item in items {
        save_image(&dir.join("images").join(format!("{}.png", item.id)), &item.image)?;
        save_mask(&dir.join("masks").join(format!("{}.png", item.id)), &item.mask)?;
        texts.push(TextEntry {
            id: item.id.clone(),
            text: item.text.clone(),
        });
        records.push(GroundingRecord {
            image_path: format!("images/{}.png", item.id),
            width: item.image.width(),
            height: item.image.height(),
            text: item.text.clone(),
            regions: item
                .boxes
                .iter()
                .map(|b| Region {
                    bbox: *b,
                    phrase: "lesion".to_string(),
                })
                .collect(),
        });
    }
    write_texts(&dir.join("texts.jsonl"), &texts)?;
    write_odvg(&dir.join("odvg.jsonl"), &records)?;
    Ok(())
}

/// Draw the mask boundary in red over the image (4-neighbour boundary).
pub fn overlay(image: &ImageTensor, mask: &PseudoMask) -> Result<ImageTensor> {
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(Error::shape(format!(
            "overlay mask ({}, {}) vs image ({}, {})",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let m = mask.data();
    let mut out = image.data().clone();
    for y in 0..h {
        for x in 0..w {
            if m[[y, x]] != 1 {
                continue;
            }
            let boundary = (y == 0 || m[[y - 1, x]] == 0)
                || (y + 1 == h || m[[y + 1, x]] == 0)
                || (x == 0 || m[[y, x - 1]] == 0)
                || (x + 1 == w || m[[y, x + 1]] == 0);
            if boundary {
                out[[y, x, 0]] = 1.0;
                out[[y, x, 1]] = 0.0;
                out[[y, x, 2]] = 0.0;
            }
        }
    }
    ImageTensor::new(out)
}
