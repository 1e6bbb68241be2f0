//! Synthetic corpus generation: bright elliptical blobs on a textured dark
//! background, with exact ground-truth masks, tight boxes, and per-image
//! text at two prompt granularities. Used by the tests and the demo
//! workflow in place of clinical data.

use crate::error::{Error, Result};
use crate::types::{ImageTensor, PseudoMask};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Prompt granularity: a single word or a short descriptive sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Word,
    Sentence,
}

/// Fixed word-level vocabulary shared by the corpus generator, the text
/// encoder, and the CLI.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            words: Self::default_vocab(),
        }
    }
}

impl Vocab {
    pub fn default_vocab() -> Vec<&'static str> {
        vec![
            "a", "an", "and", "background", "blob", "blobs", "bright", "dark", "faint", "image",
            "large", "lesion", "lesions", "no", "normal", "on", "one", "oval", "region",
            "regions", "round", "small", "spot", "spots", "texture", "the", "three", "tissue",
            "two", "visible", "zero",
        ]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lowercase, split on non-alphanumeric boundaries, map to ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for (position, word) in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .enumerate()
        {
            let lower = word.to_lowercase();
            match self.words.iter().position(|w| *w == lower) {
                Some(id) => ids.push(id),
                None => {
                    return Err(Error::UnknownWord {
                        word: lower,
                        position,
                    })
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::config("text produced no tokens".to_string()));
        }
        Ok(ids)
    }
}

/// One axis-aligned-frame ellipse; `theta` rotates it in the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub theta: f64,
    pub intensity: f64,
}

impl Blob {
    /// Point-in-ellipse test against the pixel center `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }

    /// Normalized squared ellipse radius at a pixel center (0 at center,
    /// 1 on the boundary).
    fn radius2(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2)
    }
}

/// One generated sample: image, exact mask, tight ground-truth boxes, text.
#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub id: String,
    pub image: ImageTensor,
    pub mask: PseudoMask,
    pub blobs: Vec<Blob>,
    /// Tight pixel boxes `(x1, y1, x2, y2)` of each rasterized blob.
    pub boxes: Vec<[f64; 4]>,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub size: (usize, usize),
    pub granularity: Granularity,
    pub max_blobs: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            size: (128, 128),
            granularity: Granularity::Sentence,
            max_blobs: 3,
        }
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        0 => "zero",
        1 => "one",
        2 => "two",
        _ => "three",
    }
}

fn describe(n: usize, granularity: Granularity) -> String {
    match granularity {
        Granularity::Word => {
            if n == 0 {
                "normal".to_string()
            } else {
                "lesion".to_string()
            }
        }
        Granularity::Sentence => {
            if n == 0 {
                "no lesion visible on the dark tissue".to_string()
            } else if n == 1 {
                "one bright oval lesion on the dark tissue".to_string()
            } else {
                format!("{} bright oval lesions on the dark tissue", count_word(n))
            }
        }
    }
}

/// Generate `n` images with 0..=max_blobs well-separated bright elliptical
/// blobs each, deterministic in `seed`. Blob semi-axes span a bounded range
/// so every component survives the 0.25 relative-area confidence filter.
pub fn make_synthetic_corpus(n: usize, seed: u64, opts: &CorpusOptions) -> Result<Vec<SyntheticItem>> {
    if n == 0 {
        return Err(Error::config("corpus size must be >= 1".to_string()));
    }
    let (h, w) = opts.size;
    if h < 32 || w < 32 {
        return Err(Error::config(format!(
            "corpus image size ({h}, {w}) must be at least 32x32"
        )));
    }
    let mut items = Vec::with_capacity(n);
    for index in 0..n {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        items.push(generate_item(index, &mut rng, opts)?);
    }
    Ok(items)
}

fn generate_item(index: usize, rng: &mut ChaCha8Rng, opts: &CorpusOptions) -> Result<SyntheticItem> {
    let (h, w) = opts.size;
    let min_side = h.min(w) as f64;
    // Semi-axis range keeps the area ratio of any two blobs above ~0.3.
    let r_min = (min_side * 0.14).max(5.0);
    let r_max = r_min * 1.6;

    let blob_count = {
        let u: f64 = rng.gen();
        if u < 0.15 {
            0
        } else {
            rng.gen_range(1..=opts.max_blobs.max(1))
        }
    };

    let mut blobs: Vec<Blob> = Vec::new();
    for _ in 0..blob_count {
        let mut placed = false;
        for _attempt in 0..64 {
            let semi_x = rng.gen_range(r_min..r_max);
            let semi_y = rng.gen_range(r_min..r_max);
            let reach = semi_x.max(semi_y);
            let margin = reach + 2.0;
            if 2.0 * margin >= w as f64 || 2.0 * margin >= h as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..w as f64 - margin);
            let cy = rng.gen_range(margin..h as f64 - margin);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let intensity = rng.gen_range(0.75..0.95);
            let candidate = Blob {
                cx,
                cy,
                semi_x,
                semi_y,
                theta,
                intensity,
            };
            let separated = blobs.iter().all(|b| {
                let d = ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt();
                d > b.semi_x.max(b.semi_y) + reach + 6.0
            });
            if separated {
                blobs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break; // crowded image; fewer blobs is fine and deterministic
        }
    }

    // Textured dark background: low-frequency waves plus per-pixel noise,
    // everything well below the blob intensity band.
    let fx = rng.gen_range(0.01..0.05);
    let fy = rng.gen_range(0.01..0.05);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = Array3::<f64>::zeros((h, w, 3));
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let wave = 0.04 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            let noise: f64 = rng.gen_range(0.0..0.05);
            let bg = (0.08 + wave + noise).clamp(0.0, 0.2);
            image[[y, x, 0]] = bg;
            image[[y, x, 1]] = bg;
            image[[y, x, 2]] = bg;
        }
    }
    for blob in &blobs {
        let x_lo = (blob.cx - blob.semi_x.max(blob.semi_y) - 1.0).floor().max(0.0) as usize;
        let x_hi = ((blob.cx + blob.semi_x.max(blob.semi_y) + 1.0).ceil() as usize).min(w);
        let y_lo = (blob.cy - blob.semi_x.max(blob.semi_y) - 1.0).floor().max(0.0) as usize;
        let y_hi = ((blob.cy + blob.semi_x.max(blob.semi_y) + 1.0).ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if blob.contains(x, y) {
                    // slightly dimmer toward the rim, never below 0.6
                    let v = blob.intensity - 0.1 * blob.radius2(x, y);
                    image[[y, x, 0]] = v;
                    image[[y, x, 1]] = v * 0.97;
                    image[[y, x, 2]] = v * 0.95;
                    mask[[y, x]] = 1;
                }
            }
        }
    }

    // Snap to the 8-bit grid so in-memory and decoded-from-disk images agree.
    image.mapv_inplace(|v| (v * 255.0).round() / 255.0);

    let boxes = blobs
        .iter()
        .map(|blob| tight_box(blob, h, w))
        .collect::<Option<Vec<_>>>()
        .unwrap_or_default();

    let text = describe(blobs.len(), opts.granularity);
    Ok(SyntheticItem {
        id: format!("sample_{index:04}"),
        image: ImageTensor::new(image)?,
        mask: PseudoMask::new(mask)?,
        blobs,
        boxes,
        text,
    })
}

/// Tight pixel bounding box of the rasterized blob, exclusive right/bottom.
fn tight_box(blob: &Blob, h: usize, w: usize) -> Option<[f64; 4]> {
    let mut x1 = usize::MAX;
    let mut y1 = usize::MAX;
    let mut x2 = 0usize;
    let mut y2 = 0usize;
    let mut any = false;
    let reach = blob.semi_x.max(blob.semi_y) + 1.0;
    let x_lo = (blob.cx - reach).floor().max(0.0) as usize;
    let x_hi = ((blob.cx + reach).ceil() as usize).min(w);
    let y_lo = (blob.cy - reach).floor().max(0.0) as usize;
    let y_hi = ((blob.cy + reach).ceil() as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if blob.contains(x, y) {
                any = true;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
        }
    }
    any.then(|| [x1 as f64, y1 as f64, x2 as f64 + 1.0, y2 as f64 + 1.0])
}
