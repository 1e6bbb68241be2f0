//! Pseudo-label generation: a text-to-box cue converter and a box-prompted
//! mask generator behind pluggable interfaces, plus the deterministic mock
//! implementations that make the pipeline testable without pretrained
//! checkpoints, box filtering, and detection-quality scoring.

use crate::error::{Error, Result};
use crate::types::{ImageTensor, PseudoMask};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// An axis-aligned box in absolute pixel coordinates with a confidence
/// score and the phrase that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub phrase: String,
}

impl ScoredBox {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::shape(format!(
                "box ({}, {}, {}, {}) must satisfy x1 < x2 and y1 < y2",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width as f64 || self.y2 > height as f64 {
            return Err(Error::shape(format!(
                "box ({}, {}, {}, {}) outside image bounds ({width}, {height})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::numeric(format!(
                "box score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union of two pixel boxes.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Maps an image and a text cue to scored boxes.
pub trait CueConverter: Sync {
    fn name(&self) -> &str;
    fn convert(&self, image: &ImageTensor, text: &str) -> Result<Vec<ScoredBox>>;
}

/// Maps an image and a set of boxes to one binary mask. Pixels outside the
/// union of the boxes must be zero.
pub trait MaskGenerator: Sync {
    fn name(&self) -> &str;
    fn generate(&self, image: &ImageTensor, boxes: &[ScoredBox]) -> Result<PseudoMask>;
}

/// Keep boxes with `score > threshold`, preserving order.
pub fn filter_boxes(boxes: &[ScoredBox], threshold: f64) -> Result<Vec<ScoredBox>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(boxes
        .iter()
        .filter(|b| b.score > threshold)
        .cloned()
        .collect())
}

/// Default confidence threshold for box filtering.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.25;

/// 4-connected component labelling. Returns `(labels, count)` where labels
/// are 1-based in first-encountered row-major scan order, 0 = background.
pub fn connected_components(binary: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = binary.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !binary[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                let neighbours = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && binary[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Mock cue converter: binarize luminance at a fixed threshold, box each
/// 4-connected component, score by area relative to the largest component.
#[derive(Debug, Clone)]
pub struct BlobConverter {
    pub intensity_threshold: f64,
}

impl Default for BlobConverter {
    fn default() -> Self {
        Self {
            intensity_threshold: 0.5,
        }
    }
}

impl BlobConverter {
    pub fn new(intensity_threshold: f64) -> Result<Self> {
        if !(0.0 < intensity_threshold && intensity_threshold < 1.0) {
            return Err(Error::config(format!(
                "intensity threshold {intensity_threshold} outside (0, 1)"
            )));
        }
        Ok(Self { intensity_threshold })
    }
}

impl CueConverter for BlobConverter {
    fn name(&self) -> &str {
        "blob"
    }

    fn convert(&self, image: &ImageTensor, text: &str) -> Result<Vec<ScoredBox>> {
        let lum = image.luminance();
        let binary = lum.mapv(|v| v > self.intensity_threshold);
        let (labels, count) = connected_components(&binary);
        if count == 0 {
            return Ok(Vec::new());
        }
        let mut extents = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); count];
        for ((y, x), &label) in labels.indexed_iter() {
            if label == 0 {
                continue;
            }
            let e = &mut extents[label as usize - 1];
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
            e.4 += 1;
        }
        let max_area = extents.iter().map(|e| e.4).max().unwrap() as f64;
        Ok(extents
            .into_iter()
            .map(|(x1, y1, x2, y2, area)| ScoredBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: x2 as f64 + 1.0,
                y2: y2 as f64 + 1.0,
                score: area as f64 / max_area,
                phrase: text.to_string(),
            })
            .collect())
    }
}

/// Score-normalization invariant of the blob converter: all scores lie in
/// `(0, 1]` and the maximum is exactly 1.0 whenever any component exists.
pub fn blob_converter_scores_valid(boxes: &[ScoredBox]) -> bool {
    if boxes.is_empty() {
        return true;
    }
    boxes.iter().all(|b| b.score > 0.0 && b.score <= 1.0)
        && boxes.iter().any(|b| b.score == 1.0)
}

/// Warning emitted when a degenerate box is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedBox {
    pub index: usize,
    pub reason: String,
}

/// Mock box-prompted masker: inside each box, binarize luminance at Otsu's
/// threshold computed over the box window and keep the largest 4-connected
/// component; masks from all boxes are merged by union.
#[derive(Debug, Clone, Default)]
pub struct RegionMaskGenerator;

impl RegionMaskGenerator {
    /// Full-detail entry point returning the per-box warnings.
    pub fn generate_with_warnings(
        &self,
        image: &ImageTensor,
        boxes: &[ScoredBox],
    ) -> Result<(PseudoMask, Vec<SkippedBox>)> {
        let (h, w) = (image.height(), image.width());
        let lum = image.luminance();
        let mut mask = Array2::<u8>::zeros((h, w));
        let mut skipped = Vec::new();
        for (index, b) in boxes.iter().enumerate() {
            b.validate(w, h)?;
            let x1 = b.x1.floor().max(0.0) as usize;
            let y1 = b.y1.floor().max(0.0) as usize;
            let x2 = (b.x2.ceil() as usize).min(w);
            let y2 = (b.y2.ceil() as usize).min(h);
            if (x2 - x1) * (y2 - y1) < 4 {
                skipped.push(SkippedBox {
                    index,
                    reason: format!("box area {} px < 4 px", (x2 - x1) * (y2 - y1)),
                });
                continue;
            }
            let window = lum.slice(ndarray::s![y1..y2, x1..x2]);
            let threshold = otsu_threshold(&window.to_owned());
            let binary = window.mapv(|v| v > threshold);
            let (labels, count) = connected_components(&binary);
            if count == 0 {
                continue;
            }
            let mut sizes = vec![0usize; count];
            for &l in labels.iter() {
                if l > 0 {
                    sizes[l as usize - 1] += 1;
                }
            }
            let largest = sizes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32 + 1)
                .unwrap();
            for ((dy, dx), &l) in labels.indexed_iter() {
                if l == largest {
                    mask[[y1 + dy, x1 + dx]] = 1;
                }
            }
        }
        for s in &skipped {
            log::warn!("region masker skipped box {}: {}", s.index, s.reason);
        }
        Ok((PseudoMask::new(mask)?, skipped))
    }
}

impl MaskGenerator for RegionMaskGenerator {
    fn name(&self) -> &str {
        "region"
    }

    fn generate(&self, image: &ImageTensor, boxes: &[ScoredBox]) -> Result<PseudoMask> {
        self.generate_with_warnings(image, boxes).map(|(m, _)| m)
    }
}

/// Otsu's threshold over a luminance window, 256 bins on [0, 1]. Ties take
/// the lowest bin; a single-level window thresholds just below that level so
/// the whole window counts as foreground.
pub fn otsu_threshold(window: &Array2<f64>) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in window.iter() {
        let bin = ((v * (BINS as f64 - 1.0)).round() as usize).min(BINS - 1);
        hist[bin] += 1;
    }
    let total = window.len() as f64;
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        // single-level window: threshold a full bin below, so the whole
        // window counts as foreground
        let level = hist.iter().position(|&c| c > 0).unwrap_or(0);
        return (level as f64 - 1.0) / (BINS as f64 - 1.0);
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut weight_bg = 0.0;
    let mut sum_bg = 0.0;
    for t in 0..BINS - 1 {
        weight_bg += hist[t] as f64;
        if weight_bg == 0.0 {
            continue;
        }
        let weight_fg = total - weight_bg;
        if weight_fg == 0.0 {
            break;
        }
        sum_bg += t as f64 * hist[t] as f64;
        let mean_bg = sum_bg / weight_bg;
        let mean_fg = (sum_all - sum_bg) / weight_fg;
        let between = weight_bg * weight_fg * (mean_bg - mean_fg).powi(2);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    // cut at the bin boundary: bins 0..=t are background, t+1.. foreground
    (best_t as f64 + 0.5) / (BINS as f64 - 1.0)
}

/// One dataset item entering the pseudo-label pipeline.
#[derive(Debug, Clone)]
pub struct PipelineItem {
    pub id: String,
    pub image: ImageTensor,
    pub text: String,
}

/// Line-delimited provenance for one processed item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: String,
    pub boxes_raw: Vec<ScoredBox>,
    pub boxes_kept: Vec<ScoredBox>,
    pub threshold: f64,
    pub masker_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Pipeline output: per-item masks (None where the item failed), the
/// provenance log, and the failure count.
pub struct PipelineOutput {
    pub masks: Vec<(String, Option<PseudoMask>)>,
    pub provenance: Vec<ProvenanceRecord>,
    pub failures: usize,
}

/// Run converter -> filter -> masker over every item. Failing items are
/// recorded and skipped; the pipeline always completes.
pub fn generate_pseudo_masks(
    items: &[PipelineItem],
    converter: &dyn CueConverter,
    masker: &dyn MaskGenerator,
    threshold: f64,
) -> Result<PipelineOutput> {
    if items.is_empty() {
        return Err(Error::config("pseudo-label pipeline needs a non-empty dataset".to_string()));
    }
    let mut masks = Vec::with_capacity(items.len());
    let mut provenance = Vec::with_capacity(items.len());
    let mut failures = 0usize;
    for item in items {
        let step = converter.convert(&item.image, &item.text).and_then(|raw| {
            let kept = filter_boxes(&raw, threshold)?;
            let mask = masker.generate(&item.image, &kept)?;
            Ok((raw, kept, mask))
        });
        match step {
            Ok((raw, kept, mask)) => {
                provenance.push(ProvenanceRecord {
                    image_id: item.id.clone(),
                    boxes_raw: raw,
                    boxes_kept: kept,
                    threshold,
                    masker_name: masker.name().to_string(),
                    failure: None,
                });
                masks.push((item.id.clone(), Some(mask)));
            }
            Err(e) => {
                failures += 1;
                provenance.push(ProvenanceRecord {
                    image_id: item.id.clone(),
                    boxes_raw: Vec::new(),
                    boxes_kept: Vec::new(),
                    threshold,
                    masker_name: masker.name().to_string(),
                    failure: Some(e.to_string()),
                });
                masks.push((item.id.clone(), None));
            }
        }
    }
    Ok(PipelineOutput {
        masks,
        provenance,
        failures,
    })
}

/// Average precision at one IoU threshold: predictions sorted by descending
/// score (stable), greedily matched to the unmatched ground-truth box of
/// highest IoU >= the threshold. Precision/recall points are taken at each
/// distinct score cutoff and integrated as `sum (R_c - R_prev) * P_c`.
///
/// Conventions: empty ground truth with no predictions scores 1.0; empty
/// ground truth with predictions scores 0.0.
pub fn box_map_score(
    predictions: &[ScoredBox],
    ground_truth: &[[f64; 4]],
    iou_threshold: f64,
) -> Result<f64> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::config(format!(
            "IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    if ground_truth.is_empty() {
        return Ok(if predictions.is_empty() { 1.0 } else { 0.0 });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; ground_truth.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &pi in &order {
        let pb = [
            predictions[pi].x1,
            predictions[pi].y1,
            predictions[pi].x2,
            predictions[pi].y2,
        ];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = box_iou(&pb, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    // Integrate over distinct score cutoffs.
    let n_gt = ground_truth.len() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0usize;
    for (rank, &pi) in order.iter().enumerate() {
        if tp_flags[rank] {
            tp += 1;
        }
        let is_group_end = rank + 1 == order.len()
            || predictions[order[rank + 1]].score < predictions[pi].score;
        if is_group_end {
            let precision = tp as f64 / (rank + 1) as f64;
            let recall = tp as f64 / n_gt;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}
