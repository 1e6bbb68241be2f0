//! Segmentation quality metrics: per-image IoU and Dice plus dataset means
//! (macro averages). Both-empty pairs score 1.0 by convention, so correctly
//! empty predictions on normal cases count as perfect.

use crate::error::{Error, Result};
use crate::types::PseudoMask;
use serde::{Deserialize, Serialize};

fn counts(pred: &PseudoMask, gt: &PseudoMask) -> Result<(usize, usize, usize)> {
    if pred.data().dim() != gt.data().dim() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.data().dim(),
            gt.data().dim()
        )));
    }
    let mut intersection = 0usize;
    let mut p_area = 0usize;
    let mut g_area = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        p_area += p as usize;
        g_area += g as usize;
        intersection += (p & g) as usize;
    }
    Ok((intersection, p_area, g_area))
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1.0 when both masks are empty.
pub fn iou(pred: &PseudoMask, gt: &PseudoMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `2 |pred ∩ gt| / (|pred| + |gt|)`; 1.0 when both masks are empty.
pub fn dice(pred: &PseudoMask, gt: &PseudoMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
}

/// Per-image metrics plus unweighted means. Values are fractions in [0, 1];
/// render as percentages only at presentation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PerImageMetrics>,
    pub miou: f64,
    pub mdice: f64,
    pub n: usize,
}

impl MetricReport {
    /// Flat table: one `id,iou,dice` row per image plus a mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("id,iou,dice\n");
        for row in &self.per_image {
            out.push_str(&format!("{},{:.6},{:.6}\n", row.id, row.iou, row.dice));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.miou, self.mdice));
        out
    }
}

/// Evaluate a list of `(prediction, ground truth, id)` pairs.
pub fn evaluate(pairs: &[(PseudoMask, PseudoMask, String)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate an empty pair list".to_string()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (pred, gt, id) in pairs {
        let iou_v = iou(pred, gt).map_err(|e| match e {
            Error::Shape(msg) => Error::shape(format!("{id}: {msg}")),
            other => other,
        })?;
        let dice_v = dice(pred, gt)?;
        per_image.push(PerImageMetrics {
            id: id.clone(),
            iou: iou_v,
            dice: dice_v,
        });
    }
    let n = per_image.len();
    let miou = per_image.iter().map(|r| r.iou).sum::<f64>() / n as f64;
    let mdice = per_image.iter().map(|r| r.dice).sum::<f64>() / n as f64;
    Ok(MetricReport {
        per_image,
        miou,
        mdice,
        n,
    })
}
