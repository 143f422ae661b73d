//! COCO-style mean average precision over IoU thresholds 0.5:0.05:0.95,
//! evaluated per class and then averaged (101-point interpolated AP).

use super::masks::iou as mask_iou;
use crate::error::{CoreError, Result};
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub image_id: u64,
    pub category_id: u32,
    pub mask: Array2<u8>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct DetInstance {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub mask: Array2<u8>,
    pub bbox: [f64; 4],
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Axis-aligned box IoU on [x, y, w, h].
pub fn bbox_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ax1 = a[0] + a[2];
    let ay1 = a[1] + a[3];
    let bx1 = b[0] + b[2];
    let by1 = b[1] + b[3];
    let ix = (ax1.min(bx1) - a[0].max(b[0])).max(0.0);
    let iy = (ay1.min(by1) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bbox,
    Segm,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub bbox_map: f64,
    pub segm_map: f64,
}

fn pair_iou(kind: Kind, pred: &DetInstance, gt: &GtInstance) -> Result<f64> {
    Ok(match kind {
        Kind::Bbox => bbox_iou(&pred.bbox, &gt.bbox),
        Kind::Segm => mask_iou(&pred.mask, &gt.mask)?.value,
    })
}

/// 101-point interpolated AP for one class at one threshold.
fn average_precision(
    kind: Kind,
    preds: &[(usize, &DetInstance)],
    gts: &[&GtInstance],
    threshold: f64,
) -> Result<f64> {
    let n_gt = gts.len();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut matched = vec![false; n_gt];
    let mut tp = Vec::with_capacity(preds.len());
    for (_, pred) in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.image_id != pred.image_id {
                continue;
            }
            let v = pair_iou(kind, pred, gt)?;
            if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let (mut n_tp, mut n_fp) = (0usize, 0usize);
    for hit in &tp {
        if *hit {
            n_tp += 1;
        } else {
            n_fp += 1;
        }
        precisions.push(n_tp as f64 / (n_tp + n_fp) as f64);
        recalls.push(n_tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = precisions
            .iter()
            .zip(recalls.iter())
            .filter(|(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    Ok(ap / 101.0)
}

/// (bbox mAP, segm mAP). Classes are those with at least one ground-truth
/// instance; predictions must carry finite scores.
pub fn map_coco(preds: &[DetInstance], gts: &[GtInstance], thresholds: &[f64]) -> Result<MapResult> {
    if thresholds.is_empty() {
        return Err(CoreError::config("map_coco: no IoU thresholds"));
    }
    if let Some(bad) = preds.iter().position(|p| !p.score.is_finite()) {
        return Err(CoreError::Validation(vec![format!("prediction {bad} has a non-finite score")]));
    }
    let mut classes: Vec<u32> = gts.iter().map(|g| g.category_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(CoreError::config("map_coco: no ground-truth instances"));
    }
    let mut result = MapResult { bbox_map: 0.0, segm_map: 0.0 };
    for kind in [Kind::Bbox, Kind::Segm] {
        let mut class_aps = Vec::with_capacity(classes.len());
        for &class_id in &classes {
            let mut class_preds: Vec<(usize, &DetInstance)> =
                preds.iter().enumerate().filter(|(_, p)| p.category_id == class_id).collect();
            // Deterministic: score desc, then image id, then input order.
            class_preds.sort_by(|(ia, a), (ib, b)| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(a.image_id.cmp(&b.image_id))
                    .then(ia.cmp(ib))
            });
            let class_gts: Vec<&GtInstance> = gts.iter().filter(|g| g.category_id == class_id).collect();
            let mut acc = 0.0;
            for &thr in thresholds {
                acc += average_precision(kind, &class_preds, &class_gts, thr)?;
            }
            class_aps.push(acc / thresholds.len() as f64);
        }
        let mean = class_aps.iter().sum::<f64>() / class_aps.len() as f64;
        match kind {
            Kind::Bbox => result.bbox_map = mean,
            Kind::Segm => result.segm_map = mean,
        }
    }
    Ok(result)
}
