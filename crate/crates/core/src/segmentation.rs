//! Downstream segmentation harness: a small encoder-decoder pixel segmentor
//! with per-class channels, instance extraction via connected components,
//! and the three training regimes (real only, synthetic only, synthetic then
//! real) evaluated on a held-out test split.

use crate::dataset::{tight_bbox, AnnotatedDataset};
use crate::diffusion::model::{ArchConfig, UNet};
use crate::error::{CoreError, Result};
use crate::metrics::detection::{coco_thresholds, map_coco, DetInstance, GtInstance};
use crate::metrics::masks::hausdorff;
use crate::nn::optim::{Adam, Optimizer};
use crate::nn::store::ParamStore;
use crate::rng::{rng_from_seed, subseed};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentorConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Cross-entropy weight of the background class (foreground weighs 1).
    pub background_weight: f64,
    pub score_threshold: f64,
    pub min_area: usize,
    pub divergence_threshold: f64,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        SegmentorConfig {
            base_channels: 8,
            levels: 2,
            num_classes: 5,
            epochs: 12,
            learning_rate: 2e-3,
            seed: 0,
            background_weight: 0.2,
            score_threshold: 0.5,
            min_area: 3,
            divergence_threshold: 1e6,
        }
    }
}

pub struct Segmentor {
    pub store: ParamStore,
    unet: UNet,
    pub num_classes: usize,
}

impl Segmentor {
    pub fn new(cfg: &SegmentorConfig, seed: u64) -> Result<Self> {
        let arch = ArchConfig {
            in_channels: 3,
            out_channels: cfg.num_classes + 1,
            base_channels: cfg.base_channels,
            levels: cfg.levels,
            time_dim: 4,
            cond_dim: 4,
            vocab_size: 1,
        };
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let unet = UNet::build(&mut store, "seg", &arch, &mut rng);
        Ok(Segmentor { store, unet, num_classes: cfg.num_classes })
    }

    /// Per-pixel class probabilities, (num_classes+1, H, W).
    pub fn probabilities(&self, image: &Array3<f64>) -> Array3<f64> {
        let (logits, _) = self.unet.forward(&self.store, image, 0, None, &[], None);
        softmax_channels(&logits)
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }
}

fn softmax_channels(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for ch in 0..c {
                maxv = maxv.max(logits[(ch, y, x)]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (logits[(ch, y, x)] - maxv).exp();
                out[(ch, y, x)] = e;
                z += e;
            }
            for ch in 0..c {
                out[(ch, y, x)] /= z;
            }
        }
    }
    out
}

/// Per-pixel label map from a dataset image's annotations (0 = background).
pub fn label_map(ds: &AnnotatedDataset, image_id: u64) -> Result<Array2<u32>> {
    let img = ds
        .images
        .get(&image_id)
        .ok_or_else(|| CoreError::config(format!("label_map: unknown image {image_id}")))?;
    let mut labels = Array2::zeros((img.height, img.width));
    for ann in ds.annotations_of(image_id) {
        for y in 0..img.height {
            for x in 0..img.width {
                if ann.mask[(y, x)] != 0 {
                    labels[(y, x)] = ann.category_id;
                }
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegTrainingLog {
    /// (epoch mean loss, validation foreground IoU).
    pub epochs: Vec<(f64, f64)>,
    /// Set when epochs = 0: the returned model is the random initialization.
    pub untrained: bool,
}

/// Weighted softmax cross-entropy loss and logit gradient for one image.
fn ce_loss_grad(probs: &Array3<f64>, labels: &Array2<u32>, bg_weight: f64) -> (f64, Array3<f64>) {
    let (c, h, w) = probs.dim();
    let mut weight_sum = 0.0;
    let mut loss = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let label = labels[(y, x)] as usize;
            let wgt = if label == 0 { bg_weight } else { 1.0 };
            weight_sum += wgt;
            let p = probs[(label, y, x)].max(1e-12);
            loss -= wgt * p.ln();
            for ch in 0..c {
                let y_ch = if ch == label { 1.0 } else { 0.0 };
                grad[(ch, y, x)] = wgt * (probs[(ch, y, x)] - y_ch);
            }
        }
    }
    let norm = 1.0 / weight_sum.max(1e-12);
    grad.mapv_inplace(|v| v * norm);
    (loss * norm, grad)
}

/// Trains a segmentor from scratch (or continues from `init`) on annotated
/// pixels. Deterministic per seed; logs per-epoch loss and validation IoU.
pub fn train_segmentor(
    train: &AnnotatedDataset,
    val: &AnnotatedDataset,
    cfg: &SegmentorConfig,
    init: Option<Segmentor>,
) -> Result<(Segmentor, SegTrainingLog)> {
    if train.images.is_empty() {
        return Err(CoreError::config("train_segmentor: empty training dataset"));
    }
    let mut model = match init {
        Some(m) => m,
        None => Segmentor::new(cfg, subseed(cfg.seed, "segmentor-init", 0))?,
    };
    let mut log = SegTrainingLog::default();
    if cfg.epochs == 0 {
        log.untrained = true;
        return Ok((model, log));
    }
    let items: Vec<(u64, Array3<f64>, Array2<u32>)> = train
        .images
        .iter()
        .map(|(id, img)| {
            let pixels = img
                .pixels
                .clone()
                .ok_or_else(|| CoreError::Prerequisite(format!("train_segmentor: image {id} has no pixels")))?;
            Ok((*id, pixels, label_map(train, *id)?))
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = rng_from_seed(subseed(cfg.seed, "segmentor-order", 0));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (_, image, labels) = &items[i];
            let (logits, cache) = model.unet.forward(&model.store, image, 0, None, &[], None);
            let probs = softmax_channels(&logits);
            let (loss, grad) = ce_loss_grad(&probs, labels, cfg.background_weight);
            if !loss.is_finite() || loss > cfg.divergence_threshold {
                return Err(CoreError::numeric(format!(
                    "train_segmentor: divergence at epoch {epoch} (loss {loss})"
                )));
            }
            epoch_loss += loss;
            let back = model.unet.backward(&model.store, &cache, &grad, &[]);
            opt.step(&mut model.store, &back.grads);
        }
        let val_iou = if val.images.is_empty() { 0.0 } else { foreground_iou(&model, val, cfg)? };
        log.epochs.push((epoch_loss / items.len() as f64, val_iou));
    }
    Ok((model, log))
}

/// One instance per connected component of the thresholded per-class argmax
/// map, scored by its mean class probability.
pub fn predict_instances(
    model: &Segmentor,
    image: &Array3<f64>,
    image_id: u64,
    score_threshold: f64,
    min_area: usize,
) -> Vec<DetInstance> {
    let probs = model.probabilities(image);
    instances_from_probs(&probs, image_id, score_threshold, min_area)
}

/// Instance extraction from a probability map; split out so fixtures can
/// drive it directly.
pub fn instances_from_probs(
    probs: &Array3<f64>,
    image_id: u64,
    score_threshold: f64,
    min_area: usize,
) -> Vec<DetInstance> {
    let (c, h, w) = probs.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut best, mut best_p) = (0usize, probs[(0, y, x)]);
            for ch in 1..c {
                if probs[(ch, y, x)] > best_p {
                    best = ch;
                    best_p = probs[(ch, y, x)];
                }
            }
            if best != 0 && best_p >= score_threshold {
                labels[(y, x)] = best as u32;
            }
        }
    }
    let mut out = Vec::new();
    let mut visited = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let class_id = labels[(y, x)];
            if class_id == 0 || visited[(y, x)] != 0 {
                continue;
            }
            // BFS over the 4-neighborhood.
            let mut mask = Array2::<u8>::zeros((h, w));
            let mut queue = std::collections::VecDeque::new();
            queue.push_back((y, x));
            visited[(y, x)] = 1;
            let mut area = 0usize;
            let mut prob_sum = 0.0;
            while let Some((cy, cx)) = queue.pop_front() {
                if labels[(cy, cx)] != class_id {
                    continue;
                }
                mask[(cy, cx)] = 1;
                area += 1;
                prob_sum += probs[(class_id as usize, cy, cx)];
                let mut push = |ny: usize, nx: usize, visited: &mut Array2<u8>| {
                    if labels[(ny, nx)] == class_id && visited[(ny, nx)] == 0 {
                        visited[(ny, nx)] = 1;
                        queue.push_back((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx, &mut visited);
                }
                if cy + 1 < h {
                    push(cy + 1, cx, &mut visited);
                }
                if cx > 0 {
                    push(cy, cx - 1, &mut visited);
                }
                if cx + 1 < w {
                    push(cy, cx + 1, &mut visited);
                }
            }
            if area < min_area {
                continue;
            }
            let bbox = tight_bbox(&mask).expect("component is non-empty");
            out.push(DetInstance {
                image_id,
                category_id: class_id,
                score: prob_sum / area as f64,
                mask,
                bbox,
            });
        }
    }
    out
}

/// Dataset-aggregated foreground pixel IoU (any class vs any class).
pub fn foreground_iou(model: &Segmentor, ds: &AnnotatedDataset, cfg: &SegmentorConfig) -> Result<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (id, img) in &ds.images {
        let pixels = img
            .pixels
            .as_ref()
            .ok_or_else(|| CoreError::Prerequisite(format!("foreground_iou: image {id} has no pixels")))?;
        let probs = model.probabilities(pixels);
        let gt = label_map(ds, *id)?;
        let (c, h, w) = probs.dim();
        for y in 0..h {
            for x in 0..w {
                let (mut best, mut best_p) = (0usize, probs[(0, y, x)]);
                for ch in 1..c {
                    if probs[(ch, y, x)] > best_p {
                        best = ch;
                        best_p = probs[(ch, y, x)];
                    }
                }
                let pred_fg = best != 0 && best_p >= cfg.score_threshold;
                let gt_fg = gt[(y, x)] != 0;
                if pred_fg && gt_fg {
                    inter += 1;
                }
                if pred_fg || gt_fg {
                    union += 1;
                }
            }
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Test-set metrics of one trained segmentor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegEvaluation {
    pub segm_map: f64,
    pub bbox_map: f64,
    /// Foreground pixel IoU in [0, 1].
    pub iou: f64,
    /// Mean per-image normalized Hausdorff distance of foreground masks.
    pub hd: f64,
}

pub fn evaluate_segmentor(model: &Segmentor, test: &AnnotatedDataset, cfg: &SegmentorConfig) -> Result<SegEvaluation> {
    let mut preds: Vec<DetInstance> = Vec::new();
    let mut gts: Vec<GtInstance> = Vec::new();
    let mut hd_sum = 0.0;
    let mut hd_count = 0usize;
    for (id, img) in &test.images {
        let pixels = img
            .pixels
            .as_ref()
            .ok_or_else(|| CoreError::Prerequisite(format!("evaluate: image {id} has no pixels")))?;
        preds.extend(predict_instances(model, pixels, *id, cfg.score_threshold, cfg.min_area));
        for ann in test.annotations_of(*id) {
            gts.push(GtInstance {
                image_id: *id,
                category_id: ann.category_id,
                mask: ann.mask.clone(),
                bbox: ann.bbox,
            });
        }
        // Per-image foreground HD.
        let gt_fg = {
            let labels = label_map(test, *id)?;
            labels.mapv(|v| u8::from(v != 0))
        };
        let pred_fg = {
            let probs = model.probabilities(pixels);
            let (c, h, w) = probs.dim();
            Array2::from_shape_fn((h, w), |(y, x)| {
                let (mut best, mut best_p) = (0usize, probs[(0, y, x)]);
                for ch in 1..c {
                    if probs[(ch, y, x)] > best_p {
                        best = ch;
                        best_p = probs[(ch, y, x)];
                    }
                }
                u8::from(best != 0 && best_p >= cfg.score_threshold)
            })
        };
        hd_sum += hausdorff(&pred_fg, &gt_fg)?.value;
        hd_count += 1;
    }
    let pixel_iou = foreground_iou(model, test, cfg)?;
    let maps = map_coco(&preds, &gts, &coco_thresholds())?;
    Ok(SegEvaluation {
        segm_map: maps.segm_map,
        bbox_map: maps.bbox_map,
        iou: pixel_iou,
        hd: if hd_count == 0 { 0.0 } else { hd_sum / hd_count as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RealOnly,
    SyntheticOnly,
    SyntheticPlusReal,
}

impl Regime {
    pub fn all() -> Vec<Regime> {
        vec![Regime::RealOnly, Regime::SyntheticOnly, Regime::SyntheticPlusReal]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::RealOnly => "real_only",
            Regime::SyntheticOnly => "synthetic_only",
            Regime::SyntheticPlusReal => "synthetic_plus_real",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: String,
    pub real_fraction: f64,
    /// Median over seeds.
    pub metrics: SegEvaluation,
    pub per_seed: Vec<(u64, SegEvaluation)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeTable {
    pub rows: Vec<RegimeRow>,
}

impl RegimeTable {
    pub fn row(&self, regime: Regime) -> Option<&RegimeRow> {
        self.rows.iter().find(|r| r.regime == regime.name())
    }

    /// Text table on the paper scale (IoU x100).
    pub fn to_text(&self) -> String {
        let mut out = String::from("regime              segm_map  bbox_map  iou(x100)  hd\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<19} {:>8.3} {:>9.3} {:>10.2} {:>5.2}\n",
                r.regime,
                r.metrics.segm_map,
                r.metrics.bbox_map,
                r.metrics.iou * 100.0,
                r.metrics.hd
            ));
        }
        out
    }
}

fn median_eval(mut vals: Vec<(u64, SegEvaluation)>) -> SegEvaluation {
    fn med(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        v[(v.len() - 1) / 2]
    }
    let mut s: Vec<f64> = vals.iter().map(|(_, e)| e.segm_map).collect();
    let mut b: Vec<f64> = vals.iter().map(|(_, e)| e.bbox_map).collect();
    let mut i: Vec<f64> = vals.iter().map(|(_, e)| e.iou).collect();
    let mut h: Vec<f64> = vals.iter().map(|(_, e)| e.hd).collect();
    vals.sort_by_key(|(seed, _)| *seed);
    SegEvaluation { segm_map: med(&mut s), bbox_map: med(&mut b), iou: med(&mut i), hd: med(&mut h) }
}

/// Deterministic subset of a dataset's images (and their annotations).
pub fn subset_real(ds: &AnnotatedDataset, fraction: f64, seed: u64) -> Result<AnnotatedDataset> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(CoreError::config("real_fraction must lie in (0, 1]"));
    }
    if (fraction - 1.0).abs() < 1e-12 {
        return Ok(ds.clone());
    }
    let mut ids = ds.image_ids();
    ids.shuffle(&mut rng_from_seed(subseed(seed, "real-fraction", 0)));
    let keep = ((ids.len() as f64 * fraction).ceil() as usize).max(1);
    let kept: std::collections::BTreeSet<u64> = ids.into_iter().take(keep).collect();
    let mut out = AnnotatedDataset::new(ds.categories.clone());
    for (id, img) in &ds.images {
        if kept.contains(id) {
            out.images.insert(*id, img.clone());
        }
    }
    for (id, ann) in &ds.annotations {
        if kept.contains(&ann.image_id) {
            out.annotations.insert(*id, ann.clone());
        }
    }
    Ok(out)
}

fn assert_split_hygiene(real_train: &AnnotatedDataset, val: &AnnotatedDataset, test: &AnnotatedDataset) -> Result<()> {
    let a: std::collections::BTreeSet<u64> = real_train.images.keys().copied().collect();
    let b: std::collections::BTreeSet<u64> = val.images.keys().copied().collect();
    let c: std::collections::BTreeSet<u64> = test.images.keys().copied().collect();
    let mut leaks = Vec::new();
    for id in a.intersection(&b) {
        leaks.push(format!("image {id} in both train and val"));
    }
    for id in a.intersection(&c) {
        leaks.push(format!("image {id} in both train and test"));
    }
    for id in b.intersection(&c) {
        leaks.push(format!("image {id} in both val and test"));
    }
    if leaks.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Validation(leaks))
    }
}

/// Trains and evaluates every requested regime at the given real fraction,
/// reporting per-seed values and seed medians. Split leakage aborts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_regimes(
    real_train: &AnnotatedDataset,
    synthetic: &AnnotatedDataset,
    val: &AnnotatedDataset,
    test: &AnnotatedDataset,
    cfg: &SegmentorConfig,
    regimes: &[Regime],
    seeds: &[u64],
    real_fraction: f64,
) -> Result<RegimeTable> {
    assert_split_hygiene(real_train, val, test)?;
    if seeds.is_empty() {
        return Err(CoreError::config("evaluate_regimes: need at least one seed"));
    }
    let mut rows = Vec::new();
    for &regime in regimes {
        let per_seed: Result<Vec<(u64, SegEvaluation)>> = seeds
            .iter()
            .map(|&seed| {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = seed;
                let real = subset_real(real_train, real_fraction, seed)?;
                let model = match regime {
                    Regime::RealOnly => train_segmentor(&real, val, &run_cfg, None)?.0,
                    Regime::SyntheticOnly => train_segmentor(synthetic, val, &run_cfg, None)?.0,
                    Regime::SyntheticPlusReal => {
                        // Pretrain on synthetic, then tune on real.
                        let (pre, _) = train_segmentor(synthetic, val, &run_cfg, None)?;
                        train_segmentor(&real, val, &run_cfg, Some(pre))?.0
                    }
                };
                Ok((seed, evaluate_segmentor(&model, test, &run_cfg)?))
            })
            .collect();
        let per_seed = per_seed?;
        rows.push(RegimeRow {
            regime: regime.name().to_string(),
            real_fraction,
            metrics: median_eval(per_seed.clone()),
            per_seed,
        });
    }
    Ok(RegimeTable { rows })
}
